"""
Folding batch-norm into a threshold
===================================

sign(bn(x)) only depends on which side of a per-channel constant x falls,
so inference stores c = mu - (beta / gamma) * sqrt(var + eps) and a flag for
channels with negative gamma.
"""

# %%
import numpy as np

from tentaclenet.layers import BatchNormParams, binact_apply, fused_threshold

bn = BatchNormParams(mu=[0.5, 0.0], var=[0.96, 1.0], gamma=[2.0, -1.0], beta=[0.2, 0.3], eps=0.04)
thr = fused_threshold(bn)
print("thresholds:", thr.c, "flipped:", thr.flipped)

# %% compare against the explicit batch-norm on a grid
x = np.linspace(-2, 2, 9, dtype=np.float32)
fmap = np.stack([x, x])[:, None, :]
bits = binact_apply(fmap, thr).to_bits()[:, 0, :]
explicit = bn.apply(fmap)[:, 0, :] >= 0
print(np.column_stack([x, bits[0], explicit[0], bits[1], explicit[1]]).astype(float))
