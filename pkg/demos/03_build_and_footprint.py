"""
Building TentacleNets and measuring their storage
=================================================

A spec lists the baseline CNN. The first conv and the classifier stay in
float32, the inner convs become one binary tentacle, and n copies of it run
in parallel into a widened classifier.
"""

# %%
from importlib import resources

from tentaclenet.model import NetworkSpec, build_tentaclenet, footprint

spec = NetworkSpec.load(resources.files("tentaclenet") / "specs" / "nin_cifar10_approx.json")
print(spec.name, "inner layers:", len(spec.inner), "features per tentacle:", spec.features)

# %% the classifier grows with n, the shared first conv does not
for n in (1, 2, 4, 8):
    m = build_tentaclenet(spec, n, master_seed=0).finalize()
    print(f"n={n:<2} fc inputs={m.fc_inputs:<4} fc weights={m.fc_weight_count:<5} size={footprint(m).kb:9.1f} kB")

# %% float32 reference with the same topology
fp = build_tentaclenet(spec, 1, 0, binary=False).finalize()
print(f"fp32 reference: {footprint(fp).kb:.1f} kB")

# %% per-layer breakdown for a small model
print(footprint(build_tentaclenet(spec, 2, 0).finalize()).format())
