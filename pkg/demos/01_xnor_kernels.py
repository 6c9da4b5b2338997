"""
XNOR/popcount arithmetic on packed bits
=======================================

Bits are packed 64 to a word, lowest index in the least significant bit,
with bit 1 standing for +1. A dot product of two +-1 vectors of length n
becomes 2 * popcount(xnor(a, b)) - n.
"""

# %%
import numpy as np

from tentaclenet.bitcore import pack_signs, xnor_gemm, xnor_popcount_dot, im2row_binary
from tentaclenet.layers import BinaryConvLayer, binary_conv_forward

rng = np.random.default_rng(0)

# %% one dot product, checked against plain float arithmetic
n = 100
a = rng.choice([-1.0, 1.0], size=n)
b = rng.choice([-1.0, 1.0], size=n)
pa, pb = pack_signs(a), pack_signs(b)
print("words per row:", pa.words_per_row, "bytes:", pa.nbytes)
print("xnor dot:", xnor_popcount_dot(pa, pb, n), " float dot:", int(a @ b))

# %% a whole matrix product at once
A = rng.choice([-1.0, 1.0], size=(5, 70))
B = rng.choice([-1.0, 1.0], size=(3, 70))
print(xnor_gemm(pack_signs(A), pack_signs(B)))
print((A @ B.T).astype(int))

# %% convolution = im2row over packed bits, then an XNOR GEMM scaled by alpha
x = rng.choice([-1.0, 1.0], size=(2, 6, 6))
w = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
layer = BinaryConvLayer(2, 4, 3, stride=1, pad=1, binact=False, master=w)
layer.finalize()
rows = im2row_binary(pack_signs(x), 3, 3, 1, 1)
print("im2row matrix:", rows.shape, "-> output", binary_conv_forward(pack_signs(x), layer).shape)
print("alpha per filter:", layer.alpha)
