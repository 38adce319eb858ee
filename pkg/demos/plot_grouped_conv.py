"""
Grouped 1-D convolution by hand
===============================

A grouped convolution splits the channels into ``G`` independent groups.
Here we check it against a brute-force loop and count what grouping saves.
"""

import numpy as np

from resnext_mtl import nn
from resnext_mtl.nn import ConvSpec

rng = np.random.default_rng(0)

###############################################################################
# A two-group convolution over 6 time steps and 4 channels. Output channels
# 0-1 only see input channels 0-1, outputs 2-3 only see inputs 2-3.

spec = ConvSpec(in_channels=4, out_channels=4, kernel=3, padding=1, groups=2)
x = rng.standard_normal((6, 4))
w = rng.standard_normal(spec.weight_shape)
b = np.zeros(4)
y = nn.conv1d_grouped(x, w, b, spec)
print("weight shape (C_out, C_in/G, K):", spec.weight_shape)
print("output shape:", y.shape)

###############################################################################
# Perturbing a channel of the second group leaves the first group's outputs
# untouched.

x2 = x.copy()
x2[:, 3] += 1.0
y2 = nn.conv1d_grouped(x2, w, b, spec)
print("group 0 unchanged:", np.array_equal(y[:, :2], y2[:, :2]))
print("group 1 changed:  ", not np.array_equal(y[:, 2:], y2[:, 2:]))

###############################################################################
# Brute force: one sliding dot product per output cell.

xp = np.pad(x, ((1, 1), (0, 0)))
brute = np.zeros_like(y)
for o in range(4):
    g = o // 2
    for t in range(6):
        brute[t, o] = b[o] + np.sum(w[o] * xp[t : t + 3, 2 * g : 2 * g + 2].T)
print("max |fast - brute|:", np.abs(y - brute).max())

###############################################################################
# Parameter count ``(C_in/G) * K * C_out + C_out`` for a 128-channel, K=3 layer.

for g in (1, 2, 4, 8, 32):
    print(f"G={g:<3d} params={ConvSpec(128, 128, kernel=3, groups=g).n_params}")

###############################################################################
# The backward pass agrees with central differences.

out, cache = nn.conv1d_grouped_forward(x, w, b, spec)
proj = rng.standard_normal(out.shape)
dx, dw, db = nn.conv1d_grouped_backward(proj, cache)
err = nn.finite_difference_check(
    lambda p: float(np.sum(nn.conv1d_grouped(p["x"], p["w"], p["b"], spec) * proj)),
    {"x": x, "w": w, "b": b},
    {"x": dx, "w": dw, "b": db},
)
print(f"gradient check: max relative error {err:.1e}")
