"""How a deformable convolution moves its sampling grid.

Run: python demos/01_deformable_sampling.py
"""
import numpy as np

from deformdet.deform_conv import deform_conv2d, deform_conv2d_backward
from deformdet.tensor import ConvParams, conv2d

rng = np.random.default_rng(0)

# A single bright pixel on a 7x7 map, and a 3x3 kernel that only looks at its centre tap.
x = np.zeros((1, 1, 7, 7))
x[0, 0, 2, 3] = 1.0
w = np.zeros((1, 1, 3, 3))
w[0, 0, 1, 1] = 1.0
params = ConvParams(w, np.zeros(1), stride=1, padding=1)

# With every offset at zero the layer is an ordinary convolution.
zero = np.zeros((1, 18, 7, 7))
print("zero offsets match conv2d:", np.array_equal(deform_conv2d(x, params, zero), conv2d(x, params)))

# Offsets are (dy, dx) pairs per tap, taps in row-major order; the centre tap is number 4.
# Pushing its dy to -1 everywhere makes each output read the pixel one row above,
# so the bright spot appears one row lower in the output.
shifted = zero.copy()
shifted[:, 2 * 4] = -1.0
y = deform_conv2d(x, params, shifted)
print("bright pixel at", np.argwhere(x[0, 0]).tolist(), "-> output peak at",
      np.argwhere(y[0, 0] == y.max()).tolist())

# A fractional offset blends neighbours bilinearly.
half = zero.copy()
half[:, 2 * 4 + 1] = 0.5
print("half-pixel dx gives", deform_conv2d(x, params, half)[0, 0, 2, 2:4].tolist())

# The backward pass returns gradients for the offsets too; compare one against a central difference.
offsets = rng.uniform(-0.4, 0.4, (1, 18, 7, 7))
xr = rng.normal(size=(1, 1, 7, 7))
up = rng.normal(size=(1, 1, 7, 7))
g = deform_conv2d_backward(xr, params, offsets, up).d_offsets
eps, idx = 1e-5, (0, 8, 3, 3)
plus, minus = offsets.copy(), offsets.copy()
plus[idx] += eps
minus[idx] -= eps
numeric = ((deform_conv2d(xr, params, plus) - deform_conv2d(xr, params, minus)) * up).sum() / (2 * eps)
print(f"d loss / d offset{list(idx)}: analytic {g[idx]:.8f}, central difference {numeric:.8f}")
