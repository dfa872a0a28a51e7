"""
Checking gradients against finite differences
=============================================

Every op records a backward function on the tape. ``grad_check`` compares
the result with central differences of a randomly projected output.
"""
import numpy as np

from lrnnet.gradcheck import grad_check
from lrnnet.svn import RegionGrid, SVNConfig, keys_op
from lrnnet.tensor import ConvParams, Tape, Tensor, backward, conv2d, tensor_sum, upsample_bilinear

rng = np.random.default_rng(0)

# A hand-sized example: d/dw sum(conv(x, w)) is the sum of the input patches.
x = Tensor(rng.standard_normal((1, 1, 4, 4)))
w = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
with Tape() as tape:
    y = tensor_sum(conv2d(x, ConvParams(w)))
g = backward(tape, 1.0, output=y)
# tap (i, j) sees the 2x2 block of inputs starting at (i, j)
patch_sum = np.array([[x.data[0, 0, i:i + 2, j:j + 2].sum() for j in range(3)] for i in range(3)])
print("dw equals summed patches:", np.allclose(g[w][0, 0], patch_sum))

# Random checks of a dilated conv, bilinear upsampling and the key extractor.
w = Tensor(rng.standard_normal((4, 2, 3, 3)), requires_grad=True)
p = ConvParams(w, dilation=2, groups=2)
print("conv2d       ", grad_check(lambda t: conv2d(t, p, (2, 2)), [Tensor(rng.standard_normal((2, 4, 6, 6)))], params=[w]))
print("upsample x4  ", grad_check(lambda t: upsample_bilinear(t, 4), [Tensor(rng.standard_normal((1, 2, 3, 5)))]))
cfg = SVNConfig(bottleneck_channels=4, scales=(RegionGrid(2, 2), RegionGrid(1, 1)))
print("keys (T=2)   ", grad_check(lambda t: keys_op(t, cfg), [Tensor(rng.random((1, 4, 6, 6)) + 0.1)], 1e-6))
