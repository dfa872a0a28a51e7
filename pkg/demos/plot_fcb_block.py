"""
The factorized convolution block
================================

An FCB splits its channels in two. Each half goes through a 3x1 then 1x3
convolution. The halves are rejoined and passed through a dilated depthwise
3x3 and a pointwise 1x1. A residual add and a channel shuffle close the block.
"""
import numpy as np

from lrnnet.blocks import FCBParams, _Init, fcb_forward
from lrnnet.tensor import Tensor, channel_shuffle, relu

init = _Init(seed=0, dtype=np.float64)
block = FCBParams.create(128, dilation=5, init=init)
counts = {name: t.data.size for name, t in block.named_parameters("fcb")}
weights = sum(v for k, v in counts.items() if k.endswith("weight"))
print(f"weights {weights} (1D branches {4 * 3 * 64 * 64}, depthwise {9 * 128}, pointwise {128 * 128})")
print(f"biases and norm terms {sum(counts.values()) - weights}")

# A plain 3x3 conv at this width would need 9 * 128 * 128 weights.
print(f"plain 3x3 conv: {9 * 128 * 128} weights, {9 * 128 * 128 / weights:.1f}x more")

# Shapes are preserved for every dilation.
x = Tensor(np.random.default_rng(0).standard_normal((1, 128, 16, 32)))
for d in (1, 2, 5, 9, 17):
    y = fcb_forward(x, FCBParams.create(128, d, init))
    print(f"dilation {d:2d}: {x.shape} -> {y.shape}")

# With every conv weight at zero only the residual path survives.
for name, t in block.named_parameters("fcb"):
    if not name.endswith(("gamma", "beta")):
        t.data[...] = 0.0
same = np.array_equal(fcb_forward(x, block).data, channel_shuffle(relu(x), 2).data)
print(f"zeroed block equals shuffle(relu(x)): {same}")
