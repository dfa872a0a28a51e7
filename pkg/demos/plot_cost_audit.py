"""
Counting parameters and multiply-accumulates
============================================

The audit walks a built network and counts weights and MACs per layer.
Elementwise work (norms, activations, pooling, resampling) is totalled in
a separate overhead row.
"""
from lrnnet.blocks import build_lrnnet, model_spec
from lrnnet.cost import count_flops, count_params

for variant in "ABC":
    net = build_lrnnet(model_spec(variant))
    rep = count_flops(net, (1, 3, 512, 1024))
    print(f"model {variant}: {count_params(net).total_params / 1e6:.3f}M params, "
          f"{rep.total_macs / 1e9:.3f}G MACs ({rep.total_flops2x / 1e9:.2f}G at 2 FLOPs per MAC)")

# Where does the compute go? Group the rows of Model C by stage.
rep = count_flops(build_lrnnet(model_spec("C")), (1, 3, 512, 1024))
groups = {}
for row in rep.rows:
    key = row.layer.split(".")[0] if row.layer.startswith("stage") else row.layer.rsplit(".", 1)[0]
    groups[key] = groups.get(key, 0) + row.macs
for key, macs in groups.items():
    print(f"{key:>24}: {macs / 1e9:6.3f}G  ({macs / rep.total_macs:5.1%})")

# The SVN module is under 2% of the total.
svn = sum(r.macs for r in rep.rows if r.layer.startswith("decoder.svn"))
print(f"\nSVN module share: {svn / rep.total_macs:.2%}")
