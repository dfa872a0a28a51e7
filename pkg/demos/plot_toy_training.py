"""
Training on synthetic shapes
============================

A short run on coloured rectangles and ellipses. Set ``LRNNET_DEMO_ITERS``
for a longer run; 2000 iterations take about 20 minutes on one core.
"""
import os

import numpy as np

from lrnnet.blocks import build_lrnnet, model_spec
from lrnnet.train import SynthConfig, TrainConfig, evaluate_miou, gen_synthetic_dataset, train

iters = int(os.environ.get("LRNNET_DEMO_ITERS", "100"))
data = gen_synthetic_dataset(SynthConfig())
print(f"train {data.train.images.shape}, class pixels {data.train.class_histogram(5).tolist()}")

net = build_lrnnet(model_spec("C", num_classes=5), seed=0)
before = evaluate_miou(net, data.val)
log, _ = train(net, data.train, TrainConfig(max_iters=iters))
after = evaluate_miou(net, data.val)

losses = log.losses
print(f"{iters} iterations in {log.seconds:.0f} s: loss {losses[0]:.3f} -> {losses[-10:].mean():.3f}")
print(f"val pixel accuracy {before.pixel_accuracy:.3f} -> {after.pixel_accuracy:.3f}")
print(f"val mIoU {before.miou:.3f} -> {after.miou:.3f}")
print("per-class IoU", np.round(after.iou, 3).tolist())
