"""Toy-scale training: synthetic shapes, poly LR, SGD with momentum, mIoU."""
from __future__ import annotations

import colorsys
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .blocks import Network
from .errors import DataError, NumericError
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

IGNORE_INDEX = 255


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 128
    num_classes: int = 5            # including background (label 0)
    min_shapes: int = 1
    max_shapes: int = 4
    noise_std: float = 0.05
    train_size: int = 512
    val_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need background plus at least one shape class")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError("shape count range is empty")
        if self.height < 8 or self.width < 8:
            raise ValueError("images must be at least 8x8")


@dataclass
class SegDataset:
    images: np.ndarray      # (N, 3, H, W) float32
    masks: np.ndarray       # (N, H, W) uint8

    def __len__(self):
        return len(self.images)

    def class_histogram(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.masks.ravel(), minlength=num_classes)[:num_classes]


@dataclass
class SynthData:
    train: SegDataset
    val: SegDataset
    config: SynthConfig


def class_palette(num_classes: int) -> np.ndarray:
    """Fixed RGB colour per shape class (row 0, background, is unused)."""
    pal = np.zeros((num_classes, 3))
    for k in range(1, num_classes):
        pal[k] = colorsys.hsv_to_rgb((k - 1) / (num_classes - 1), 0.85, 0.95)
    return pal


def _draw_sample(cfg: SynthConfig, rng: np.random.Generator, first_class: int):
    h, w = cfg.height, cfg.width
    palette = class_palette(cfg.num_classes)
    image = np.empty((3, h, w))
    image[:] = rng.uniform(0.15, 0.45)
    mask = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    count = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    for s in range(count):
        cls = first_class if s == 0 else int(rng.integers(1, cfg.num_classes))
        sh = int(rng.integers(max(2, h // 8), h // 2 + 1))
        sw = int(rng.integers(max(2, w // 8), w // 2 + 1))
        top = int(rng.integers(0, h - sh + 1))
        left = int(rng.integers(0, w - sw + 1))
        if rng.random() < 0.5:
            region = (yy >= top) & (yy < top + sh) & (xx >= left) & (xx < left + sw)
        else:
            cy, cx = top + (sh - 1) / 2, left + (sw - 1) / 2
            region = ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0
        colour = np.clip(palette[cls] + rng.uniform(-0.05, 0.05, 3), 0, 1)
        image[:, region] = colour[:, None]
        mask[region] = cls
    image += rng.normal(0.0, cfg.noise_std, image.shape)
    return np.clip(image, 0, 1).astype(np.float32), mask


def _make_split(cfg: SynthConfig, split: int, size: int) -> SegDataset:
    images = np.empty((size, 3, cfg.height, cfg.width), dtype=np.float32)
    masks = np.empty((size, cfg.height, cfg.width), dtype=np.uint8)
    for i in range(size):
        # one generator per sample: generation order cannot change the result
        rng = np.random.default_rng([cfg.seed, split, i])
        images[i], masks[i] = _draw_sample(cfg, rng, 1 + i % (cfg.num_classes - 1))
    return SegDataset(images, masks)


def gen_synthetic_dataset(cfg: SynthConfig = SynthConfig()) -> SynthData:
    """Deterministic images of coloured rectangles/ellipses over a flat background."""
    return SynthData(_make_split(cfg, 0, cfg.train_size), _make_split(cfg, 1, cfg.val_size), cfg)


def export_dataset(ds: SegDataset, directory, prefix: str = "img") -> list:
    from .imageio import write_pgm, write_ppm

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(len(ds)):
        write_ppm(out / f"{prefix}{i:04d}.ppm", ds.images[i])
        write_pgm(out / f"{prefix}{i:04d}.pgm", ds.masks[i])
        paths.append(out / f"{prefix}{i:04d}.ppm")
    return paths


# ---------------------------------------------------------------------------
# loss, schedule, metrics


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    lr_power: float = 0.9
    max_iters: int = 2000
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    threads: int = 1
    checkpoint_every: int = 0       # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 1 or self.max_iters < 1:
            raise ValueError("batch_size and max_iters must be >= 1")


def poly_lr(it: int, cfg: TrainConfig) -> float:
    if not 0 <= it <= cfg.max_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.max_iters}]")
    return cfg.base_lr * (1.0 - it / cfg.max_iters) ** cfg.lr_power


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray, ignore_index: int = IGNORE_INDEX):
    """Mean pixel NLL of the true class and its gradient w.r.t. ``logits``.

    ``logits`` is (N, K, H, W), ``labels`` (N, H, W). Pixels labelled
    ``ignore_index`` contribute neither loss nor gradient.
    """
    n, k, h, w = logits.shape
    labels = np.asarray(labels).astype(np.int64)
    if labels.shape != (n, h, w):
        raise DataError(f"labels shape {labels.shape} != {(n, h, w)}")
    valid = labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise DataError(f"label outside [0, {k}) and not {ignore_index}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(log_p, safe[:, None], axis=1)[:, 0]
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)
    loss = float(-(picked * valid).sum() / count)
    grad = np.exp(log_p)
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad = (grad - onehot) * (valid[:, None] / count)
    return loss, grad.astype(logits.dtype, copy=False)


def confusion_matrix(pred, labels, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    labels = np.asarray(labels).ravel().astype(np.int64)
    keep = labels != ignore_index
    for name, v in (("label", labels[keep]), ("prediction", pred[keep])):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise DataError(f"{name} outside [0, {num_classes})")
    idx = labels[keep] * num_classes + pred[keep]
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple:
    """Per-class IoU (NaN where the class never occurs in ground truth) and their mean."""
    tp = np.diag(cm).astype(np.float64)
    gt = cm.sum(axis=1)
    union = gt + cm.sum(axis=0) - tp
    present = gt > 0
    iou = np.full(cm.shape[0], np.nan)
    iou[present] = tp[present] / union[present]
    return iou, float(np.mean(iou[present])) if present.any() else float("nan")


@dataclass
class EvalResult:
    iou: np.ndarray
    miou: float
    pixel_accuracy: float
    confusion: np.ndarray


def predict(net: Network, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Argmax label map in inference mode."""
    out = []
    for s in range(0, len(images), batch_size):
        x = Tensor(np.asarray(images[s:s + batch_size], dtype=net.dtype))
        out.append(net.forward(x, training=False).data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out)


def evaluate_miou(net: Network, ds: SegDataset, batch_size: int = 8) -> EvalResult:
    pred = predict(net, ds.images, batch_size)
    k = net.spec.num_classes
    cm = confusion_matrix(pred, ds.masks, k)
    iou, miou = iou_from_confusion(cm)
    return EvalResult(iou, miou, float(np.trace(cm) / max(cm.sum(), 1)), cm)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly."""

    next_iter: int = 0
    momentum: dict = field(default_factory=dict)     # param name -> buffer


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)         # (iter, lr, loss)
    seconds: float = 0.0

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def write_csv(self, path, comment: Optional[str] = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "lr", "loss"])
            for it, lr, loss in self.rows:
                w.writerow([it, repr(lr), repr(loss)])


def batch_indices(it: int, n: int, cfg: TrainConfig) -> np.ndarray:
    """Minibatch for iteration ``it``; depends only on (seed, it), so resuming is exact."""
    rng = np.random.default_rng([cfg.seed, it])
    return rng.choice(n, size=min(cfg.batch_size, n), replace=False)


def save_train_checkpoint(path, net: Network, state: TrainState, cfg: TrainConfig,
                          data: Optional[SynthConfig] = None) -> None:
    """Network, momentum buffers, and the configs needed to resume or re-evaluate."""
    from .checkpoint import save_checkpoint

    extra = [(f"optim.momentum.{k}", v) for k, v in state.momentum.items()]
    meta = {"next_iter": state.next_iter, "train": asdict(cfg)}
    if data is not None:
        meta["data"] = asdict(data)
    save_checkpoint(path, net, extra, meta=meta)


def load_train_state(manifest: dict, tensors: dict) -> TrainState:
    prefix = "optim.momentum."
    mom = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    return TrainState(int(manifest["meta"].get("next_iter", 0)), mom)


def train(net: Network, ds: SegDataset, cfg: TrainConfig, state: Optional[TrainState] = None,
          stop_at: Optional[int] = None, checkpoint_dir=None,
          data: Optional[SynthConfig] = None) -> tuple:
    """SGD with momentum under the poly schedule; returns ``(TrainLog, TrainState)``.

    ``stop_at`` ends the run early (exclusive iteration bound) without
    changing the schedule, which is always defined by ``cfg.max_iters``.
    """
    from threadpoolctl import threadpool_limits

    state = state or TrainState()
    params = net.named_parameters()
    for name, p in params:
        state.momentum.setdefault(name, np.zeros_like(p.data))
    end = cfg.max_iters if stop_at is None else min(stop_at, cfg.max_iters)
    history = TrainLog()
    t0 = time.perf_counter()
    with threadpool_limits(limits=cfg.threads):
        for it in range(state.next_iter, end):
            idx = batch_indices(it, len(ds), cfg)
            x = Tensor(ds.images[idx].astype(net.dtype, copy=False))
            with Tape() as tape:
                logits = net.forward(x, training=True)
            loss, seed = cross_entropy_loss(logits.data, ds.masks[idx])
            if not math.isfinite(loss):
                raise NumericError(f"loss became {loss} at iteration {it}")
            grads = backward(tape, seed, output=logits)
            lr = poly_lr(it, cfg)
            for name, p in params:
                g = grads.get(p)
                if g is None:
                    continue
                buf = state.momentum[name]
                buf *= cfg.momentum
                buf += g + cfg.weight_decay * p.data
                p.data -= lr * buf
            history.rows.append((it, lr, loss))
            state.next_iter = it + 1
            if it % 100 == 0:
                log.info("iter %d lr %.5f loss %.4f", it, lr, loss)
            if checkpoint_dir is not None and cfg.checkpoint_every and state.next_iter % cfg.checkpoint_every == 0:
                save_train_checkpoint(Path(checkpoint_dir) / f"iter{state.next_iter:06d}.ckpt",
                                      net, state, cfg, data)
    history.seconds = time.perf_counter() - t0
    return history, state
