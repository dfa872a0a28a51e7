"""``lrnnet`` command line: audit, svn-demo, bench, train, eval, infer, gen-data.

Exit codes: 0 success, 1 numeric failure, 2 usage, 3 checkpoint, 4 I/O.
"""
from __future__ import annotations

import argparse
import csv
import datetime
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .blocks import NetworkSpec, build_lrnnet, model_spec
from .checkpoint import read_checkpoint
from .errors import CheckpointError, ConfigurationError, DataError, DimensionError, NumericError

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE, EXIT_CHECKPOINT, EXIT_IO = 0, 1, 2, 3, 4

# published reference figures: parameters in millions, cost in G per 512x1024 image
REFERENCE = {"A": (0.67, 8.48), "B": (0.68, 8.57), "C": (0.68, 8.58)}
# attention cost figures for a 32-channel 64x128 map
ATTENTION_REFERENCE = {"standard": 4.0e9, "single": 32e6, "multi": 40e6,
                       "power_single": 1e6, "power_multi": 2e6}

TOY_CLASSES = 5


class UsageError(Exception):
    pass


def parse_size(text: str) -> tuple:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def parse_grid_arg(text: str) -> tuple:
    from .svn import parse_grids

    try:
        grids = parse_grids(text)
    except (ValueError, ConfigurationError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if not grids:
        raise argparse.ArgumentTypeError("at least one grid is required")
    return grids


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _shared() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--model", choices=["A", "B", "C"], type=str.upper, default=None)
    p.add_argument("--size", type=parse_size, default=None, metavar="HxW")
    p.add_argument("--grids", type=parse_grid_arg, default=None, metavar="gxg[,gxg...]")
    p.add_argument("--power-iters", type=_positive, default=None, metavar="T")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive, default=1)
    p.add_argument("--convention", choices=["macs", "flops2x"], default="macs")
    p.add_argument("--out", type=Path, default=None, metavar="PATH")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    shared = _shared()
    parser = argparse.ArgumentParser(prog="lrnnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("audit", parents=[shared], help="parameter and MAC report for a model")

    p = sub.add_parser("svn-demo", parents=[shared], help="power-iteration keys against the SVD oracle")
    p.add_argument("--channels", type=_positive, default=32)

    p = sub.add_parser("bench", parents=[shared], help="wall-clock timings")
    p.add_argument("--reps", type=int, default=10)

    p = sub.add_parser("train", parents=[shared], help="train on the synthetic toy set")
    p.add_argument("--iters", type=_positive, default=2000)
    p.add_argument("--batch-size", type=_positive, default=8)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", type=Path, default=None, metavar="CKPT")
    p.add_argument("--train-size", type=_positive, default=512)

    p = sub.add_parser("eval", parents=[shared], help="per-class IoU of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val"], default="val")

    p = sub.add_parser("infer", parents=[shared], help="label map for one PPM image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)

    p = sub.add_parser("gen-data", parents=[shared], help="export the synthetic set as PPM/PGM")
    p.add_argument("--train-size", type=_positive, default=512)
    p.add_argument("--val-size", type=_positive, default=64)
    p.add_argument("--num-classes", type=int, default=TOY_CLASSES)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _spec_from_args(args, default_model: str, num_classes: int) -> NetworkSpec:
    spec = model_spec(args.model or default_model, num_classes=num_classes)
    if args.grids is not None or args.power_iters is not None:
        if spec.svn is None:
            raise UsageError("--grids/--power-iters need model B or C")
        svn = spec.svn
        if args.grids is not None:
            svn = replace(svn, scales=args.grids)
        if args.power_iters is not None:
            svn = replace(svn, power_iters=args.power_iters)
        spec = replace(spec, svn=svn)
    return spec


def _check_size(size: tuple, factor: int = 8) -> tuple:
    h, w = size
    if h % factor or w % factor:
        raise UsageError(f"size {h}x{w} is not divisible by {factor}")
    return size


def _delta(value: float, ref: float) -> str:
    return f"{100.0 * (value - ref) / ref:+.1f}%"


def _load_checked(path: Path, args) -> tuple:
    from .checkpoint import load_into

    manifest, tensors = read_checkpoint(path)
    try:
        spec = NetworkSpec.from_dict(manifest["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable network spec") from exc
    if spec.hash() != manifest.get("spec_hash"):
        raise CheckpointError(f"{path}: manifest spec does not match its recorded hash")
    if args.model is not None:
        wanted = _spec_from_args(args, args.model, spec.num_classes)
        if wanted.hash() != spec.hash():
            raise CheckpointError(
                f"{path}: checkpoint holds spec {spec.hash()} (model {spec.variant}), "
                f"requested {wanted.hash()} (model {wanted.variant})")
    net = build_lrnnet(spec, seed=0, dtype=np.float32)
    load_into(net, manifest, tensors)
    return net, manifest, tensors


def _synth_from_meta(manifest: dict, args, num_classes: int):
    from .train import SynthConfig

    data = manifest.get("meta", {}).get("data")
    if data is not None:
        return SynthConfig(**data)
    return SynthConfig(num_classes=num_classes, seed=args.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_audit(args) -> int:
    from .cost import count_flops, count_params

    size = _check_size(args.size or (512, 1024))
    spec = _spec_from_args(args, "C", 19)
    net = build_lrnnet(spec, seed=args.seed)
    params = count_params(net).total_params
    report = count_flops(net, (1, 3) + size, args.convention)
    ref_p, ref_g = REFERENCE[spec.variant]
    at_reference = size == (512, 1024)
    print(f"model {spec.variant}  input 3x{size[0]}x{size[1]}  spec {spec.hash()}")
    print(f"classifier width {spec.classifier_width}  num classes {spec.num_classes}  "
          f"stage-3 dilations {','.join(map(str, spec.stage3_dilations))}")
    if spec.svn is not None:
        print(f"svn grids {','.join(map(str, spec.svn.scales))}  power iterations {spec.svn.power_iters}  "
              f"bottleneck {spec.svn.bottleneck_channels}")
    print(f"params   {params}  ({params / 1e6:.3f}M)  reference {ref_p:.2f}M  delta {_delta(params / 1e6, ref_p)}")
    deltas = {}
    for conv in ("macs", "flops2x"):
        g = report.total(conv) / 1e9
        line = f"{conv:<8} {g:.3f}G"
        if at_reference:
            deltas[conv] = abs(g - ref_g) / ref_g
            line += f"  reference {ref_g:.2f}G  delta {_delta(g, ref_g)}"
        print(line)
    print(f"conv-only macs {report.conv_macs / 1e9:.3f}G  overhead ops {report.row('overhead').macs / 1e9:.3f}G")
    if deltas:
        print(f"closer convention: {min(deltas, key=deltas.get)}")
    print(f"reported convention: {report.convention}  total {report.total() / 1e9:.3f}G")
    if args.out is not None:
        report.write_csv(args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def _region_cosines(f: np.ndarray, bank: np.ndarray, grids: tuple) -> np.ndarray:
    from .svn import partition_regions, svd_oracle, _pad_to_grid

    cos, col = [], 0
    for g in grids:
        for region in partition_regions(_pad_to_grid(f[None], g)[0], g):
            u = svd_oracle(region).u[:, 0]
            k = bank[:, col]
            denom = np.linalg.norm(u) * np.linalg.norm(k)
            cos.append(abs(u @ k) / denom if denom > 0 else 0.0)
            col += 1
    return np.array(cos)


def _attention_lines(c: int, n: int, iters: int) -> list:
    from .cost import attention_flops, standard_nonlocal_macs

    single = attention_flops(c, n, 64, iters, 1)
    multi = attention_flops(c, n, 80, iters, 2)
    figures = [
        ("standard non-local", standard_nonlocal_macs(c, n, n), "standard"),
        ("attention 8x8 (S=64)", single["attention_macs"], "single"),
        ("attention 8x8+4x4 (S=80)", multi["attention_macs"], "multi"),
        ("power iteration 8x8", single["power_iter_macs"], "power_single"),
        ("power iteration 8x8+4x4", multi["power_iter_macs"], "power_multi"),
    ]
    lines = []
    for label, macs, key in figures:
        ref = ATTENTION_REFERENCE[key]
        lines.append(f"  {label:<26} macs {macs:>13,d} ({_delta(macs, ref)})  "
                     f"flops2x {2 * macs:>13,d} ({_delta(2 * macs, ref)})  reference {ref:,.0f}")
    return lines


def cmd_svn_demo(args) -> int:
    from .cost import bench_latency
    from .svn import SVNConfig, extract_keys, reduced_nonlocal, standard_nonlocal

    h, w = args.size or (64, 128)
    grids = args.grids or parse_grid_arg("8x8")
    iters = args.power_iters or 2
    c = args.channels
    cfg = SVNConfig(bottleneck_channels=c, scales=grids, power_iters=iters)
    rng = np.random.default_rng(args.seed)
    f = rng.random((c, h, w))
    bank = extract_keys(f, cfg)
    cos = _region_cosines(f, bank, grids)
    print(f"feature block {c}x{h}x{w}  grids {','.join(map(str, grids))}  T={iters}  keys {bank.shape[1]}")
    print(f"|cosine| vs SVD oracle over {cos.size} regions: min {cos.min():.6f}  "
          f"median {np.median(cos):.6f}  below 0.99: {int((cos < 0.99).sum())}")

    q = f.reshape(c, h * w)
    reduced = reduced_nonlocal(q, bank)
    print(f"reduced output rank {np.linalg.matrix_rank(reduced)} (keys {bank.shape[1]})")
    chunk = 1024
    standard = np.concatenate([standard_nonlocal(q[:, s:s + chunk], q, q, "mean")
                               for s in range(0, h * w, chunk)], axis=1)
    cos_out = float(np.sum(reduced * standard) / (np.linalg.norm(reduced) * np.linalg.norm(standard)))
    print(f"cosine(reduced, standard mean-normalised) {cos_out:.4f}")

    print(f"analytic cost for a {c}x{h}x{w} map (declared convention: macs)")
    for line in _attention_lines(c, h * w, iters):
        print(line)

    r = bench_latency(lambda: reduced_nonlocal(q, bank), reps=10, threads=args.threads)
    s = bench_latency(lambda: [standard_nonlocal(q[:, i:i + chunk], q, q, "mean")
                               for i in range(0, h * w, chunk)], reps=10, threads=args.threads)
    print(f"median time reduced {r.median * 1e3:.2f} ms  standard {s.median * 1e3:.1f} ms  "
          f"speed-up {s.median / r.median:.0f}x  (threads {args.threads})")
    if args.out is not None:
        with open(args.out, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["region", "abs_cosine"])
            for i, v in enumerate(cos):
                wr.writerow([i, repr(float(v))])
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .cost import bench_latency
    from .svn import SVNConfig, extract_keys, reduced_nonlocal, standard_nonlocal
    from .tensor import Tensor

    size = _check_size(args.size or (256, 512))
    spec = _spec_from_args(args, "A", 19)
    net = build_lrnnet(spec, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = Tensor(rng.random((1, 3) + size, dtype=np.float32))
    f = rng.random((32, 64 * 128))
    bank = extract_keys(f.reshape(32, 64, 128), SVNConfig())
    cases = [
        (f"model {spec.variant} forward 3x{size[0]}x{size[1]}", lambda: net.forward(x, training=False)),
        ("reduced non-local 32x8192 S=64", lambda: reduced_nonlocal(f, bank)),
        ("standard non-local 32x8192", lambda: [standard_nonlocal(f[:, i:i + 1024], f, f, "mean")
                                                for i in range(0, f.shape[1], 1024)]),
    ]
    rows = []
    for name, fn in cases:
        r = bench_latency(fn, reps=args.reps, threads=args.threads)
        rows.append((name, r))
        print(f"{name:<36} median {r.median * 1e3:9.2f} ms  mean {r.mean * 1e3:9.2f} ms  "
              f"p95 {r.p95 * 1e3:9.2f} ms")
    print(f"reduced vs standard speed-up {rows[2][1].median / rows[1][1].median:.0f}x  threads {args.threads}")
    if args.out is not None:
        with open(args.out, "w", newline="") as fh:
            fh.write(f"# {datetime.datetime.now().isoformat(timespec='seconds')}\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["case", "reps", "threads", "median_s", "mean_s", "p95_s"])
            for name, r in rows:
                wr.writerow([name, r.reps, r.threads, r.median, r.mean, r.p95])
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import load_into
    from .train import (SynthConfig, TrainConfig, evaluate_miou, gen_synthetic_dataset,
                        load_train_state, save_train_checkpoint, train)

    out = args.out or Path("run")
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume is not None:
        manifest, tensors = read_checkpoint(args.resume)
        meta = manifest.get("meta", {})
        if "train" not in meta or "data" not in meta:
            raise CheckpointError(f"{args.resume}: not a training checkpoint")
        spec = NetworkSpec.from_dict(manifest["spec"])
        if args.model is not None and _spec_from_args(args, args.model, spec.num_classes).hash() != spec.hash():
            raise CheckpointError(f"{args.resume}: spec hash differs from --model {args.model}")
        cfg = TrainConfig(**meta["train"])
        data_cfg = SynthConfig(**meta["data"])
        net = build_lrnnet(spec, seed=cfg.seed)
        load_into(net, manifest, tensors)
        state = load_train_state(manifest, tensors)
    else:
        h, w = _check_size(args.size or (64, 128))
        data_cfg = SynthConfig(height=h, width=w, num_classes=TOY_CLASSES, seed=args.seed,
                               train_size=args.train_size)
        spec = _spec_from_args(args, "C", TOY_CLASSES)
        cfg = TrainConfig(max_iters=args.iters, batch_size=args.batch_size, seed=args.seed,
                          threads=args.threads, checkpoint_every=args.checkpoint_every)
        net = build_lrnnet(spec, seed=args.seed)
    ds = gen_synthetic_dataset(data_cfg)
    history, state = train(net, ds.train, cfg, state=state, checkpoint_dir=out, data=data_cfg)
    stamp = datetime.datetime.now().isoformat(timespec="seconds")
    history.write_csv(out / "train_log.csv", comment=f"written {stamp}")
    save_train_checkpoint(out / "final.ckpt", net, state, cfg, data_cfg)
    losses = history.losses
    if losses.size:
        print(f"model {spec.variant}  iterations {history.rows[0][0]}..{history.rows[-1][0]}  "
              f"loss {losses[0]:.4f} -> {losses[-1]:.4f}  ({history.seconds:.0f} s)")
    res = evaluate_miou(net, ds.train)
    print(f"train pixel accuracy {res.pixel_accuracy:.4f}  mIoU {res.miou:.4f}")
    print(f"wrote {out / 'train_log.csv'} and {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate_miou, gen_synthetic_dataset

    net, manifest, _ = _load_checked(args.checkpoint, args)
    data_cfg = _synth_from_meta(manifest, args, net.spec.num_classes)
    if data_cfg.num_classes != net.spec.num_classes:
        raise CheckpointError(f"{args.checkpoint}: dataset has {data_cfg.num_classes} classes, "
                              f"network {net.spec.num_classes}")
    ds = gen_synthetic_dataset(data_cfg)
    res = evaluate_miou(net, ds.train if args.split == "train" else ds.val)
    rows = [(str(k), res.iou[k]) for k in range(len(res.iou))]
    print(f"{'class':>6}  {'IoU':>8}")
    for name, v in rows:
        print(f"{name:>6}  {'absent' if np.isnan(v) else f'{v:8.4f}':>8}")
    print(f"{'mean':>6}  {res.miou:8.4f}")
    print(f"pixel accuracy {res.pixel_accuracy:.4f}  split {args.split}")
    if args.out is not None:
        with open(args.out, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["class", "iou"])
            for name, v in rows + [("mean", res.miou)]:
                wr.writerow([name, repr(float(v))])
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .imageio import read_ppm, write_pgm
    from .train import predict

    net, _, _ = _load_checked(args.checkpoint, args)
    image = read_ppm(args.input)
    factor = net.spec.downsample_factor
    if image.shape[1] % factor or image.shape[2] % factor:
        raise UsageError(f"image {image.shape[1]}x{image.shape[2]} is not divisible by {factor}")
    labels = predict(net, image[None])[0]
    out = args.out or args.input.with_suffix(".labels.pgm")
    write_pgm(out, labels)
    counts = np.bincount(labels.ravel(), minlength=net.spec.num_classes)
    print(f"labels per class {counts.tolist()}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .train import SynthConfig, export_dataset, gen_synthetic_dataset

    h, w = args.size or (64, 128)
    cfg = SynthConfig(height=h, width=w, num_classes=args.num_classes, seed=args.seed,
                      train_size=args.train_size, val_size=args.val_size)
    data = gen_synthetic_dataset(cfg)
    out = args.out or Path("synth")
    export_dataset(data.train, out / "train")
    export_dataset(data.val, out / "val")
    print(f"wrote {len(data.train)} train and {len(data.val)} val pairs to {out}")
    return EXIT_OK


COMMANDS = {"audit": cmd_audit, "svn-demo": cmd_svn_demo, "bench": cmd_bench, "train": cmd_train,
            "eval": cmd_eval, "infer": cmd_infer, "gen-data": cmd_gen_data}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s:%(name)s:%(message)s")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError, DimensionError, DataError) as exc:
        print(f"lrnnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"lrnnet {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"lrnnet {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"lrnnet {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
