"""``evmlp`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
inconsistent inputs, divergence), 3 internal invariant violation. Output
files are staged in memory and written only once a command has succeeded.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from evmlp.cost import SequenceReport, aggregate_sequence, analytic_macs
from evmlp.errors import EvmlpError
from evmlp.events import EventStream, build_cascade, diff_map, full_frame_stats, threshold_events
from evmlp.media import (
    DirectorySource,
    FrameSource,
    RawStreamSource,
    decode_image,
    encode_png,
    encode_weights,
    load_config,
    load_weights,
    overlay_image,
    shipped_config_path,
    to_network_frame,
)
from evmlp.model import (
    Network,
    NetworkConfig,
    StageConfig,
    build_network,
    config_param_count,
    default_threads,
    network_forward,
)
from evmlp.train import TrainConfig, TrainingDiverged, gradcheck, make_toy_dataset, tiny_config, train_toy

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Outputs:
    """Files to write after the command body returns successfully."""

    def __init__(self):
        self.files: dict[Path, bytes] = {}

    def add(self, path: str | Path, data: bytes | str) -> None:
        self.files[Path(path)] = data.encode() if isinstance(data, str) else data

    def commit(self) -> None:
        for path, data in self.files.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".part")
            tmp.write_bytes(data)
            os.replace(tmp, path)


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _parse_taus(text: str) -> list[float]:
    try:
        taus = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"cannot parse thresholds {text!r}")
    if not taus:
        raise UsageError("no thresholds given")
    if any(t < 0 or not math.isfinite(t) for t in taus):
        raise UsageError("thresholds must be finite and nonnegative")
    return taus


def _config(args) -> NetworkConfig:
    return load_config(args.config or shipped_config_path())


def _network(args, config: NetworkConfig) -> Network:
    if args.weights:
        return load_weights(args.weights, config)
    return build_network(config, args.seed)


def _threads(args) -> int:
    return args.threads if args.threads else default_threads()


def _source(args, config: NetworkConfig) -> FrameSource:
    if args.frames and args.raw:
        raise UsageError("--frames and --raw are mutually exclusive")
    if args.raw:
        if not args.width or not args.height:
            raise UsageError("--raw needs --width and --height")
        src: FrameSource = RawStreamSource(args.raw, args.width, args.height, config.input_side, config.input_channels)
    elif args.frames:
        src = DirectorySource(args.frames, config.input_side, config.input_channels)
    else:
        raise UsageError("one of --frames or --raw is required")
    if len(src) == 0:
        raise EvmlpError(f"frame source {args.frames or args.raw} holds no frames")
    return src


def run_sequence(net: Network, frames, tau: float | None, threads: int = 1):
    """Per-frame stats; ``tau=None`` is the full-recompute baseline."""
    if tau is None:
        return [full_frame_stats(net, f, threads) for f in frames]
    stream = EventStream(net, tau, threads)
    return [stream.push(f) for f in frames]


def sequence_report(net: Network, frames, tau: float | None, threads: int = 1, ground_truth=None) -> SequenceReport:
    stats = run_sequence(net, frames, tau, threads)
    return aggregate_sequence(stats, analytic_macs(net.config), ground_truth, net.config.name, tau)


def _fmt_opt(x, spec=".4f") -> str:
    return "n/a" if x is None else format(x, spec)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_classify(args, out: _Outputs) -> None:
    config = _config(args)
    net = _network(args, config)
    path = Path(args.image)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise EvmlpError(f"{path}: cannot read ({exc})") from exc
    image = to_network_frame(decode_image(data, str(path)), config.input_side, config.input_channels)
    logits = network_forward(net, image, "inference", None, _threads(args))
    k = max(1, min(args.topk, logits.size))
    order = np.argsort(-logits, kind="stable")[:k]
    for idx in order:
        print(f"{int(idx)}\t{float(logits[idx]):.6f}")


def cmd_video(args, out: _Outputs) -> None:
    config = _config(args)
    net = _network(args, config)
    if args.tau < 0:
        raise UsageError("--tau must be nonnegative")
    source = _source(args, config)
    gt = None
    if args.ground_truth:
        gt_report = SequenceReport.read(args.ground_truth)
        gt = gt_report.top1()
    tau = None if args.no_events else args.tau
    report = sequence_report(net, source, tau, _threads(args), gt)
    if args.report:
        out.add(args.report, json.dumps(report.to_dict(), indent=2) + "\n")
    mode = "baseline (no events)" if tau is None else f"tau={tau:g}"
    print(f"{config.name}: {report.frames} frames, {mode}")
    print(f"  init frame MACs      {report.init_macs}")
    print(f"  mean MACs/frame      {_fmt_opt(report.mean_macs_per_frame, '.1f')} (excluding init frame)")
    print(f"  baseline MACs/frame  {report.baseline_macs_per_frame}")
    print(f"  reduction            {_fmt_opt(report.reduction)}")
    print(f"  match rate           {_fmt_opt(report.match_rate)}")


def sweep_rows(net: Network, frames, taus: Sequence[float], threads: int = 1) -> tuple[list[dict], list[SequenceReport]]:
    frames = list(frames)
    truth = sequence_report(net, frames, 0.0, threads)
    gt = truth.top1()
    rows, reports = [], []
    for tau in taus:
        rep = sequence_report(net, frames, tau, threads, gt)
        reports.append(rep)
        rows.append(
            {
                "tau": tau,
                "mean_macs": rep.mean_macs_per_frame,
                "reduction": rep.reduction,
                "match_rate": rep.match_rate,
            }
        )
    return rows, reports


def cmd_sweep(args, out: _Outputs) -> None:
    config = _config(args)
    net = _network(args, config)
    taus = _parse_taus(args.taus)
    source = _source(args, config)
    rows, reports = sweep_rows(net, source, taus, _threads(args))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["tau", "mean_macs", "reduction", "match_rate"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.csv:
        out.add(args.csv, buf.getvalue())
    if args.report:
        doc = {"config_id": config.name, "rows": rows, "reports": [r.to_dict() for r in reports]}
        out.add(args.report, json.dumps(doc, indent=2) + "\n")
    print(f"{'tau':>8} {'mean_macs':>16} {'reduction':>10} {'match_rate':>10}")
    for r in rows:
        print(
            f"{r['tau']:>8g} {_fmt_opt(r['mean_macs'], '.1f'):>16} "
            f"{_fmt_opt(r['reduction']):>10} {_fmt_opt(r['match_rate']):>10}"
        )


def cmd_macs(args, out: _Outputs) -> None:
    config = _config(args)
    macs = analytic_macs(config)
    params = config_param_count(config)
    if args.json:
        doc = macs.to_dict()
        doc["params"] = {"stages": list(params.stages), "head": params.head, "total": params.total}
        print(json.dumps(doc, indent=2))
        return
    print(f"{'stage':>6} {'patches':>8} {'mixer_macs':>14} {'bottleneck_macs':>16} {'total_macs':>14} {'params':>12}")
    for i, (s, p) in enumerate(zip(macs.stages, params.stages), start=1):
        print(f"{i:>6} {s.patches:>8} {s.mixer:>14} {s.bottleneck:>16} {s.total:>14} {p:>12}")
    print(f"{'head':>6} {1:>8} {'':>14} {'':>16} {macs.head:>14} {params.head:>12}")
    print(f"total MACs   {macs.total} ({macs.total / 1e9:.3f} G)")
    print(f"total params {params.total} ({params.total / 1e6:.2f} M)")


def eventmap_counts(frames: Sequence[np.ndarray], taus: Sequence[float], patch: int):
    """For each consecutive pair and tau, the level-1 event map."""
    stage = (StageConfig(patch, 1.0, 1, 0),)
    maps = []
    for i in range(1, len(frames)):
        d = diff_map(frames[i], frames[i - 1])
        maps.append({tau: build_cascade(threshold_events(d, tau), stage)[0] for tau in taus})
    return maps


def cmd_eventmap(args, out: _Outputs) -> None:
    taus = _parse_taus(args.tau)
    if args.patch < 1 or args.side % args.patch:
        raise UsageError(f"--side {args.side} must be divisible by --patch {args.patch}")
    source = DirectorySource(args.frames, args.side)
    if len(source) < 2:
        raise EvmlpError(f"{args.frames}: need at least 2 frames, found {len(source)}")
    frames = list(source)
    maps = eventmap_counts(frames, taus, args.patch)
    outdir = Path(args.out)
    summary = []
    for i, per_tau in enumerate(maps, start=1):
        for tau, emap in per_tau.items():
            name = f"overlay_{i:05d}_tau{tau:g}.png"
            out.add(outdir / name, encode_png(overlay_image(frames[i], emap)))
            bright = [[int(r), int(c)] for r, c in zip(*np.nonzero(emap))]
            summary.append({"frame": i, "tau": tau, "file": name, "bright_patches": len(bright), "patches": bright})
            print(f"frame {i:5d} tau {tau:<6g} bright patches {len(bright):5d} / {emap.size}")
    out.add(outdir / "eventmap.json", json.dumps({"patch": args.patch, "pairs": summary}, indent=2) + "\n")


def _labeled_directory(path: Path, config: NetworkConfig) -> list[tuple[np.ndarray, int]]:
    if not path.is_dir():
        raise EvmlpError(f"{path}: dataset directory not found")
    data = []
    for cls_dir in sorted(p for p in path.iterdir() if p.is_dir()):
        try:
            label = int(cls_dir.name)
        except ValueError:
            raise EvmlpError(f"{cls_dir}: class directories must be named by integer index")
        src = DirectorySource(cls_dir, config.input_side, config.input_channels)
        data.extend((frame.astype(np.float64), label) for frame in src)
    return data


def cmd_train(args, out: _Outputs) -> None:
    config = load_config(args.config) if args.config else tiny_config()
    if args.dataset and args.toy:
        raise UsageError("--dataset and --toy are mutually exclusive")
    if args.dataset:
        dataset = _labeled_directory(Path(args.dataset), config)
    elif args.toy:
        dataset = make_toy_dataset(args.toy_size, config.input_side, config.input_channels, args.seed)
    else:
        raise UsageError("one of --dataset or --toy is required")
    if not dataset:
        raise EvmlpError("training dataset is empty")
    tcfg = TrainConfig(
        lr=args.lr,
        warmup_epochs=min(args.warmup_epochs, args.epochs),
        epochs=args.epochs,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    net = build_network(config, args.seed, dtype=np.float64)
    lines = []

    def emit(record):
        line = json.dumps(record)
        lines.append(line)
        print(line, flush=True)

    try:
        train_toy(net, dataset, tcfg, emit)
    except TrainingDiverged as exc:
        raise EvmlpError(f"training diverged at epoch {exc.epoch}") from exc
    out.add(args.out_weights, encode_weights(net.named_parameters()))
    if args.log:
        out.add(args.log, "".join(line + "\n" for line in lines))


def cmd_gradcheck(args, out: _Outputs) -> int:
    config = load_config(args.config) if args.config else None
    results = gradcheck(config, args.seed)
    ok = True
    for name, err in results.items():
        passed = err < 1e-4
        ok &= passed
        print(f"{name:<20} max_rel_err {err:.3e}  {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INTERNAL


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evmlp", description="Event-driven patch MLP inference engine")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def net_args(sp):
        sp.add_argument("--config", help="network config JSON (default: shipped evmlp-t1)")
        sp.add_argument("--weights", help="EVMLPWT1 weight file (default: seeded random init)")
        sp.add_argument("--seed", type=int, default=0, help="init seed when --weights is absent")
        sp.add_argument("--threads", type=int, default=None, help="patch worker threads (env EVMLP_THREADS)")

    def frame_args(sp):
        sp.add_argument("--frames", help="directory of PNG/PPM frames, ordered by filename")
        sp.add_argument("--raw", help="headerless interleaved RGB8 stream")
        sp.add_argument("--width", type=int, help="raw stream frame width")
        sp.add_argument("--height", type=int, help="raw stream frame height")

    sp = sub.add_parser("classify", help="top-k classes of one image")
    net_args(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--topk", type=int, default=5)
    sp.set_defaults(func=cmd_classify)

    sp = sub.add_parser("video", help="process a frame sequence and write a cost report")
    net_args(sp)
    frame_args(sp)
    sp.add_argument("--tau", type=float, default=0.0, help="event threshold on [0,1] intensities")
    sp.add_argument("--no-events", action="store_true", help="full recompute of every frame")
    sp.add_argument("--report", help="output JSON report path")
    sp.add_argument("--ground-truth", help="earlier tau=0 report for match rate")
    sp.set_defaults(func=cmd_video)

    sp = sub.add_parser("sweep", help="cost and match rate over several thresholds")
    net_args(sp)
    frame_args(sp)
    sp.add_argument("--taus", default="0,0.05,0.1,0.15")
    sp.add_argument("--csv", help="CSV output (tau,mean_macs,reduction,match_rate)")
    sp.add_argument("--report", help="combined JSON output")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("macs", help="analytic MAC and parameter counts")
    sp.add_argument("--config")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_macs)

    sp = sub.add_parser("eventmap", help="render event-map overlays for consecutive frames")
    sp.add_argument("--frames", required=True)
    sp.add_argument("--tau", default="0", help="threshold or comma-separated list")
    sp.add_argument("--patch", type=int, default=7)
    sp.add_argument("--side", type=int, default=224, help="frames are resized to this side")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_eventmap)

    sp = sub.add_parser("train", help="desk-scale SGD training")
    sp.add_argument("--config", help="network config (default: built-in tiny 8x8 config)")
    sp.add_argument("--dataset", help="directory of class-index subdirectories of images")
    sp.add_argument("--toy", action="store_true", help="use the built-in separable toy dataset")
    sp.add_argument("--toy-size", type=int, default=64, help="toy samples per class")
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--warmup-epochs", type=int, default=1)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--weight-decay", type=float, default=1e-5)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--out-weights", required=True)
    sp.add_argument("--log", help="write the JSON-lines training log here")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    sp.add_argument("--config", help="network config (default: built-in tiny config)")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = _Outputs()
    try:
        code = args.func(args, out)
        code = EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"evmlp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EvmlpError, OSError, ValueError) as exc:
        print(f"evmlp {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"evmlp {args.command}: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL
    if code == EXIT_OK:
        out.commit()
    return code


if __name__ == "__main__":
    sys.exit(main())
