"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 divergence, 4 I/O or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import codec
from ..checkpoint import CheckpointError
from ..datagen import export_scene, import_scene
from ..task import ConvergenceError, predict_labels
from ..trainer import SCHEME_TABLE, DivergenceError, evaluate
from ..vq import IndexMap
from .config import ConfigError, ExperimentConfig, apply_overrides, dump_config, load_config
from .experiment import SWEEP_RS, Workspace, ablation_suite, load_model, run_experiment, sweep_r

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("taskquant")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="flat key = value experiment file")
    parser.add_argument("--seed", type=int, default=d, help="run seed (overrides seeds and seed)")
    parser.add_argument("--out-dir", default=d, help="directory for checkpoints and reports")
    parser.add_argument("--precision", choices=("single", "double"), default=d)
    parser.add_argument("-v", "--verbose", action="store_true", default=d if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskquant", description="task-driven quantized image codec")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text)

    add("gen-data", "export the synthetic corpus as raw scene files")
    add("pretrain-task", "pre-train and freeze the segmenter")

    p = add("train", "train one scheme for every configured seed")
    p.add_argument("--scheme", choices=sorted(SCHEME_TABLE), required=True)
    p.add_argument("--r", type=int)

    p = add("eval", "evaluate a checkpoint on the validation split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scheme", choices=sorted(SCHEME_TABLE), required=True)
    p.add_argument("--r", type=int)

    p = add("sweep", "compression-ratio sweep")
    p.add_argument("--rs", type=lambda s: tuple(int(v) for v in s.split(",")), default=SWEEP_RS)

    add("ablate", "objective ablation suite")

    p = add("encode", "encode a scene into a wire packet")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scheme", choices=sorted(SCHEME_TABLE), required=True)
    p.add_argument("--r", type=int)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="raw scene file written by gen-data")
    src.add_argument("--index", type=int, help="validation scene index")
    p.add_argument("--coder", type=int, choices=(codec.FIXED, codec.HUFFMAN), default=codec.HUFFMAN)
    p.add_argument("--output", required=True)

    p = add("decode", "decode a wire packet into an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scheme", choices=sorted(SCHEME_TABLE), required=True)
    p.add_argument("--packet", required=True)
    p.add_argument("--output", required=True, help="reconstruction as binary PPM")
    p.add_argument("--labels", help="also write the segmenter's labels as binary PGM")

    p = add("inspect-packet", "print a packet's header and payload breakdown")
    p.add_argument("packet")

    add("report", "train or load every configured run and write the report")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    exp, train = {}, {}
    if args.seed is not None:
        exp.update(seed=args.seed, seeds=(args.seed,))
    if args.out_dir is not None:
        exp["out_dir"] = args.out_dir
    if args.precision is not None:
        train["precision"] = args.precision
    if getattr(args, "r", None) is not None:
        exp["rs"] = (args.r,)
    return apply_overrides(cfg, {"experiment": exp, "train": train})


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_data(cfg, args) -> int:
    ws = Workspace(cfg)
    manifest = []
    for split, scenes in (("train", ws.train_scenes), ("val", ws.val_scenes)):
        folder = ws.out / "data" / split
        folder.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(scenes):
            export_scene(s, cfg.dataset.m, folder / f"{i:05d}.gosd")
            manifest.append(f"{split}/{i:05d}.gosd {s.seed} {s.checksum()}")
    (ws.out / "data" / "manifest.txt").write_text("\n".join(manifest) + "\n")
    print(f"wrote {len(manifest)} scenes to {ws.out / 'data'}")
    return EXIT_OK


def cmd_pretrain_task(cfg, args) -> int:
    ws = Workspace(cfg)
    info = ws.segmenter_info()
    info["checkpoint"] = str(ws.segmenter_path())
    (ws.out / "segmenter.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    _emit(info)
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    ws = Workspace(cfg)
    rc = EXIT_OK
    for r in cfg.rs:
        for seed in cfg.seeds:
            tc = cfg.run_config(args.scheme, r, seed)
            rec = ws.record(tc)
            if rec.diverged:
                rc = EXIT_DIVERGED
            elif rec.error:
                raise RuntimeError(rec.error)
            _emit(asdict(rec))
    return rc


def cmd_eval(cfg, args) -> int:
    ws = Workspace(cfg)
    tc = cfg.run_config(args.scheme, cfg.rs[0], cfg.seeds[0])
    ev = evaluate(load_model(args.checkpoint, tc), ws.F, ws.val_scenes, ws.extractor)
    out = asdict(ev)
    out.pop("usage")
    out["kib"] = ev.payload_bytes / 1024.0
    _emit(out)
    return EXIT_OK


def _report_exit(report) -> int:
    print(report_table(report.rows))
    return EXIT_DIVERGED if report.diverged else EXIT_OK


def cmd_sweep(cfg, args) -> int:
    return _report_exit(sweep_r(cfg, args.rs))


def cmd_ablate(cfg, args) -> int:
    report = ablation_suite(cfg)
    for name, value in report.correlations.items():
        print(f"jsd/perceptual curve correlation {name}: {value:.4f}")
    return _report_exit(report)


def cmd_encode(cfg, args) -> int:
    tc = cfg.run_config(args.scheme, cfg.rs[0], cfg.seeds[0])
    model = load_model(args.checkpoint, tc)
    if args.scene:
        rgb, _, _ = import_scene(args.scene)
        image = rgb.astype(np.float64) / 255.0
    else:
        ws = Workspace(cfg)
        if not 0 <= args.index < len(ws.val_scenes):
            raise ConfigError(f"--index {args.index} outside the {len(ws.val_scenes)} validation scenes")
        image = ws.val_scenes[args.index].image
    H, W = image.shape[:2]
    idx = model.encode_indices(image[None])
    meta = codec.PacketMeta(H, W, model.r, model.codebook.K)
    blob = codec.encode_packet(idx.indices[0], meta, args.coder)
    Path(args.output).write_bytes(blob)
    _emit(asdict(codec.payload(blob)))
    return EXIT_OK


def _write_pnm(path: str, arr: np.ndarray) -> None:
    if arr.ndim == 3:
        head = f"P6 {arr.shape[1]} {arr.shape[0]} 255\n"
    else:
        head = f"P5 {arr.shape[1]} {arr.shape[0]} 255\n"
    Path(path).write_bytes(head.encode() + np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def cmd_decode(cfg, args) -> int:
    blob = Path(args.packet).read_bytes()
    indices, meta = codec.decode_packet(blob)
    tc = cfg.run_config(args.scheme, meta.r, cfg.seeds[0])
    model = load_model(args.checkpoint, tc)
    if model.codebook.K != meta.K:
        raise codec.PacketError(f"packet K={meta.K} but checkpoint codebook has {model.codebook.K}")
    x_hat = model.decode_indices(IndexMap(indices[None], meta.K))[0]
    _write_pnm(args.output, np.round(np.clip(x_hat, 0, 1) * 255))
    if args.labels:
        ws = Workspace(cfg)
        labels = predict_labels(ws.F, x_hat[None])[0]
        _write_pnm(args.labels, labels)
    print(f"decoded {meta.H}x{meta.W} image to {args.output}")
    return EXIT_OK


def cmd_inspect(cfg, args) -> int:
    blob = Path(args.packet).read_bytes()
    indices, meta = codec.decode_packet(blob)
    rep = codec.payload(blob)
    coder = blob[12]
    counts = np.bincount(indices.ravel(), minlength=meta.K)
    _emit({**asdict(meta), "coder_id": int(coder), "symbol_count": int(indices.size),
           **asdict(rep), "kib": rep.kib, "distinct_symbols": int(np.count_nonzero(counts))})
    return EXIT_OK


def report_table(rows) -> str:
    cols = ("scheme", "r", "K", "params_count", "payload_bytes", "kib", "miou", "miou_std",
            "accuracy", "mse", "perceptual", "n_diverged")
    body = [[_short(getattr(r, c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def _short(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}" if abs(v) < 1 else f"{v:.2f}"
    return "" if v is None else str(v)


def cmd_report(cfg, args) -> int:
    return _report_exit(run_experiment(cfg))


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain-task": cmd_pretrain_task, "train": cmd_train, "eval": cmd_eval,
    "sweep": cmd_sweep, "ablate": cmd_ablate, "encode": cmd_encode, "decode": cmd_decode,
    "inspect-packet": cmd_inspect, "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        if args.command != "inspect-packet":
            (Path(cfg.out_dir) / "config.txt").write_text(dump_config(cfg))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, ConvergenceError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, codec.PacketError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
