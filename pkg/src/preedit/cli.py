"""Command-line entry point: ``preedit {ingest,train,evaluate,edit-compress,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import codec, corpus, report
from . import params as param_io
from .editors import Cascade, IdentityEditor, Smoother, SpatialTransformer, load_editor
from .entropy import EntropyModel
from .optim import TrainingDivergence
from .proxy import psnr
from .train import TrainConfig, closest_fewer_bits, edit_image, evaluate, train_stage

log = logging.getLogger("preedit")


class CliError(Exception):
    """Reported as a one-line JSON object on stderr with exit status 1."""

    def __init__(self, kind: str, message: str, **extra):
        super().__init__(message)
        self.payload = {"error": kind, "message": message, **extra}


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what}_not_found", f"{what} not found: {p}", path=str(p))
    return p


def _load_editor_arg(path):
    p = _require_file(path, "checkpoint")
    try:
        return load_editor(p)
    except param_io.ParamFileError as exc:
        raise CliError("bad_checkpoint", str(exc), path=str(p)) from exc


def _load_entropy_arg(path):
    p = _require_file(path, "entropy_model")
    try:
        return EntropyModel.load(p)
    except param_io.ParamFileError as exc:
        raise CliError("bad_entropy_model", str(exc), path=str(p)) from exc


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    manifest = corpus.ingest(args.corpus, args.run, args.patch_size, args.patches_per_image, args.seed)
    counts = {s: sum(e.patches for e in manifest.split(s)) for s in ("train", "test")}
    print(json.dumps({"sources": len(manifest.sources), "skipped": len(manifest.skipped), "patches": counts,
                      "manifest_sha256": manifest.digest()}))
    return 0


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        values.update(json.loads(_require_file(args.config, "config").read_text(encoding="utf-8")))
    stage = args.stage or values.pop("stage", None)
    values.pop("stage", None)
    if stage is None:
        raise CliError("bad_config", "no stage given (use --stage or the config file)")
    flags = {
        "steps": args.steps,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "q_range": tuple(args.q_range) if args.q_range else None,
        "lam": args.lam,
        "mu": args.mu,
        "distance": args.distance,
        "seed": args.seed,
        "checkpoint_interval": args.checkpoint_interval,
        "freeze_entropy": True if args.freeze_entropy else None,
    }
    values.update({k: v for k, v in flags.items() if v is not None})  # flags win
    try:
        return TrainConfig.for_stage(stage, **values)
    except (TypeError, ValueError) as exc:
        raise CliError("bad_config", str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _train_config(args)
    run = Path(args.run)
    patches = corpus.load_patches(run, "train")
    entropy = _load_entropy_arg(args.entropy) if args.entropy else None
    editor = None
    if cfg.stage == "cascade":
        smoother = _load_editor_arg(args.smoother) if args.smoother else Smoother(cfg.seed)
        stn = _load_editor_arg(args.stn) if args.stn else SpatialTransformer(cfg.seed + 1)
        if not isinstance(smoother, Smoother) or not isinstance(stn, SpatialTransformer):
            raise CliError("bad_checkpoint", "--smoother / --stn must point at smoother and stn parameter files")
        editor = Cascade(smoother, stn)
    elif args.init:
        editor = _load_editor_arg(args.init)
    elif cfg.stage == "smoother":
        editor = Smoother(cfg.seed)
    elif cfg.stage == "stn":
        editor = SpatialTransformer(cfg.seed)
    out = Path(args.out) if args.out else run / f"{cfg.stage}.params"
    try:
        result = train_stage(
            cfg,
            patches,
            editor=editor,
            entropy=entropy,
            log_path=run / "logs" / f"{cfg.stage}.jsonl",
            checkpoint_dir=run / "checkpoints" / cfg.stage,
            resume=_require_file(args.resume, "checkpoint") if args.resume else None,
        )
    except TrainingDivergence as exc:
        raise CliError("training_diverged", str(exc)) from exc
    meta = {"train_config": cfg.to_dict()}
    if cfg.stage == "entropy":
        result.entropy.save(out, meta)
    else:
        result.editor.save(out, meta)
        if not cfg.freeze_entropy:
            result.entropy.save(out.with_suffix(".entropy.params"), meta)
    last = result.log[-1] if result.log else {}
    print(json.dumps({"stage": cfg.stage, "steps": cfg.steps, "output": str(out), "final_loss": last.get("loss")}))
    return 0


def _evaluation_images(args):
    if args.images:
        paths = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() == ".png")
        return [corpus.read_png(p) for p in paths], [p.stem for p in paths]
    patches = corpus.load_patches(args.run, "test")
    return list(patches), [f"test{i:04d}" for i in range(len(patches))]


def cmd_evaluate(args) -> int:
    entropy = _load_entropy_arg(args.entropy) if args.entropy else None
    editors = {}
    for spec in args.editor or []:
        if "=" not in spec:
            raise CliError("bad_argument", f"--editor expects METHOD=PATH, got {spec!r}")
        method, path = spec.split("=", 1)
        if method not in report.METHODS or method == "baseline":
            raise CliError("bad_argument", f"unknown method {method!r}")
        editors[method] = _load_editor_arg(path)
    images, ids = _evaluation_images(args)
    if not images:
        raise CliError("no_images", "no evaluation images found")
    rows = evaluate(editors, entropy, images, args.q, ids)
    out = Path(args.run) / report.ROWS_FILE
    report.write_rows(out, rows)
    print(json.dumps({"rows": len(rows), "output": str(out)}))
    return 0


def cmd_edit_compress(args) -> int:
    editor = _load_editor_arg(args.editor) if args.editor else IdentityEditor()
    src = _require_file(args.input, "input")
    original = corpus.read_png(src).astype(np.float64) / 255.0
    edited = edit_image(editor, original, args.q)
    edited8 = np.floor(edited * 255.0 + 0.5) / 255.0  # what the PNG stores
    if args.target_bpp is not None:
        q = closest_fewer_bits(edited8, args.target_bpp, args.q)
    else:
        q = args.q
    bs = codec.encode(edited8, q)
    corpus.write_png(args.out_png, edited8)
    bs.save(args.out_jpg)
    h, w = original.shape[1:]
    stats = {
        "input": str(src),
        "q": q,
        "bytes": len(bs.data),
        "bpp": 8 * len(bs.data) / (h * w),
        "psnr": psnr(codec.decode(bs), original),
    }
    print(json.dumps(stats))
    return 0


def cmd_report(args) -> int:
    try:
        rep = report.emit_report(args.run)
    except FileNotFoundError as exc:
        raise CliError("incomplete_run", str(exc), run=str(args.run)) from exc
    print(json.dumps({"rows": len(rep["rows"]), "correlation": report._json_safe(rep["correlation"]),
                      "outputs": [report.REPORT_CSV, report.REPORT_JSON]}))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="preedit", description="Train and apply JPEG pre-editing networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="extract training patches from a directory of PNGs")
    p.add_argument("corpus", help="directory of lossless PNG images")
    p.add_argument("run", help="run directory to create or update")
    p.add_argument("--patch-size", type=int, default=96)
    p.add_argument("--patches-per-image", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one stage (entropy, smoother, stn, cascade)")
    p.add_argument("run", help="run directory holding ingested patches")
    p.add_argument("--stage", choices=("entropy", "smoother", "stn", "cascade"))
    p.add_argument("--config", help="JSON file with training settings; flags override it")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--q-range", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--lam", type=float, help="quality (total variation) weight")
    p.add_argument("--mu", type=float, help="rate weight")
    p.add_argument("--distance", choices=("l2", "identity", "pyramid"))
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--freeze-entropy", action="store_true")
    p.add_argument("--entropy", help="fitted entropy model to start from")
    p.add_argument("--init", help="editor parameters to start from")
    p.add_argument("--smoother", help="cascade: trained smoother parameters")
    p.add_argument("--stn", help="cascade: trained stn parameters")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", help="output parameter file (default RUN/STAGE.params)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rate-distortion evaluation against plain JPEG")
    p.add_argument("run")
    p.add_argument("--entropy", help="entropy model for estimated bit-rates")
    p.add_argument("--editor", action="append", metavar="METHOD=PATH", help="editor to evaluate (repeatable)")
    p.add_argument("--q", type=int, nargs="+", default=[10, 15, 20])
    p.add_argument("--images", help="directory of PNGs (default: the run's test patches)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("edit-compress", help="edit one PNG and write it plus its JPEG")
    p.add_argument("input")
    p.add_argument("--editor", help="editor parameter file (default: identity)")
    p.add_argument("--q", type=int, default=20, help="quality factor (also the editor's conditioning)")
    p.add_argument("--target-bpp", type=float, help="pick q by the closest-fewer-bits rule instead")
    p.add_argument("--out-png", required=True)
    p.add_argument("--out-jpg", required=True)
    p.set_defaults(func=cmd_edit_compress)

    p = sub.add_parser("report", help="write report.csv and report.json from an evaluated run")
    p.add_argument("run")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(json.dumps(exc.payload), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": "not_found", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
