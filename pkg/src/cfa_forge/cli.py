"""Command-line entry point: ``cfa-forge {dataset,train,eval,cfa,synth}``.

Exit codes: 0 success, 2 usage or bad input, 3 numeric divergence, 4 I/O failure.
Every produced artifact gets a ``<artifact>.manifest.json`` written next to it.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import subprocess
import sys
import time
from contextlib import nullcontext
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .cfa import render_mask
from .data import build_dataset, encode_png, encode_ppm, load_dataset
from .errors import CfaForgeError, CheckpointError, DivergenceError
from .io import atomic_write_bytes, atomic_write_json
from .metrics import evaluate
from .training import TrainConfig, load_checkpoint, model_from_checkpoint, run_metadata, save_checkpoint, train

log = logging.getLogger("cfa_forge")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "CFA_FORGE_THREADS"


class InputError(Exception):
    """Bad user input detected by the CLI itself."""


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return f"cfa-forge {__version__}"
    desc = out.stdout.strip()
    return f"cfa-forge {__version__} ({desc})" if out.returncode == 0 and desc else f"cfa-forge {__version__}"


class Manifest:
    """Collects run facts and writes ``<artifact>.manifest.json`` atomically."""

    def __init__(self, argv, command):
        self.argv = list(argv)
        self.command = command
        self.started = time.time()

    def write(self, artifact, config=None, seed=None, inputs=None, extra=None):
        artifact = Path(artifact)
        doc = {
            "command_line": ["cfa-forge", *self.argv],
            "command": self.command,
            "config": config or {},
            "seed": seed,
            "artifact": str(artifact),
            "inputs": {k: str(v) for k, v in (inputs or {}).items()},
            "started_at": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
            "wall_clock_s": round(time.time() - self.started, 3),
            "version": _git_describe(),
        }
        doc.update(extra or {})
        path = artifact.with_name(artifact.name + ".manifest.json")
        atomic_write_json(path, doc)
        return path


def _file_id(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _require_file(path, what):
    if not Path(path).is_file():
        raise InputError(f"{what} {path} does not exist")


# -- commands ---------------------------------------------------------------------

def cmd_dataset_build(args, manifest):
    if not Path(args.images).is_dir():
        raise InputError(f"image directory {args.images} does not exist")
    ds = build_dataset(args.images, args.patch, seed=args.seed, out=args.out)
    manifest.write(args.out, {"patch_n": args.patch}, args.seed, {"images": args.images},
                   {"count": ds.count, "skipped": ds.skipped})
    print(f"wrote {ds.count} patches to {args.out}" + (f" ({len(ds.skipped)} files skipped)" if ds.skipped else ""))


def _train_config(args, patch_n):
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch, seed=args.seed, cfa_kind=args.cfa,
        cfa_size=args.cfa_size, color_config=args.config, patch_n=patch_n, lr_start=args.lr_start,
        lr_end=args.lr_end, l2_coeff=args.l2, softmax_growth=args.softmax_growth, val_fraction=args.val_fraction,
        lr_decay_epochs=args.lr_decay_epochs,
    )


def cmd_train(args, manifest):
    _require_file(args.dataset, "dataset")
    ds = load_dataset(args.dataset)
    cfg = _train_config(args, ds.n)
    out = Path(args.out)
    inputs = {"dataset": args.dataset}

    def on_epoch(rec, trainer):
        print(rec.progress_line(), flush=True)
        if args.save_every and rec.epoch % args.save_every == 0:
            path = out.with_name(f"{out.name}.epoch{rec.epoch}")
            save_checkpoint(path, trainer.checkpoint())
            manifest.write(path, cfg.to_dict(), cfg.seed, inputs, {"epoch": rec.epoch})

    result = train(ds, cfg, callbacks=[on_epoch])
    save_checkpoint(out, result.checkpoint)
    manifest.write(out, cfg.to_dict(), cfg.seed, inputs, {
        "epoch": result.checkpoint.epoch,
        "progress": [r.progress_line() for r in result.history],
        "cfa_pattern": result.checkpoint.extra.get("cfa_pattern", ""),
    })


def cmd_eval(args, manifest):
    _require_file(args.ckpt, "checkpoint")
    if not Path(args.images).is_dir():
        raise InputError(f"image directory {args.images} does not exist")
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    meta = run_metadata(ckpt.config)
    meta["checkpoint_id"] = _file_id(args.ckpt)
    meta["epoch"] = ckpt.epoch
    report = evaluate(model, args.images, ckpt.config.patch_n, meta, batch=args.batch)
    report.write(args.report)
    manifest.write(args.report, ckpt.config.to_dict(), ckpt.config.seed,
                   {"ckpt": args.ckpt, "images": args.images})
    print(f"mean_psnr={report.mean_psnr:.4f} mean_ssim={report.mean_ssim:.6f} images={len(report.images)}")


def cmd_cfa(args, manifest):
    _require_file(args.ckpt, "checkpoint")
    ckpt = load_checkpoint(args.ckpt)
    mask = model_from_checkpoint(ckpt).cfa.mask()
    if args.action == "export":
        atomic_write_bytes(args.out, mask.to_text().encode())
    else:
        if args.cell_px < 1:
            raise InputError("--cell-px must be positive")
        img = render_mask(mask, args.cell_px)
        data = encode_png(img) if str(args.out).lower().endswith(".png") else encode_ppm(img)
        atomic_write_bytes(args.out, data)
    manifest.write(args.out, ckpt.config.to_dict(), ckpt.config.seed, {"ckpt": args.ckpt},
                   {"action": args.action})


def cmd_synth(args, manifest):
    from .synth import write_corpus

    paths = write_corpus(args.out, args.count, args.height, args.width, seed=args.seed)
    manifest.write(Path(args.out) / "corpus", {"count": args.count, "height": args.height, "width": args.width},
                   args.seed, {}, {"files": [p.name for p in paths]})
    print(f"wrote {len(paths)} images to {args.out}")


# -- parser ---------------------------------------------------------------

def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="cfa-forge", description="Learn and evaluate binary color filter arrays.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="patch dataset tools")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    b = ds_sub.add_parser("build", help="cut images into 3N x 3N patches")
    b.add_argument("--images", required=True, help="directory of PPM (P6) or PNG images")
    b.add_argument("--patch", type=_positive, default=8, help="N; patches are 3N x 3N (default 8)")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_dataset_build)

    t = sub.add_parser("train", help="jointly train a CFA and the demosaicer")
    t.add_argument("--dataset", required=True)
    t.add_argument("--cfa", default="hardmax", help="hardmax | softmax | linear | fixed:NAME | file:PATH")
    t.add_argument("--config", default="rgb", choices=["rgb", "rgbw"])
    t.add_argument("--cfa-size", type=_positive, default=8)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--batch", type=_positive, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--save-every", type=_positive, default=None, help="also write OUT.epochK every K epochs")
    t.add_argument("--lr-start", type=float, default=1e-4)
    t.add_argument("--lr-end", type=float, default=1e-5)
    t.add_argument("--lr-decay-epochs", type=_positive, default=None,
                   help="epochs over which the LR decays to --lr-end (default: --epochs)")
    t.add_argument("--l2", type=float, default=1e-5, help="L2 coefficient on refinement kernels")
    t.add_argument("--softmax-growth", type=float, default=1.2)
    t.add_argument("--val-fraction", type=float, default=0.02)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR/SSIM of stitched full-image reconstructions")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--images", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--batch", type=_positive, default=256)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cfa", help="export or render a checkpoint's CFA")
    c.add_argument("action", choices=["export", "render"])
    c.add_argument("--ckpt", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--cell-px", type=int, default=16)
    c.set_defaults(func=cmd_cfa)

    s = sub.add_parser("synth", help="write a synthetic dead-leaves image corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=_positive, default=64)
    s.add_argument("--height", type=_positive, default=384)
    s.add_argument("--width", type=_positive, default=384)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    manifest = Manifest(argv, args.command)
    try:
        with _thread_limit():
            args.func(args, manifest)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, CfaForgeError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
