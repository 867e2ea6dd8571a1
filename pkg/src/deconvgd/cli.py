"""Command-line interface: synth, train, deconv, eval.

Each command writes its outputs plus a run manifest (command echo, seeds,
paths, build id, wallclock) next to them.  On failure, partially written
outputs are removed and the exit code is nonzero.  Thread count for the
BLAS pool honors the DECONVGD_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tensor
from .degrade import (
    Kernel,
    load_store,
    read_image,
    read_kernel,
    save_store,
    synth_dataset,
    write_image,
    write_kernel,
)
from .infer import StopRule, deconvolve, denoise, write_trace
from .metrics import evaluate_pairs, psnr
from .train import TrainConfig, load_checkpoint, save_checkpoint, train_loop, write_log
from .unit import ablate, init_params

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".bmp")


def _build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"deconvgd-{__version__}"


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    inputs: list[str], outputs: list[str], t0: float) -> None:
    manifest = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "inputs": inputs,
        "outputs": outputs,
        "build_id": _build_id(),
        "wallclock_s": round(time.perf_counter() - t0, 3),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


class _OutputDir:
    """Creates the output directory; removes whatever this run created if
    the command fails, so no partial outputs survive."""

    def __init__(self, path):
        self.path = Path(path)
        self.created = not self.path.exists()

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        self.preexisting = set(p.name for p in self.path.iterdir())
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            return False
        if self.created:
            shutil.rmtree(self.path, ignore_errors=True)
        else:
            for p in self.path.iterdir():
                if p.name not in self.preexisting:
                    if p.is_dir():
                        shutil.rmtree(p, ignore_errors=True)
                    else:
                        p.unlink(missing_ok=True)
        return False


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    truth_dir = Path(args.truth_dir)
    if not truth_dir.is_dir():
        print(f"error: truth-image directory {truth_dir} does not exist", file=sys.stderr)
        return 1
    images = []
    for p in sorted(truth_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            images.append(read_image(p))
        except Exception as e:  # unreadable file: warn and move on
            print(f"warning: skipping unreadable image {p}: {e}", file=sys.stderr)
    if not images:
        print("error: no readable truth images found", file=sys.stderr)
        return 1
    sizes = {int(s) for s in args.sizes.split(",")}
    with _OutputDir(args.out) as out:
        triplets = synth_dataset(
            images, args.kernels_per_image, (args.sigma_lo, args.sigma_hi), sizes, args.seed
        )
        save_store(out, triplets)
        _write_manifest(out, "synth", args, [str(truth_dir)], [str(out)], t0)
    print(f"wrote {len(triplets)} triplets to {args.out}")
    return 0


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    kappa = tuple(float(v) for v in args.kappa.split(","))
    cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch,
        learning_rate=args.lr,
        tau=args.tau,
        kappa=kappa,
        iterations=args.iters,
        seed=args.seed,
        crop=args.crop,
        checkpoint_every=args.checkpoint_every,
    )
    dataset = load_store(args.store)
    params = init_params(cfg.seed)
    dropped = [n for n, off in (("r", args.no_r), ("h", args.no_h), ("d", args.no_d)) if off]
    if dropped:
        params = ablate(params, dropped)
    with _OutputDir(args.out) as out:
        ckpt = out / "model.ckpt"
        params, rows = train_loop(dataset, cfg, params=params, checkpoint_path=ckpt)
        write_log(out / "train_log.csv", rows, cfg.steps)
        _write_manifest(out, "train", args, [str(args.store)], [str(ckpt)], t0)
    last = rows[-1].objective if rows else float("nan")
    print(f"trained {cfg.iterations} iterations; final objective {last:.6g}; checkpoint {ckpt}")
    return 0


def cmd_deconv(args) -> int:
    t0 = time.perf_counter()
    params, _ = load_checkpoint(args.checkpoint)
    y = read_image(args.observed)
    y = Tensor(np.asarray(y.data, dtype=np.float32))
    rule = StopRule(epsilon=args.eps, max_iters=args.max_iters)
    truth = read_image(args.truth) if args.truth else None
    with _OutputDir(args.out) as out:
        keep = truth is not None
        if args.denoise:
            result = denoise(params, y, rule, keep_estimates=keep)
        else:
            if not args.kernel:
                raise ValueError("--kernel is required unless --denoise is set")
            result = deconvolve(params, y, read_kernel(args.kernel), rule, keep_estimates=keep)
        write_image(out / "restored.png", result.estimate)
        psnrs = None
        if keep and result.estimates:
            psnrs = [psnr(truth, est) for est in result.estimates]
        write_trace(out / "trace.csv", result, psnrs)
        _write_manifest(out, "deconv", args, [str(args.observed)], [str(out / "restored.png")], t0)
        if result.aborted:
            print(f"warning: {result.message}", file=sys.stderr)
            return 2
    steps = len(result.trace)
    print(f"restored in {steps} steps -> {Path(args.out) / 'restored.png'}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    restored_dir = Path(args.restored)
    truth_dir = Path(args.truth)
    restored = {p.name: p for p in restored_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    truth = {p.name: p for p in truth_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    missing = sorted(set(restored) ^ set(truth))
    if missing:
        print("error: filename mismatch between restored and truth:", file=sys.stderr)
        for name in missing:
            side = "restored" if name in restored else "truth"
            print(f"  only in {side}: {name}", file=sys.stderr)
        return 1
    if args.crop == "auto":
        sides = _kernel_sides_from_store(args.store) if args.store else {}
        if not sides:
            print("warning: --crop auto without a usable --store manifest; using 0", file=sys.stderr)
    with _OutputDir(args.out) as out:
        pairs = []
        crops = []
        for name in sorted(restored):
            gt = read_image(truth[name])
            res = read_image(restored[name])
            if args.crop == "auto":
                crop = sides.get(Path(name).stem, 0) // 2
            else:
                crop = int(args.crop)
            crops.append(crop)
            pairs.append((name, gt, res))
        # a single report needs one margin; use the per-image maximum
        crop = max(crops) if crops else 0
        report = evaluate_pairs(pairs, crop)
        (out / "eval.csv").write_text(report.to_csv())
        (out / "summary.txt").write_text(report.summary() + "\n")
        _write_manifest(out, "eval", args, [str(restored_dir), str(truth_dir)], [str(out)], t0)
    print(report.summary())
    return 0


def _kernel_sides_from_store(store) -> dict[str, int]:
    sides = {}
    manifest = Path(store) / "manifest.csv"
    for line in manifest.read_text().splitlines()[1:]:
        if line.strip():
            tid, _sigma, side, _seed = line.split(",")
            sides[tid] = int(side)
    return sides


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deconvgd",
                                 description="Learned gradient-descent image deconvolution")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize a blurred/noisy triplet store")
    sp.add_argument("truth_dir", help="directory of ground-truth images")
    sp.add_argument("--out", required=True, help="output triplet-store directory")
    sp.add_argument("--kernels-per-image", type=int, default=5, dest="kernels_per_image")
    sp.add_argument("--sigma-lo", type=float, default=0.003)
    sp.add_argument("--sigma-hi", type=float, default=0.015)
    sp.add_argument("--sizes", default="11,21,31,41", help="comma-separated kernel sides")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train the optimizer on a triplet store")
    tp.add_argument("store", help="triplet-store directory")
    tp.add_argument("--out", required=True, help="output directory (checkpoint + log)")
    tp.add_argument("--steps", type=int, default=5)
    tp.add_argument("--batch", type=int, default=4)
    tp.add_argument("--lr", type=float, default=5e-5)
    tp.add_argument("--tau", type=float, default=1.0)
    tp.add_argument("--kappa", default="1,1,1,1,1")
    tp.add_argument("--iters", type=int, default=1000)
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--crop", type=int, default=None, help="random training crop size")
    tp.add_argument("--checkpoint-every", type=int, default=0, dest="checkpoint_every")
    tp.add_argument("--no-r", action="store_true", dest="no_r",
                    help="ablation: drop the estimate-driven (regularizer) sub-network")
    tp.add_argument("--no-h", action="store_true", dest="no_h",
                    help="ablation: drop the data-gradient sub-network (raw gradient passes through)")
    tp.add_argument("--no-d", action="store_true", dest="no_d",
                    help="ablation: drop the direction-scaling sub-network")
    tp.set_defaults(func=cmd_train)

    dp = sub.add_parser("deconv", help="restore one image with a trained model")
    dp.add_argument("--checkpoint", required=True)
    dp.add_argument("--observed", required=True, help="degraded input image")
    dp.add_argument("--kernel", default=None, help="kernel text file")
    dp.add_argument("--truth", default=None, help="optional ground truth (adds PSNR to trace)")
    dp.add_argument("--out", required=True)
    dp.add_argument("--eps", type=float, default=1e-3)
    dp.add_argument("--max-iters", type=int, default=30, dest="max_iters")
    dp.add_argument("--denoise", action="store_true", help="identity blur (denoising mode)")
    dp.set_defaults(func=cmd_deconv)

    ep = sub.add_parser("eval", help="PSNR/SSIM of restored images against truth")
    ep.add_argument("--restored", required=True)
    ep.add_argument("--truth", required=True)
    ep.add_argument("--out", required=True)
    ep.add_argument("--crop", default="0", help="boundary crop in px, or 'auto'")
    ep.add_argument("--store", default=None, help="triplet store for --crop auto kernel sides")
    ep.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    threads = os.environ.get("DECONVGD_THREADS")
    if threads:
        try:
            from threadpoolctl import threadpool_limits

            threadpool_limits(limits=int(threads))
        except ImportError:
            print("warning: threadpoolctl not installed; DECONVGD_THREADS ignored", file=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
