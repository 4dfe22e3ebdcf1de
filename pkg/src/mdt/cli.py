"""Command-line entry points: train, sample, eval, compare.

Exit codes: 0 ok, 2 usage or config error, 3 data integrity (bad checkpoint
or data file), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import numerics as nx
from .config import ConfigFileError, RunConfig, load_config, load_suite, parse_config
from .data import DataError, heldout_split, load_dataset
from .evaluation import CONVERGENCE_COLUMNS, EvalError, SuiteEntry, compare_convergence, evaluate_samples, format_convergence_row
from .runner import build_context, evaluate_state, generate, params_for_sampling, run_training
from .sampling import SamplerConfig, resolve_labels

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def out_root() -> str | None:
    return os.environ.get("MDT_OUT_DIR") or None


def resolve_out(path: str) -> str:
    root = out_root()
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# rendering


def to_bytes(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Affine map [lo, hi] -> [0, 255], round half up, clamp."""
    if not hi > lo:
        raise UsageError(f"render range must satisfy lo < hi, got [{lo}, {hi}]")
    v = np.floor((np.asarray(x, dtype=np.float64) - lo) * (255.0 / (hi - lo)) + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def render_grid(latents: np.ndarray, lo: float = -3.0, hi: float = 3.0) -> np.ndarray:
    """(n, c, h, w) latents -> (G*h, G*w, 3) RGB grid with G = ceil(sqrt(n)).

    One channel is shown as gray, two as red/green over a mid-level blue,
    three or more use the first three; empty cells stay black.
    """
    n, c, h, w = latents.shape
    g = max(1, math.isqrt(n - 1) + 1) if n > 0 else 1
    img = np.zeros((g * h, g * w, 3), dtype=np.uint8)
    px = to_bytes(latents, lo, hi)
    for i in range(n):
        r, col = divmod(i, g)
        if c == 1:
            rgb = np.repeat(px[i, :1], 3, axis=0)
        elif c == 2:
            rgb = np.concatenate([px[i], np.full((1, h, w), 128, dtype=np.uint8)])
        else:
            rgb = px[i, :3]
        img[r * h : (r + 1) * h, col * w : (col + 1) * w] = rgb.transpose(1, 2, 0)
    return img


def encode_ppm(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    run = load_config(args.config)
    if args.steps is not None:
        run = run.replace(train__steps=args.steps)
    if args.out:
        out_dir = resolve_out(args.out)
    else:
        out_dir = os.path.join(out_root() or run.run.out_dir, run.run.name)
    state = run_training(run, out_dir, resume=args.resume, log=_log)
    _log(f"trained to step {state.step}; outputs in {out_dir}")
    return EXIT_OK


def _run_from_checkpoint(ck: ckpt.Checkpoint) -> RunConfig:
    text = ck.meta.get("config")
    if not text:
        raise ckpt.CheckpointError("checkpoint carries no config")
    return parse_config(text, "<checkpoint>")


def _parse_labels(spec: str) -> list[int] | None:
    if spec == "random":
        return None
    try:
        return [int(v) for v in spec.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--labels must be 'random' or a comma list of integers, got {spec!r}") from None


def cmd_sample(args) -> int:
    ck = ckpt.load(args.ckpt)
    run = _run_from_checkpoint(ck)
    cfg = run.model_config()
    sampler = SamplerConfig(n_steps=args.steps, guidance=args.guidance, w=args.w, s=args.s, seed=args.seed, use_ema=args.ema)
    if args.n < 1:
        raise UsageError("--n must be positive")
    labels = resolve_labels(_parse_labels(args.labels), args.n, cfg.classes, args.seed)
    res = generate(params_for_sampling(ck, args.ema), cfg, run.schedule(), sampler, args.n, labels)
    out_dir = resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    lo = run.sampling.range_lo if args.range_lo is None else args.range_lo
    hi = run.sampling.range_hi if args.range_hi is None else args.range_hi
    ckpt.atomic_write(os.path.join(out_dir, "samples.ppm"), encode_ppm(render_grid(res.latents, lo, hi)))
    side = [
        f"checkpoint = {os.path.basename(args.ckpt)}",
        f"fingerprint = {ck.fingerprint}",
        f"step = {ck.step}",
        f"seed = {args.seed}",
        f"n = {args.n}",
        f"labels = {','.join(str(int(v)) for v in labels)}",
        f"steps = {args.steps}",
        f"guidance = {args.guidance}",
        f"w = {args.w!r}",
        f"s = {args.s!r}",
        f"use_ema = {'true' if args.ema else 'false'}",
        f"range = {lo!r},{hi!r}",
    ]
    ckpt.atomic_write(os.path.join(out_dir, "samples.txt"), ("\n".join(side) + "\n").encode("ascii"))
    if args.save_latents:
        np.save(os.path.join(out_dir, "latents.npy"), res.latents)
    _log(f"wrote {args.n} samples to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = resolve_out(args.out) if args.out else None
    if args.ckpt:
        ck = ckpt.load(args.ckpt)
        run = _run_from_checkpoint(ck)
        if args.n:
            run = run.replace(eval__n_samples=args.n)
        if args.steps:
            run = run.replace(eval__steps=args.steps)
        if args.ema:
            run = run.replace(eval__use_ema=True)
        ctx = build_context(run)
        state = ckpt.to_state(ck)
        report = evaluate_state(ctx, state)
        name = run.run.name
        seed = run.train.seed
    else:
        if not args.config:
            raise UsageError("eval needs --ckpt or --config")
        run = load_config(args.config)
        n = args.n or run.eval.n_samples
        data = load_dataset(run.dataset_spec())
        ref = heldout_split(data, n, data.spec.seed + 7919)
        # label-matched, like samples generated during training evaluation
        other = heldout_split(data, n, data.spec.seed + 104729, labels=ref.labels)
        report = evaluate_samples(other.x, other.labels, ref, 0, run.eval.n_proj, run.eval.seed)
        name, seed = "generator", run.data.seed
    line = format_convergence_row(name, seed, report.step, report.swd, report.pair_consistency, report.seconds)
    text = ",".join(CONVERGENCE_COLUMNS) + "\n" + line + "\n"
    if out:
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        ckpt.atomic_write(out, text.encode("ascii"))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    suite = load_suite(args.suite)
    steps = suite.eval_steps or [suite.entries[0][1].train.steps]
    out = resolve_out(args.out)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    entries = [SuiteEntry(name, run) for name, run in suite.entries]
    compare_convergence(entries, steps, suite.seeds, out, log=_log)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdt", description="Masked diffusion transformer toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (default: <run.out_dir>/<run.name>)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--steps", type=int, help="override train.steps")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint into a PPM grid")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--labels", default="random")
    s.add_argument("--steps", type=int, default=250)
    s.add_argument("--guidance", choices=("off", "fixed", "power-cosine"), default="power-cosine")
    s.add_argument("--w", type=float, default=3.8)
    s.add_argument("--s", type=float, default=4.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ema", action="store_true", help="sample with EMA weights")
    s.add_argument("--range-lo", type=float, default=None)
    s.add_argument("--range-hi", type=float, default=None)
    s.add_argument("--save-latents", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score a checkpoint (or the generator itself) against held-out data")
    e.add_argument("--ckpt")
    e.add_argument("--config")
    e.add_argument("--n", type=int, default=0)
    e.add_argument("--steps", type=int, default=0)
    e.add_argument("--ema", action="store_true", help="score the EMA weights (default: the config's eval.use_ema)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="run a convergence comparison suite")
    c.add_argument("--suite", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigFileError, EvalError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except (ckpt.CheckpointError, DataError) as exc:
        _log(f"data integrity error: {exc}")
        return EXIT_DATA
    except nx.NumericError as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        _log(f"error: {exc.strerror}: {exc.filename}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
