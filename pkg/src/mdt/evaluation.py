"""Sample-quality metrics and the convergence comparison harness."""

from __future__ import annotations

import csv
import io
import os
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import FOOTPRINT, Dataset, PairLayout

CONVERGENCE_COLUMNS = ("name", "seed", "step", "swd", "pair_consistency", "seconds")


class EvalError(ValueError):
    pass


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, n_proj: int = 128, rng: np.random.Generator | None = None) -> float:
    """Mean over random unit directions of the 1-D 2-Wasserstein distance between projections.

    Both sets hold the same number of points; rows are flattened to vectors.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim == 0 or b.ndim == 0 or a.size == 0 or b.size == 0:
        raise EvalError("sliced Wasserstein needs non-empty sample sets")
    a, b = a.reshape(len(a), -1), b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise EvalError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) != len(b):
        raise EvalError(f"sample counts differ: {len(a)} vs {len(b)}")
    if n_proj < 64:
        raise EvalError(f"n_proj must be at least 64, got {n_proj}")
    rng = rng if rng is not None else nx.make_rng(0, "swd")
    dirs = rng.standard_normal((a.shape[1], n_proj))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    pa = np.sort(a @ dirs, axis=0)
    pb = np.sort(b @ dirs, axis=0)
    per_dir = np.sqrt(np.mean((pa - pb) ** 2, axis=0))
    return float(per_dir.mean())


@dataclass(frozen=True)
class PairScore:
    score: float
    degenerate: bool
    n_pairs: int


def measure_pair_amplitudes(samples: np.ndarray, labels: np.ndarray, layout: PairLayout) -> np.ndarray:
    """(n_samples * pairs, 2) amplitudes: max gain-weighted response in each member's footprint."""
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels)
    out = []
    r = FOOTPRINT
    for k in range(layout.centers.shape[0]):
        sel = labels == k
        if not sel.any():
            continue
        g = layout.gains[k]
        resp = np.einsum("nchw,c->nhw", samples[sel], g) / float(g @ g)
        for j in range(layout.centers.shape[1]):
            amps = []
            for (row, col) in layout.centers[k, j]:
                win = resp[:, row - r : row + r + 1, col - r : col + r + 1]
                amps.append(win.reshape(len(win), -1).max(axis=1))
            out.append(np.stack(amps, axis=1))
    if not out:
        return np.zeros((0, 2))
    return np.concatenate(out, axis=0)


def pair_consistency(samples: np.ndarray, labels: np.ndarray, layout: PairLayout) -> PairScore:
    """Pearson correlation of left/right member amplitudes over samples and pair slots."""
    amps = measure_pair_amplitudes(samples, labels, layout)
    if len(amps) < 2:
        warnings.warn("pair consistency needs at least two pairs; reporting 0", RuntimeWarning, stacklevel=2)
        return PairScore(0.0, True, len(amps))
    left, right = amps[:, 0] - amps[:, 0].mean(), amps[:, 1] - amps[:, 1].mean()
    vl, vr = float(left @ left), float(right @ right)
    scale = max(1.0, float(np.abs(amps).max()) ** 2) * len(amps)
    if vl <= 1e-12 * scale or vr <= 1e-12 * scale:
        warnings.warn("pair amplitudes have no variance; reporting 0", RuntimeWarning, stacklevel=2)
        return PairScore(0.0, True, len(amps))
    r = float(left @ right) / np.sqrt(vl * vr)
    return PairScore(float(np.clip(r, -1.0, 1.0)), False, len(amps))


@dataclass
class EvalReport:
    step: int
    swd: float
    pair_consistency: float
    degenerate: bool
    per_class: dict = field(default_factory=dict)
    seconds: float = 0.0
    fingerprint: str = ""

    def __post_init__(self):
        if self.swd < 0 or not -1 <= self.pair_consistency <= 1:
            raise EvalError(f"metric out of range: swd={self.swd}, pair={self.pair_consistency}")


def evaluate_samples(
    samples: np.ndarray,
    labels: np.ndarray,
    reference: Dataset,
    step: int = 0,
    n_proj: int = 128,
    seed: int = 0,
    seconds: float = 0.0,
    fingerprint: str = "",
) -> EvalReport:
    """Score normalized-space samples against a reference split with matching labels."""
    samples = np.asarray(samples, dtype=np.float64)
    swd = sliced_wasserstein(samples, reference.x[: len(samples)], n_proj, nx.make_rng(seed, "swd"))
    per_class = {}
    for k in np.unique(labels):
        a = samples[labels == k]
        b = reference.x[reference.labels == k]
        m = min(len(a), len(b))
        if m:
            per_class[int(k)] = sliced_wasserstein(a[:m], b[:m], n_proj, nx.make_rng(seed, f"swd/{int(k)}"))
    if reference.layout is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            pc = pair_consistency(reference.denormalize(samples), labels, reference.layout)
    else:
        pc = PairScore(0.0, True, 0)
    return EvalReport(step, swd, pc.score, pc.degenerate, per_class, seconds, fingerprint)


# --------------------------------------------------------------------------
# convergence comparison


@dataclass
class SuiteEntry:
    name: str
    run: object  # config.RunConfig


def format_convergence_row(name: str, seed: int, step: int, swd: float, pair: float, seconds: float) -> str:
    return f"{name},{seed},{step},{swd:.6f},{pair:.6f},{seconds:.3f}"


def compare_convergence(
    entries: list[SuiteEntry],
    eval_steps: list[int],
    seeds: list[int],
    out_path: str,
    run_one: Callable | None = None,
    log: Callable[[str], None] | None = None,
) -> list[dict]:
    """Train every (config, seed) and write long-form rows to ``out_path`` as they arrive.

    ``run_one(run, seed, eval_steps, on_report)`` trains one run. A failing
    run is recorded as a ``# failed`` comment line and the suite continues.
    """
    if run_one is None:
        from .runner import train_and_evaluate as run_one
    if not entries:
        raise EvalError("empty suite")
    rows: list[dict] = []
    tmp = out_path + ".partial"
    with open(tmp, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(CONVERGENCE_COLUMNS) + "\n")
        for entry in entries:
            for seed in seeds:
                t0 = time.perf_counter()

                def on_report(report, name=entry.name, seed=seed):
                    rows.append(dict(name=name, seed=seed, step=report.step, swd=report.swd,
                                     pair_consistency=report.pair_consistency, seconds=report.seconds))
                    fh.write(format_convergence_row(name, seed, report.step, report.swd, report.pair_consistency, report.seconds) + "\n")
                    fh.flush()

                try:
                    run_one(entry.run, seed, eval_steps, on_report)
                except Exception as exc:  # noqa: BLE001 - recorded, suite continues
                    fh.write(f"# failed {entry.name} seed={seed}: {type(exc).__name__}: {exc}\n")
                    fh.flush()
                if log:
                    log(f"{entry.name} seed={seed} done in {time.perf_counter() - t0:.1f}s")
    os.replace(tmp, out_path)
    return rows


def read_convergence_csv(path: str) -> list[dict]:
    with open(path, encoding="ascii") as fh:
        text = "".join(line for line in fh if not line.startswith("#"))
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append(dict(name=r["name"], seed=int(r["seed"]), step=int(r["step"]), swd=float(r["swd"]),
                         pair_consistency=float(r["pair_consistency"]), seconds=float(r["seconds"])))
    return rows


def steps_to_reach(curve: list[tuple[int, float]], target: float) -> float:
    """First evaluated step whose swd is at or below ``target``; inf if never."""
    for step, value in sorted(curve):
        if value <= target:
            return float(step)
    return float("inf")
