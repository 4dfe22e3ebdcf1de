import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdt import numerics as nx
from mdt.data import BLOB_SIGMA, NOISE_STD, DatasetSpec, gen_synthetic_pairs, heldout_split
from mdt.evaluation import (
    CONVERGENCE_COLUMNS,
    EvalError,
    EvalReport,
    SuiteEntry,
    compare_convergence,
    evaluate_samples,
    pair_consistency,
    read_convergence_csv,
    sliced_wasserstein,
    steps_to_reach,
)


def _insertion_sort(vals):
    out = []
    for v in vals:
        i = len(out)
        while i > 0 and out[i - 1] > v:
            i -= 1
        out.insert(i, v)
    return out


def _swd_bruteforce(a, b, dirs):
    total = 0.0
    for k in range(dirs.shape[1]):
        u = dirs[:, k]
        pa = _insertion_sort([float(sum(x * y for x, y in zip(row, u))) for row in a])
        pb = _insertion_sort([float(sum(x * y for x, y in zip(row, u))) for row in b])
        total += math.sqrt(sum((x - y) ** 2 for x, y in zip(pa, pb)) / len(pa))
    return total / dirs.shape[1]


def test_swd_matches_bruteforce():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((64, 8)), rng.standard_normal((64, 8)) + 0.3
    got = sliced_wasserstein(a, b, 64, nx.make_rng(1, "p"))
    dirs = nx.make_rng(1, "p").standard_normal((8, 64))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    assert got == pytest.approx(_swd_bruteforce(a, b, dirs), abs=1e-6)


def test_swd_examples():
    a = np.random.default_rng(0).standard_normal((32, 4))
    assert sliced_wasserstein(a, a.copy()) == pytest.approx(0.0, abs=1e-12)
    assert sliced_wasserstein(np.full((5, 1), 2.0), np.full((5, 1), -1.5)) == pytest.approx(3.5, rel=1e-12)


def test_swd_errors():
    a = np.zeros((4, 3))
    with pytest.raises(EvalError):
        sliced_wasserstein(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(EvalError):
        sliced_wasserstein(a, np.zeros((4, 2)))
    with pytest.raises(EvalError):
        sliced_wasserstein(a, a, n_proj=32)
    with pytest.raises(EvalError):
        sliced_wasserstein(a, np.zeros((5, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(1, 6), st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3), st.integers(0, 999))
def test_swd_symmetry_and_scaling(n, d, c, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    ab = sliced_wasserstein(a, b, 64, nx.make_rng(seed, "p"))
    ba = sliced_wasserstein(b, a, 64, nx.make_rng(seed, "p"))
    assert ab == pytest.approx(ba, abs=1e-9)
    scaled = sliced_wasserstein(c * a, c * b, 64, nx.make_rng(seed, "p"))
    assert scaled == pytest.approx(abs(c) * ab, abs=1e-6)
    assert ab >= 0


def _independent_pairs(n, seed):
    """Same geometry as the generator, but left and right amplitudes drawn separately."""
    ds = gen_synthetic_pairs(DatasetSpec(size=n, seed=seed))
    rng = np.random.default_rng(seed)
    h = w = 8
    r, c = np.mgrid[0:h, 0:w]
    out = np.zeros((n, 2, h, w))
    for i, k in enumerate(ds.labels):
        for (row, col) in ds.layout.centers[k, 0]:
            blob = np.exp(-((r - row) ** 2 + (c - col) ** 2) / (2 * BLOB_SIGMA**2))
            out[i] += rng.uniform(0.25, 2.25) * blob[None] * ds.layout.gains[k][:, None, None]
    out += rng.normal(0, NOISE_STD, out.shape)
    return out, ds


def test_generator_pairs_score_high():
    ds = gen_synthetic_pairs(DatasetSpec(size=1024, seed=0))
    score = pair_consistency(ds.denormalize(ds.x.astype(np.float64)), ds.labels, ds.layout)
    assert score.score > 0.99 and not score.degenerate and score.n_pairs == 1024


def test_independent_amplitudes_score_near_zero():
    x, ds = _independent_pairs(1024, 3)
    assert abs(pair_consistency(x, ds.labels, ds.layout).score) < 0.1


def test_constant_samples_are_degenerate():
    ds = gen_synthetic_pairs(DatasetSpec(size=16, seed=0))
    with pytest.warns(RuntimeWarning):
        res = pair_consistency(np.ones((16, 2, 8, 8)), ds.labels, ds.layout)
    assert res.degenerate and res.score == 0.0


def test_pair_consistency_order_and_scale_invariance():
    x, ds = _independent_pairs(256, 5)
    x = 0.5 * x + 0.5 * ds.denormalize(ds.x.astype(np.float64))  # partial correlation
    base = pair_consistency(x, ds.labels, ds.layout).score
    perm = np.random.default_rng(0).permutation(256)
    assert pair_consistency(x[perm], ds.labels[perm], ds.layout).score == pytest.approx(base, abs=1e-12)
    for c in (0.1, 3.0, 250.0):
        assert pair_consistency(c * x, ds.labels, ds.layout).score == pytest.approx(base, abs=1e-12)


def test_evaluate_samples_on_generator_itself():
    ds = gen_synthetic_pairs(DatasetSpec(size=4096, seed=0))
    ref = heldout_split(ds, 1024, 7919)
    other = heldout_split(ds, 1024, 104729, labels=ref.labels)
    rep = evaluate_samples(other.x, other.labels, ref, 0, 128, 0)
    assert rep.swd < 0.05
    assert rep.pair_consistency > 0.99
    assert set(rep.per_class) == {0, 1}


def test_report_ranges():
    with pytest.raises(EvalError):
        EvalReport(0, -1.0, 0.0, False)
    with pytest.raises(EvalError):
        EvalReport(0, 1.0, 1.5, False)


def test_steps_to_reach():
    curve = [(1000, 0.5), (500, 0.9), (2000, 0.2)]
    assert steps_to_reach(curve, 0.5) == 1000
    assert steps_to_reach(curve, 0.1) == math.inf


def _fake_run(values):
    def run_one(run, seed, eval_steps, on_report):
        if run == "boom":
            raise RuntimeError("exploded")
        for s in eval_steps:
            on_report(EvalReport(s, values[(run, seed)] / (1 + s), 0.5, False, seconds=0.01 * s))

    return run_one


def test_compare_convergence_writes_long_form(tmp_path):
    out = tmp_path / "conv.csv"
    vals = {("a", 0): 1.0, ("a", 1): 2.0, ("b", 0): 3.0, ("b", 1): 4.0}
    rows = compare_convergence([SuiteEntry("A", "a"), SuiteEntry("B", "b")], [0, 10], [0, 1], str(out), _fake_run(vals))
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(CONVERGENCE_COLUMNS) == "name,seed,step,swd,pair_consistency,seconds"
    assert lines[1] == "A,0,0,1.000000,0.500000,0.000"
    assert len(rows) == 8 and len(read_convergence_csv(str(out))) == 8
    assert not (tmp_path / "conv.csv.partial").exists()


def test_compare_convergence_records_failures(tmp_path):
    out = tmp_path / "conv.csv"
    rows = compare_convergence([SuiteEntry("bad", "boom"), SuiteEntry("A", "a")], [5], [0], str(out), _fake_run({("a", 0): 1.0}))
    text = out.read_text()
    assert "# failed bad seed=0: RuntimeError: exploded" in text
    assert [r["name"] for r in rows] == ["A"]
    with pytest.raises(EvalError):
        compare_convergence([], [1], [0], str(out))


def test_identical_configs_give_identical_curves(tmp_path):
    from mdt.config import RunConfig

    run = RunConfig().replace(**{"train.batch": 8, "data.size": 64, "eval.n_samples": 64, "eval.steps": 3,
                                 "model.depth": 4, "model.dim": 16, "model.heads": 2})
    rows = compare_convergence([SuiteEntry("x", run), SuiteEntry("y", run)], [0, 2], [0], str(tmp_path / "c.csv"))
    x = [(r["step"], r["swd"], r["pair_consistency"]) for r in rows if r["name"] == "x"]
    y = [(r["step"], r["swd"], r["pair_consistency"]) for r in rows if r["name"] == "y"]
    assert x == y
