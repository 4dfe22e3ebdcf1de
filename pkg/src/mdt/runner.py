"""Glue that turns a RunConfig into datasets, training runs, samples and metrics."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Callable


from . import checkpoint as ckpt
from . import numerics as nx
from .config import RunConfig
from .data import Dataset, batches, heldout_split, load_dataset
from .evaluation import EvalReport, evaluate_samples
from .network import ModelConfig
from .sampling import NetworkEps, SampleResult, SamplerConfig, ddpm_sample
from .schedules import NoiseSchedule
from .training import MetricsWriter, TrainConfig, TrainState, init_train_state, train_loop, truncate_metrics

HELDOUT_SEED_OFFSET = 7919


@dataclass
class RunContext:
    run: RunConfig
    cfg: ModelConfig
    tcfg: TrainConfig
    sched: NoiseSchedule
    dataset: Dataset
    fingerprint: str
    _reference: Dataset | None = None

    @property
    def reference(self) -> Dataset:
        """Held-out split for metrics (a fresh synthetic draw, or the head of an IDX set)."""
        if self._reference is None:
            n = self.run.eval.n_samples
            if self.dataset.spec.kind == "synthetic-pairs":
                self._reference = heldout_split(self.dataset, n, self.dataset.spec.seed + HELDOUT_SEED_OFFSET)
            else:
                d = self.dataset
                n = min(n, len(d))
                self._reference = Dataset(d.x[:n], d.labels[:n], d.spec, d.mean, d.std, d.layout)
        return self._reference


def build_context(run: RunConfig, seed: int | None = None, dataset: Dataset | None = None) -> RunContext:
    tcfg = run.train_config(seed)
    fp = run.replace(train__seed=tcfg.seed).fingerprint()
    return RunContext(run, run.model_config(), tcfg, run.schedule(), dataset or load_dataset(run.dataset_spec()), fp)


def params_for_sampling(state_or_ckpt, use_ema: bool) -> dict:
    if isinstance(state_or_ckpt, TrainState):
        if use_ema:
            return {k: nx.Tensor(v) for k, v in state_or_ckpt.ema.items()}
        return {k: nx.Tensor(p.data) for k, p in state_or_ckpt.params.items()}
    tree = state_or_ckpt.ema if use_ema else state_or_ckpt.params
    return {k: nx.Tensor(v) for k, v in tree.items()}


def generate(params: dict, cfg: ModelConfig, sched: NoiseSchedule, sampler: SamplerConfig, n: int, labels) -> SampleResult:
    return ddpm_sample(NetworkEps(params, cfg), sampler, sched, n, labels)


def evaluate_state(ctx: RunContext, state: TrainState, seconds: float = 0.0) -> EvalReport:
    ev = ctx.run.eval
    ref = ctx.reference
    labels = ref.labels[: ev.n_samples]
    sampler = SamplerConfig(n_steps=ev.steps, guidance="off", seed=ev.seed, use_ema=ev.use_ema)
    res = generate(params_for_sampling(state, ev.use_ema), ctx.cfg, ctx.sched, sampler, len(labels), labels)
    return evaluate_samples(res.latents, labels, ref, state.step, ev.n_proj, ev.seed, seconds, ctx.fingerprint)


def train_and_evaluate(
    run: RunConfig,
    seed: int,
    eval_steps: list[int],
    on_report: Callable[[EvalReport], None] | None = None,
    dataset: Dataset | None = None,
) -> list[EvalReport]:
    """Train one seed for ``max(eval_steps)`` steps, scoring at each listed step.

    ``seconds`` in each report counts training time only.
    """
    ctx = build_context(run, seed, dataset)
    steps = max(eval_steps) if eval_steps else ctx.tcfg.steps
    tcfg = TrainConfig(**{**ctx.tcfg.__dict__, "steps": steps})
    reports: list[EvalReport] = []
    clock = {"train": 0.0, "mark": time.perf_counter()}

    def evaluate(state: TrainState) -> None:
        clock["train"] += time.perf_counter() - clock["mark"]
        rep = evaluate_state(ctx, state, clock["train"])
        reports.append(rep)
        if on_report is not None:
            on_report(rep)
        clock["mark"] = time.perf_counter()

    it = batches(ctx.dataset, tcfg.batch, tcfg.seed)
    train_loop(ctx.cfg, tcfg, ctx.sched, it, evaluate=evaluate, eval_steps=tuple(eval_steps))
    return reports


def checkpoint_paths(out_dir: str, step: int) -> tuple[str, str]:
    return os.path.join(out_dir, f"ckpt_{step:08d}.mdt"), os.path.join(out_dir, "last.mdt")


def run_training(run: RunConfig, out_dir: str, resume: str | None = None, log: Callable[[str], None] | None = None) -> TrainState:
    """Train with metrics CSV and checkpoints under ``out_dir``; ``resume`` names a checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    ctx = build_context(run)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    state = None
    if resume:
        ck = ckpt.load(resume)
        if ck.fingerprint != ctx.fingerprint:
            raise ckpt.CheckpointError(f"checkpoint fingerprint {ck.fingerprint[:12]} does not match config {ctx.fingerprint[:12]}")
        state = ckpt.to_state(ck)
        if os.path.exists(metrics_path):
            truncate_metrics(metrics_path, state.step)
    else:
        state = init_train_state(ctx.cfg, ctx.tcfg)
    writer = MetricsWriter(metrics_path, ctx.fingerprint, append=bool(resume) and os.path.exists(metrics_path))
    config_text = run.to_text()

    def save(st: TrainState) -> None:
        writer.flush()
        path, last = checkpoint_paths(out_dir, st.step)
        ckpt.save(path, st, ctx.fingerprint, {"config": config_text})
        ckpt.atomic_write(last, open(path, "rb").read())
        if log:
            log(f"checkpoint step {st.step} -> {path}")

    it = batches(ctx.dataset, ctx.tcfg.batch, ctx.tcfg.seed)
    try:
        state = train_loop(ctx.cfg, ctx.tcfg, ctx.sched, it, sink=writer, state=state, checkpoint=save)
    finally:
        writer.close()
    return state

