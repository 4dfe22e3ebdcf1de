"""Flat ``section.key = value`` run configuration with a stable fingerprint."""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass, field, fields

from .data import DatasetSpec
from .network import ModelConfig, model_config
from .sampling import SamplerConfig
from .schedules import build_linear_schedule
from .training import TrainConfig

CONFIG_VERSION = 1
# keys that set run length or output location but not the trajectory itself
UNFINGERPRINTED = {"train.steps", "train.ckpt_every", "run.out_dir", "run.name"}


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSection:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    min_snr_gamma: float = 5.0


@dataclass(frozen=True)
class ModelSection:
    size: str = "toy"
    variant: str = "v1"
    depth: int = 0  # 0 = preset value
    n2: int = 0
    dim: int = 0
    heads: int = 0
    classes: int = 0  # 0 = data.classes
    patch_size: int = 2
    learn_sigma: bool = False
    rel_bias: bool = True
    learn_pos: bool = True
    side_interp: bool = True


@dataclass(frozen=True)
class MaskSection:
    ratio_lo: float = 0.3
    ratio_hi: float = 0.3


@dataclass(frozen=True)
class TrainSection:
    steps: int = 1000
    batch: int = 64
    lr: float = 1e-4
    optimizer: str = "adamw"
    betas: str = ""  # comma list; empty = optimizer default
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    label_dropout: float = 0.1
    vlb_lambda: float = 1e-3
    seed: int = 0
    ckpt_every: int = 0
    grad_clip: float = 0.0
    dual_pass: bool = True
    loss_tokens: str = "all"
    dtype: str = "float32"


@dataclass(frozen=True)
class DataSection:
    kind: str = "synthetic-pairs"
    classes: int = 2
    size: int = 4096
    h: int = 8
    c: int = 2
    pairs: int = 1
    path: str = ""
    labels_path: str = ""
    seed: int = 0


@dataclass(frozen=True)
class GuidanceSection:
    mode: str = "off"
    w: float = 3.8
    s: float = 4.0


@dataclass(frozen=True)
class SamplingSection:
    steps: int = 250
    use_ema: bool = False
    range_lo: float = -3.0
    range_hi: float = 3.0


@dataclass(frozen=True)
class EvalSection:
    n_samples: int = 1024
    n_proj: int = 128
    steps: int = 25  # respaced sampler steps used for metrics
    every: int = 0
    seed: int = 1234
    use_ema: bool = False


@dataclass(frozen=True)
class RunSection:
    out_dir: str = "runs"
    name: str = "run"


SECTIONS = {
    "diffusion": DiffusionSection,
    "model": ModelSection,
    "mask": MaskSection,
    "train": TrainSection,
    "data": DataSection,
    "sampling": SamplingSection,
    "guidance": GuidanceSection,
    "eval": EvalSection,
    "run": RunSection,
}


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    model: ModelSection = field(default_factory=ModelSection)
    mask: MaskSection = field(default_factory=MaskSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    # --- derived objects -------------------------------------------------

    def model_config(self) -> ModelConfig:
        m = self.model
        kw = dict(patch=m.patch_size, in_channels=self.data.c, input_size=self.data.h, classes=m.classes or self.data.classes,
                  learn_sigma=m.learn_sigma, rel_bias=m.rel_bias, learn_pos=m.learn_pos, side_interp=m.side_interp)
        for key in ("depth", "n2", "dim", "heads"):
            if getattr(m, key):
                kw[key] = getattr(m, key)
        return model_config(m.size, m.variant, **kw)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        t = self.train
        betas = tuple(float(b) for b in t.betas.split(",")) if t.betas.strip() else ()
        return TrainConfig(
            steps=t.steps, batch=t.batch, lr=t.lr, optimizer=t.optimizer, betas=betas, weight_decay=t.weight_decay,
            ema_decay=t.ema_decay, label_dropout=t.label_dropout, vlb_lambda=t.vlb_lambda,
            min_snr_gamma=self.diffusion.min_snr_gamma, mask_lo=self.mask.ratio_lo, mask_hi=self.mask.ratio_hi,
            dual_pass=t.dual_pass, loss_tokens=t.loss_tokens, grad_clip=t.grad_clip,
            seed=t.seed if seed is None else seed, ckpt_every=t.ckpt_every, dtype=t.dtype,
        )

    def dataset_spec(self) -> DatasetSpec:
        d = self.data
        return DatasetSpec(kind=d.kind, classes=d.classes, c=d.c, h=d.h, w=d.h, size=d.size, seed=d.seed,
                           pairs=d.pairs, path=d.path, labels_path=d.labels_path)

    def schedule(self):
        return build_linear_schedule(self.diffusion.T, self.diffusion.beta_min, self.diffusion.beta_max)

    def sampler_config(self, **kw) -> SamplerConfig:
        g = self.guidance
        base = dict(n_steps=self.sampling.steps, guidance=g.mode, w=g.w, s=g.s, use_ema=self.sampling.use_ema)
        base.update(kw)
        return SamplerConfig(**base)

    def validate(self) -> "RunConfig":
        """Build every derived object once so bad values fail early."""
        try:
            self.model_config()
            self.train_config()
            self.schedule()
            self.sampler_config()
        except ValueError as exc:
            raise ConfigFileError(str(exc)) from exc
        if self.model.variant == "dit" and self.train.dual_pass:
            raise ConfigFileError("model.variant = dit has no masked pass; set train.dual_pass = false")
        if self.model.classes and self.data.kind == "synthetic-pairs" and self.model.classes != self.data.classes:
            raise ConfigFileError(f"model.classes = {self.model.classes} but data.classes = {self.data.classes}")
        if self.data.kind not in ("synthetic-pairs", "idx-images"):
            raise ConfigFileError(f"unknown data.kind {self.data.kind!r}")
        return self

    # --- flat view ---------------------------------------------------------

    def items(self) -> list[tuple[str, str]]:
        out = [("version", str(self.version))]
        for sec in SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                out.append((f"{sec}.{f.name}", format_value(getattr(obj, f.name))))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def fingerprint(self) -> str:
        canon = "".join(f"{k}={v}\n" for k, v in sorted(self.items()) if k not in UNFINGERPRINTED)
        return hashlib.sha256(canon.encode()).hexdigest()

    def replace(self, **flat) -> "RunConfig":
        """Copy with ``section_key=value`` or {"section.key": value} overrides."""
        return apply_overrides(self, {k.replace("__", "."): v for k, v in flat.items()})


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def _coerce(key: str, raw, typ):
    if not isinstance(raw, str):
        return typ(raw) if typ is not bool else bool(raw)
    s = raw.strip()
    try:
        if typ is bool:
            low = s.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(s)
        if typ is int:
            return int(s)
        if typ is float:
            return float(s)
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {s!r} as {typ.__name__}") from None
    return s


def apply_overrides(cfg: RunConfig, pairs: dict) -> RunConfig:
    updates: dict[str, dict] = {}
    version = cfg.version
    for key, raw in pairs.items():
        if key == "version":
            version = int(_coerce(key, raw, int))
            if version != CONFIG_VERSION:
                raise ConfigFileError(f"unsupported config version {version}")
            continue
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or not name:
            raise ConfigFileError(f"unknown config key {key!r}")
        types = {f.name: f.type for f in fields(SECTIONS[sec])}
        if name not in types:
            raise ConfigFileError(f"unknown config key {key!r}")
        typ = {"int": int, "float": float, "bool": bool, "str": str}[types[name]]
        updates.setdefault(sec, {})[name] = _coerce(key, raw, typ)
    kw = {sec: dataclasses.replace(getattr(cfg, sec), **vals) for sec, vals in updates.items()}
    return dataclasses.replace(cfg, version=version, **kw)


def parse_pairs(text: str, origin: str = "<string>", base_dir: str = ".", _depth: int = 0) -> dict[str, str]:
    """Parse ``key = value`` lines; ``include = path`` pulls in another file first."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigFileError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, value = key.strip(), value.strip()
        if key == "include":
            if _depth > 8:
                raise ConfigFileError(f"{origin}:{lineno}: include nesting too deep")
            path = value if os.path.isabs(value) else os.path.join(base_dir, value)
            out.update(read_pairs(path, _depth + 1))
            continue
        out[key] = value
    return out


def read_pairs(path: str, _depth: int = 0) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_pairs(text, path, os.path.dirname(os.path.abspath(path)), _depth)


def parse_config(text: str, origin: str = "<string>", base_dir: str = ".") -> RunConfig:
    return apply_overrides(RunConfig(), parse_pairs(text, origin, base_dir)).validate()


def load_config(path: str) -> RunConfig:
    return apply_overrides(RunConfig(), read_pairs(path)).validate()


@dataclass(frozen=True)
class Suite:
    entries: list  # [(name, RunConfig)]
    seeds: list
    eval_steps: list


def load_suite(path: str) -> Suite:
    """Suite file: ``seeds = 0,1,2``, ``eval_steps = ...`` and ``run.<name> = <config path>`` lines."""
    raw = read_pairs(path)
    base = os.path.dirname(os.path.abspath(path))
    entries, seeds, steps = [], [0], []
    for key, value in raw.items():
        if key == "seeds":
            seeds = [int(s) for s in value.split(",") if s.strip()]
        elif key == "eval_steps":
            steps = [int(s) for s in value.split(",") if s.strip()]
        elif key.startswith("run."):
            cfg_path = value if os.path.isabs(value) else os.path.join(base, value)
            entries.append((key[4:], load_config(cfg_path)))
        else:
            raise ConfigFileError(f"unknown suite key {key!r}")
    if not entries:
        raise ConfigFileError(f"suite {path} lists no runs")
    return Suite(entries, seeds, steps)
