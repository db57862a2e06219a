"""Run configuration: flat ``section.key = value`` files with strict parsing.

Precedence, lowest to highest: built-in defaults, the config file,
``--set section.key=value`` overrides, then the dedicated ``--seed`` flag.
Values like ``4/255`` are accepted wherever a float is expected; lists are
comma-separated; ``auto`` selects the derived default of an optional field.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    seed: int = 0
    classes: int = 6
    train_per_class: int = 100
    test_per_class: int = 50
    size: int = 64
    dir: str = ""  # empty: <out>/data


@dataclass
class ModelSection:
    patch: int = 8
    hidden: int = 128
    mid: int = 256
    embed_dim: int = 64
    blocks: int = 2
    temperature: float = 10.0
    epochs: int = 160
    batch: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment: bool = True
    max_shift: int = 4
    seed: int = 0
    checkpoint: str = ""  # empty: <out>/model.ckpt


@dataclass
class AttackSection:
    epsilon: float = 4 / 255
    step_size: typing.Optional[float] = None
    steps: int = 10
    restarts: int = 1
    loss_kind: str = "ce-untargeted"
    variant: str = "pgd"
    random_init: typing.Optional[bool] = None
    momentum: float = 0.75
    checkpoint_fraction: float = 0.22
    halving: bool = True
    seed: int = 0
    count: int = 300  # held-out images attacked


@dataclass
class DefenseSection:
    radius: typing.Optional[float] = None
    tau: float = 0.85
    epsilon: float = 4 / 255
    step_size: float = 2 / 255
    steps: int = 3
    lam: float = 1.0
    ablation: str = "full"
    use_calibration: bool = True  # take tau and radius from <out>/calibration.json when present
    modes: list = field(default_factory=lambda: ["none", "lpf", "csr"])


@dataclass
class AnalysisSection:
    radii: typing.Optional[list] = None  # None: 8 geometric radii up to Nyquist
    band_edges: list = field(default_factory=lambda: [0.0, 8.0, 16.0, 24.0, 32.0])
    band_epsilons: list = field(default_factory=lambda: [0.0, 1 / 255, 2 / 255, 4 / 255])
    band_steps: int = 10
    curve_images: int = 300
    sgm_images: int = 50
    band_images: int = 100
    conflict_images: int = 200
    roc_images: int = 300
    calibration_images: int = 300
    bench_iterations: int = 100
    bench_warmup: int = 10


@dataclass
class OutputSection:
    plots: bool = True


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "attack": AttackSection,
    "defense": DefenseSection,
    "analysis": AnalysisSection,
    "output": OutputSection,
}


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    output: OutputSection = field(default_factory=OutputSection)

    def set(self, dotted: str, raw: str) -> None:
        section, _, key = dotted.strip().partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key {dotted!r}")
        obj = getattr(self, section)
        hints = typing.get_type_hints(type(obj))
        if key not in hints:
            raise ConfigError(f"unknown config key {dotted!r}")
        try:
            setattr(obj, key, parse_value(raw, hints[key]))
        except ValueError as e:
            raise ConfigError(f"{dotted}: {e}") from None

    def flat(self) -> dict:
        out = {}
        for name in SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                out[f"{name}.{k}"] = v
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.flat().items())


def _parse_scalar(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        try:
            return float(Fraction(raw))
        except (ValueError, ZeroDivisionError):
            return float(raw)  # handles 1e-3, inf
    if typ is str:
        return raw
    raise ValueError(f"unsupported type {typ}")


def parse_value(raw: str, typ):
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        inner = [t for t in typing.get_args(typ) if t is not type(None)][0]
        if raw.strip().lower() in ("auto", "none", ""):
            return None
        return parse_value(raw, inner)
    if typ is list or origin is list:
        items = [s for s in raw.split(",") if s.strip()]
        # lists of numbers stay numeric, anything else stays a string
        try:
            return [_parse_scalar(s, float) for s in items]
        except ValueError:
            return [s.strip() for s in items]
    return _parse_scalar(raw, typ)


def format_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ", ".join(format_value(x) for x in v)
    return str(v)


def parse_text(text: str, cfg: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = line.split("=", 1)
        try:
            cfg.set(key.strip(), value)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return cfg


def load(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        cfg = parse_text(p.read_text(encoding="utf-8"), cfg, str(p))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    if seed is not None:
        cfg.dataset.seed = cfg.model.seed = cfg.attack.seed = seed
    return cfg
