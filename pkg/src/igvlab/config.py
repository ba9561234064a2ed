"""Run configuration: a YAML file with one mapping per section.

Every field must be present and unknown keys are rejected, so a config file
is always a complete record of a run. ``default_config()`` gives the desk-scale
defaults; ``igvlab init-config`` writes them out.
"""

from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from .benchmark import SyntheticSpec
from .errors import ContractError
from .objective import VARIANTS


@dataclass(frozen=True)
class SplitSizes:
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500


@dataclass(frozen=True)
class ModelConfig:
    # paper scale: d=512 on 4096-d clip features
    d: int = 64
    d_prime: int = 32
    fusion_rank: int = 4
    fusion_width: int = 32
    gcn_layers: int = 2


@dataclass(frozen=True)
class OptimConfig:
    # paper scale: batch 256, 60 epochs
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 20
    patience: int = 5


@dataclass(frozen=True)
class IGVConfig:
    variant: str = "full"
    lambda1: float = 0.8
    lambda2: float = 0.8
    temperature: float = 1.0
    bank_capacity: int = 2048
    interventions: int = 1


@dataclass(frozen=True)
class RunSection:
    seeds: tuple = (0, 1, 2, 3, 4)
    output_dir: str = "output"


@dataclass(frozen=True)
class RunConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    splits: SplitSizes = field(default_factory=SplitSizes)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    igv: IGVConfig = field(default_factory=IGVConfig)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self):
        out = {}
        for f in fields(self):
            section = asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def with_igv(self, **changes):
        return replace(self, igv=replace(self.igv, **changes))

    def validate(self):
        self.data.validate()
        for name, value in asdict(self.splits).items():
            if value < 1:
                raise ContractError(f"splits.{name} must be >= 1")
        m = self.model
        if min(m.d, m.d_prime, m.fusion_rank, m.fusion_width, m.gcn_layers) < 1:
            raise ContractError("model dimensions must be positive")
        o = self.optim
        if o.lr <= 0 or o.batch_size < 1 or o.epochs < 0 or o.patience < 1:
            raise ContractError("optim: lr > 0, batch_size >= 1, epochs >= 0, patience >= 1")
        g = self.igv
        if g.variant not in VARIANTS:
            raise ContractError(f"igv.variant {g.variant!r} not in {VARIANTS}")
        if g.lambda1 < 0 or g.lambda2 < 0:
            raise ContractError("igv.lambda1 and igv.lambda2 must be >= 0")
        if g.temperature <= 0 or g.bank_capacity < 1 or g.interventions < 1:
            raise ContractError("igv: temperature > 0, bank_capacity >= 1, interventions >= 1")
        if not self.run.seeds:
            raise ContractError("run.seeds must list at least one seed")
        return self


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _coerce(path, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, int) for v in value)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ContractError(f"config field {path} has wrong type: {value!r}")
    return value


def config_from_dict(raw):
    if not isinstance(raw, dict):
        raise ContractError("config must be a mapping of sections")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ContractError(f"unknown config section(s): {sorted(unknown)}")
    sections = {}
    for name, factory in _SECTIONS.items():
        if name not in raw:
            raise ContractError(f"missing config section: {name}")
        given = raw[name]
        if not isinstance(given, dict):
            raise ContractError(f"config section {name} must be a mapping")
        template = factory()
        known = {f.name for f in fields(template)}
        extra = set(given) - known
        if extra:
            raise ContractError(f"unknown config field(s): {', '.join(f'{name}.{k}' for k in sorted(extra))}")
        values = {}
        for f in fields(template):
            if f.name not in given:
                raise ContractError(f"missing config field: {name}.{f.name}")
            values[f.name] = _coerce(f"{name}.{f.name}", given[f.name], getattr(template, f.name))
        sections[name] = type(template)(**values)
    return RunConfig(**sections).validate()


def default_config():
    return RunConfig()


def dump_config(config):
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as err:
        raise ContractError(f"cannot read config {path}: {err}") from None
    except yaml.YAMLError as err:
        raise ContractError(f"config {path} is not valid YAML: {err}") from None
    return config_from_dict(raw)


def save_config(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(config))
