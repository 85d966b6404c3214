"""Run configuration: nested dataclasses loaded from YAML.

Defaults (all overridable in the config file):

=========================  ==========================================
ansatz.M                   2
ansatz.K                   L (no truncation)
ansatz.sigma               0.01
ansatz.init                rhf (restricted HF orbitals)
sampler.n_samples          4096 (optimization)
sampler.n_chains           64
sampler.burn_in_sweeps     10 (sweep = L attempted moves)
sampler.move_mix           Hubbard: hop 0.8, single 0.1, exchange 0.1
                           ab initio: single 0.7, double 0.3
optimizer.variant          rmsprop (eta 0.02, lambda 1e-3, beta 0.9)
optimizer.max_update_norm  none (no trust radius)
evaluate.n_evaluations     50
evaluate.n_samples         65536
threshold                  0 (no pruning)
=========================  ==========================================
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .sampler import SamplerConfig
from .sr import SrConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration: " + "; ".join(problems))
        self.problems = problems


@dataclass
class SystemConfig:
    kind: str = "hubbard"  # hubbard | fcidump
    dims: list = field(default_factory=lambda: [1, 2])
    t: float = 1.0
    U: float = 8.0
    boundary: typing.Any = "open"  # open | periodic | per-axis list
    fcidump: str | None = None
    geometry: str | None = None
    nup: int | None = None  # default: half filling / from NELEC and MS2
    ndn: int | None = None
    spin_mode: str = "restricted"

    def __post_init__(self):
        if self.kind not in ("hubbard", "fcidump"):
            raise ValueError(f"system.kind must be 'hubbard' or 'fcidump', got {self.kind!r}")
        if self.kind == "fcidump" and not self.fcidump:
            raise ValueError("system.fcidump path is required for kind 'fcidump'")


@dataclass
class AnsatzConfig:
    M: int = 2
    K: int | None = None
    sigma: float = 0.01
    seed: int = 0
    init: str = "rhf"  # rhf | uhf
    checkpoint_in: str | None = None
    checkpoint_out: str = "checkpoint.cpdb"

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("ansatz.M must be >= 1")
        if self.init not in ("rhf", "uhf"):
            raise ValueError("ansatz.init must be 'rhf' or 'uhf'")


@dataclass
class EvaluateConfig:
    n_evaluations: int = 50
    n_samples: int = 65536
    n_chains: int | None = None


@dataclass
class CorrelateConfig:
    n_samples: int = 65536
    bulk_sites: list | None = None  # default: the 4 sites nearest the centre
    output: str = "correlation.csv"


@dataclass
class AnalysisConfig:
    input: str | None = None
    output: str = "morse_fit.csv"
    mass_amu: float = 1.00782503207


@dataclass
class EdConfig:
    rdm: bool = False


@dataclass
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    ansatz: AnsatzConfig = field(default_factory=AnsatzConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optimizer: SrConfig = field(default_factory=SrConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    correlate: CorrelateConfig = field(default_factory=CorrelateConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    ed: EdConfig = field(default_factory=EdConfig)
    exact: bool = False
    threshold: float = 0.0
    output: str = "."


def _build(cls, data, path: str, problems: list[str]):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        problems.append(f"{path}: expected a mapping")
        return None
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for k in data:
        if k not in names:
            problems.append(f"{path}.{k}: unknown key" if path else f"{k}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if not f.init or f.name not in data:
            continue
        v = data[f.name]
        sub = f"{path}.{f.name}" if path else f.name
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            v = _build(hint, v, sub, problems)
            if v is None:
                continue
        elif hint in (int, float, bool, str) and v is not None:
            ok = isinstance(v, hint) or (hint is float and isinstance(v, int) and not isinstance(v, bool))
            if hint is int and isinstance(v, bool):
                ok = False
            if not ok:
                problems.append(f"{sub}: expected {hint.__name__}, got {type(v).__name__}")
                continue
        kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path or 'config'}: {exc}")
        return None


def load_config(source) -> RunConfig:
    """Parse a YAML file path, YAML text stream, or dict into a RunConfig."""
    if isinstance(source, dict):
        data = source
    else:
        if hasattr(source, "read"):
            text = source.read()
        else:
            text = Path(source).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"YAML syntax: {exc}"]) from None
    problems: list[str] = []
    cfg = _build(RunConfig, data, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=False)
