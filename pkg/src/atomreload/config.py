"""Run configuration: INI sections mapped onto the module dataclasses."""

from __future__ import annotations

import configparser
import io
import typing
from dataclasses import dataclass, field, fields, replace

from atomreload.coherence import CoherenceConfig, DDSequence, ShieldingConfig
from atomreload.core import SimError, ZoneLayout
from atomreload.prep import PrepConfig, TrapModel
from atomreload.rearrange import RearrangeConfig
from atomreload.reservoir import CloudConfig, LoadingModel, TweezerGeometry
from atomreload.storage import ReloadCycleConfig
from atomreload.transport import StageTimings, TransferBudget


class ConfigError(SimError, ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    trials: int = 1
    out: str = "out"
    workers: int = 1


@dataclass(frozen=True)
class FluxConfig:
    duration_s: float = 1.0
    extraction_period_ms: float = 2.15
    batch_targets: int = 600


@dataclass(frozen=True)
class DepletionConfig:
    n_extractions: int = 120
    period_ms: float = 2.15
    trials: int = 10


@dataclass(frozen=True)
class MaintainConfig:
    duration_s: float = 600.0
    mode: str = "atoms"
    threshold: int = 3000
    decay_duration_s: float = 180.0
    extrapolate_hours: float = 2.3


@dataclass(frozen=True)
class ScanConfig:
    atoms: int = 3240
    trials: int = 10
    points: int = 12
    span: float = 1.2
    t2_spacing_us: int = 1600


@dataclass(frozen=True)
class CapacityConfig:
    n_physical: int = 10_000
    layer_time_s: float = 1e-3
    loss_per_layer: float = 0.0015


@dataclass(frozen=True)
class RearrangeBenchConfig:
    trials: int = 300


@dataclass(frozen=True)
class AcceptanceConfig:
    flux_atoms: float = 300_000.0
    flux_qubits_plain: float = 30_000.0
    flux_qubits_rearranged: float = 15_000.0
    flux_rel_tol: float = 0.15
    depletion_window_lo: int = 50
    depletion_window_hi: int = 90
    depletion_first30_min: float = 0.5
    parity_sigma: float = 3.0
    rearrange_fill: float = 0.996
    rearrange_fill_tol: float = 0.003
    zero_defect_lo: float = 0.08
    zero_defect_hi: float = 0.20
    assembly_fill: float = 0.985
    assembly_fill_tol: float = 0.007
    assembly_elapsed_s: float = 0.48
    maintain_min_population: int = 3000
    lifetime_s: float = 60.0
    lifetime_rel_tol: float = 0.05
    steady_state_rel_tol: float = 0.005
    coherence_rel_tol: float = 0.05
    duty_lo: float = 0.85
    duty_hi: float = 0.92
    cycled_atoms_min: float = 5e7


SECTIONS: dict[str, type] = {
    "run": RunSection,
    "cloud": CloudConfig,
    "tweezers": TweezerGeometry,
    "loading": LoadingModel,
    "timings": StageTimings,
    "transfer": TransferBudget,
    "layout": ZoneLayout,
    "prep": PrepConfig,
    "trap": TrapModel,
    "rearrange": RearrangeConfig,
    "storage": ReloadCycleConfig,
    "coherence": CoherenceConfig,
    "shielding": ShieldingConfig,
    "dd": DDSequence,
    "scan": ScanConfig,
    "flux": FluxConfig,
    "depletion": DepletionConfig,
    "maintain": MaintainConfig,
    "capacity": CapacityConfig,
    "bench": RearrangeBenchConfig,
    "acceptance": AcceptanceConfig,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    cloud: CloudConfig = field(default_factory=CloudConfig)
    tweezers: TweezerGeometry = field(default_factory=TweezerGeometry)
    loading: LoadingModel = field(default_factory=LoadingModel)
    timings: StageTimings = field(default_factory=StageTimings)
    transfer: TransferBudget = field(default_factory=TransferBudget)
    layout: ZoneLayout = field(default_factory=ZoneLayout)
    prep: PrepConfig = field(default_factory=PrepConfig)
    trap: TrapModel = field(default_factory=TrapModel)
    rearrange: RearrangeConfig = field(default_factory=RearrangeConfig)
    storage: ReloadCycleConfig = field(default_factory=ReloadCycleConfig)
    coherence: CoherenceConfig = field(default_factory=CoherenceConfig)
    shielding: ShieldingConfig = field(default_factory=ShieldingConfig)
    dd: DDSequence = field(default_factory=DDSequence)
    scan: ScanConfig = field(default_factory=ScanConfig)
    flux: FluxConfig = field(default_factory=FluxConfig)
    depletion: DepletionConfig = field(default_factory=DepletionConfig)
    maintain: MaintainConfig = field(default_factory=MaintainConfig)
    capacity: CapacityConfig = field(default_factory=CapacityConfig)
    bench: RearrangeBenchConfig = field(default_factory=RearrangeBenchConfig)
    acceptance: AcceptanceConfig = field(default_factory=AcceptanceConfig)

    def with_values(self, **sections) -> "RunConfig":
        """``cfg.with_values(storage={"replenish": False})`` returns a modified copy."""
        out = self
        for name, kv in sections.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            try:
                out = replace(out, **{name: replace(getattr(out, name), **kv)})
            except TypeError as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
            except ValueError as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return out


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(section: str, key: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc
    raise ConfigError(f"[{section}] {key}: unsupported type {kind}")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _hints(cls):
    return typing.get_type_hints(cls)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = RunConfig()
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        cls = SECTIONS[sec]
        hints = _hints(cls)
        names = {f.name for f in fields(cls)}
        kv = {}
        for key, raw in cp.items(sec):
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            kv[key] = _convert(sec, key, hints[key], raw)
        cfg = cfg.with_values(**{sec: kv})
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def serialize_config(cfg: RunConfig) -> str:
    buf = io.StringIO()
    for sec in SECTIONS:
        buf.write(f"[{sec}]\n")
        obj = getattr(cfg, sec)
        for f in fields(obj):
            buf.write(f"{f.name} = {_format(getattr(obj, f.name))}\n")
        buf.write("\n")
    return buf.getvalue()
