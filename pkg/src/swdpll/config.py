"""JSON run configuration with a strict schema.

Every section is optional; missing keys fall back to the bundled reference
design. Unknown keys are rejected so a misspelt gain name cannot pass
silently. Errors carry the dotted field path and one of three exit codes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .model import CircuitParams, LoopGains, PllState
from .sim import FORCE_CHOICES, LoopConfig, SimOptions, SwitchThresholds

SCHEMA_VERSION = "1"
EXIT_MISSING = 2
EXIT_PARSE = 3
EXIT_INVALID = 4

DEFAULTS_NAME = "table4-defaults"


class ConfigError(Exception):
    def __init__(self, code: int, message: str, field_path: Optional[str] = None):
        super().__init__(message)
        self.code = code
        self.field_path = field_path

    def __str__(self) -> str:
        msg = super().__str__()
        return f"{self.field_path}: {msg}" if self.field_path else msg


@dataclass(frozen=True)
class DesignTarget:
    pm_deg: float
    ugbw: float  # rad/s
    tdc: str = "delayline"  # "counter" or "delayline"
    kpfd: Optional[float] = None  # LSB/rad; None -> from circuit
    omega_z: Optional[float] = None
    loop_delay: float = 0.0


@dataclass(frozen=True)
class BbpdRatioTarget:
    omega_u: float = 2e6
    loop_delay: float = 1.0
    pm_deg: float = 0.0


@dataclass(frozen=True)
class DesignConfig:
    lti1: DesignTarget = DesignTarget(15.0, 10e6, "counter")
    lti2: DesignTarget = DesignTarget(35.0, 7e6, "delayline")
    kd_residual: tuple[float, float] = (0.002, 0.01)
    kd_target: Optional[float] = None
    bbpd_ratio: BbpdRatioTarget = BbpdRatioTarget()


@dataclass(frozen=True)
class PortraitGrid:
    phi: tuple[float, ...]
    dphi_f: tuple[float, ...]

    def starts(self) -> list[PllState]:
        return [PllState(p, d) for p in self.phi for d in self.dphi_f]


@dataclass(frozen=True)
class SweepAxis:
    field: str
    values: tuple[float, ...]


@dataclass(frozen=True)
class RunConfig:
    circuit: CircuitParams = field(default_factory=CircuitParams)
    gains: LoopGains = field(default_factory=LoopGains)
    thresholds: SwitchThresholds = field(default_factory=SwitchThresholds)
    initial: PllState = PllState(2.0, 0.05)
    portrait: Optional[PortraitGrid] = None
    max_cycles: int = 2000
    seed: int = 0
    noise_enabled: bool = False
    fsm_exit_mode: str = "at_zero"
    sim: SimOptions = field(default_factory=SimOptions)
    design: DesignConfig = field(default_factory=DesignConfig)
    sweep: tuple[SweepAxis, ...] = ()
    cqlf_budget: int = 10_000
    out_dir: str = "swdpll-out"

    @property
    def loop(self) -> LoopConfig:
        return LoopConfig(self.circuit, self.gains)

    @property
    def sim_options(self) -> SimOptions:
        return replace(self.sim, fsm_exit="zero" if self.fsm_exit_mode == "at_zero" else "one")

    def validate(self) -> None:
        for section, obj in (("circuit", self.circuit), ("gains", self.gains), ("thresholds", self.thresholds)):
            _run_validator(section, obj.validate)
        if self.max_cycles < 1:
            raise ConfigError(EXIT_INVALID, "must be >= 1", "max_cycles")
        if self.fsm_exit_mode not in ("at_zero", "at_one"):
            raise ConfigError(EXIT_INVALID, "must be 'at_zero' or 'at_one'", "fsm_exit_mode")
        _run_validator("sim", self.sim.validate)
        if self.portrait is not None and not (self.portrait.phi and self.portrait.dphi_f):
            raise ConfigError(EXIT_INVALID, "grid must contain at least one start", "portrait")
        lo, hi = self.design.kd_residual
        if not 0 < lo < hi:
            raise ConfigError(EXIT_INVALID, "needs 0 < low < high", "design.kd_residual")
        for name in ("lti1", "lti2"):
            t = getattr(self.design, name)
            if t.tdc not in ("counter", "delayline"):
                raise ConfigError(EXIT_INVALID, "must be 'counter' or 'delayline'", f"design.{name}.tdc")
        for i, axis in enumerate(self.sweep):
            resolve_field(axis.field, f"sweep.axes[{i}].field")
            if not axis.values:
                raise ConfigError(EXIT_INVALID, "value list is empty", f"sweep.axes[{i}].values")
        if len(self.sweep) > 2:
            raise ConfigError(EXIT_INVALID, "at most two axes", "sweep.axes")


def _run_validator(section: str, fn) -> None:
    try:
        fn()
    except ValueError as exc:
        msg = str(exc)
        name = msg.split(" ", 1)[0]
        path = f"{section}.{name}" if name.isidentifier() else section
        raise ConfigError(EXIT_INVALID, msg, path) from None


SWEEP_SECTIONS = ("circuit", "gains", "thresholds")


def resolve_field(name: str, where: str = "field") -> tuple[str, str]:
    """Map ``gains.kp3n`` or a unique bare name like ``kp3n`` to (section, attribute)."""
    owners = {"circuit": CircuitParams, "gains": LoopGains, "thresholds": SwitchThresholds}
    if "." in name:
        section, attr = name.split(".", 1)
        if section in owners and attr in {f.name for f in fields(owners[section])}:
            return section, attr
    else:
        hits = [s for s in SWEEP_SECTIONS if name in {f.name for f in fields(owners[s])}]
        if len(hits) == 1:
            return hits[0], name
    raise ConfigError(EXIT_INVALID, f"unknown sweepable field {name!r}", where)


def with_field(cfg: RunConfig, name: str, value: float) -> RunConfig:
    section, attr = resolve_field(name)
    obj = getattr(cfg, section)
    if attr in ("kd_init", "beta"):
        value = int(value)
    return replace(cfg, **{section: replace(obj, **{attr: value})})


# ---------------------------------------------------------------- parsing


def _check_keys(obj: Any, allowed: set[str], path: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(EXIT_INVALID, "expected an object", path or "<root>")
    for k in obj:
        if k not in allowed:
            raise ConfigError(EXIT_INVALID, "unknown field", f"{path}.{k}" if path else k)
    return obj


def _num(v: Any, path: str, *, integer: bool = False, allow_none: bool = False):
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(EXIT_INVALID, f"expected a number, got {v!r}", path)
    if integer:
        if int(v) != v:
            raise ConfigError(EXIT_INVALID, f"expected an integer, got {v!r}", path)
        return int(v)
    if not math.isfinite(v):
        raise ConfigError(EXIT_INVALID, "must be finite", path)
    return float(v)


def _bool(v: Any, path: str) -> bool:
    if not isinstance(v, bool):
        raise ConfigError(EXIT_INVALID, f"expected true/false, got {v!r}", path)
    return v


def _dataclass_section(raw: Any, base, path: str, ints: tuple[str, ...] = (), optional: tuple[str, ...] = ()):
    names = {f.name for f in fields(base)}
    raw = _check_keys(raw, names, path)
    updates = {
        k: _num(v, f"{path}.{k}", integer=k in ints, allow_none=k in optional) for k, v in raw.items()
    }
    return replace(base, **updates)


def _axis_values(raw: Any, path: str) -> tuple[float, ...]:
    if isinstance(raw, list):
        return tuple(_num(v, f"{path}[{i}]") for i, v in enumerate(raw))
    spec = _check_keys(raw, {"min", "max", "n"}, path)
    missing = {"min", "max", "n"} - spec.keys()
    if missing:
        raise ConfigError(EXIT_INVALID, f"missing {sorted(missing)}", path)
    n = _num(spec["n"], f"{path}.n", integer=True)
    if n < 1:
        raise ConfigError(EXIT_INVALID, "must be >= 1", f"{path}.n")
    return tuple(float(v) for v in np.linspace(_num(spec["min"], f"{path}.min"), _num(spec["max"], f"{path}.max"), n))


def _design_target(raw: Any, base: DesignTarget, path: str) -> DesignTarget:
    raw = _check_keys(raw, {f.name for f in fields(DesignTarget)}, path)
    upd = {}
    for k, v in raw.items():
        if k == "tdc":
            if not isinstance(v, str):
                raise ConfigError(EXIT_INVALID, "expected a string", f"{path}.tdc")
            upd[k] = v
        else:
            upd[k] = _num(v, f"{path}.{k}", allow_none=k in ("kpfd", "omega_z"))
    return replace(base, **upd)


def _design(raw: Any, path: str = "design") -> DesignConfig:
    raw = _check_keys(raw, {"lti1", "lti2", "kd_residual", "kd_target", "bbpd_ratio"}, path)
    d = DesignConfig()
    upd = {}
    for name in ("lti1", "lti2"):
        if name in raw:
            upd[name] = _design_target(raw[name], getattr(d, name), f"{path}.{name}")
    if "kd_residual" in raw:
        r = raw["kd_residual"]
        if not isinstance(r, list) or len(r) != 2:
            raise ConfigError(EXIT_INVALID, "expected [low, high]", f"{path}.kd_residual")
        upd["kd_residual"] = tuple(_num(v, f"{path}.kd_residual[{i}]") for i, v in enumerate(r))
    if "kd_target" in raw:
        upd["kd_target"] = _num(raw["kd_target"], f"{path}.kd_target", allow_none=True)
    if "bbpd_ratio" in raw:
        upd["bbpd_ratio"] = _dataclass_section(raw["bbpd_ratio"], d.bbpd_ratio, f"{path}.bbpd_ratio")
    return replace(d, **upd)


def _sim(raw: Any, path: str = "sim") -> SimOptions:
    raw = _check_keys(raw, {"hold", "rearm", "force", "reset_ki_on_reversal", "divergence_limit", "stop_on_settle"}, path)
    upd = {}
    for k, v in raw.items():
        p = f"{path}.{k}"
        if k == "hold":
            upd[k] = _num(v, p, integer=True)
        elif k == "divergence_limit":
            upd[k] = _num(v, p)
        elif k == "force":
            if v is not None and v not in FORCE_CHOICES:
                raise ConfigError(EXIT_INVALID, f"must be null or one of {list(FORCE_CHOICES)}", p)
            upd[k] = v
        else:
            upd[k] = _bool(v, p)
    return replace(SimOptions(), **upd)


TOP_KEYS = {
    "schema_version", "circuit", "gains", "thresholds", "initial", "portrait", "max_cycles", "seed",
    "noise_enabled", "fsm_exit_mode", "sim", "design", "sweep", "verify", "output",
}


def config_from_dict(raw: Any) -> RunConfig:
    raw = _check_keys(raw, TOP_KEYS, "")
    if "schema_version" in raw and raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(EXIT_INVALID, f"unsupported version {raw['schema_version']!r}", "schema_version")
    cfg = RunConfig()
    upd: dict[str, Any] = {}
    if "circuit" in raw:
        upd["circuit"] = _dataclass_section(raw["circuit"], cfg.circuit, "circuit")
    if "gains" in raw:
        upd["gains"] = _dataclass_section(raw["gains"], cfg.gains, "gains", ints=("kd_init", "beta"))
    if "thresholds" in raw:
        upd["thresholds"] = _dataclass_section(raw["thresholds"], cfg.thresholds, "thresholds")
    if "initial" in raw:
        init = _check_keys(raw["initial"], {"phi", "dphi_f"}, "initial")
        upd["initial"] = PllState(
            _num(init.get("phi", cfg.initial.phi), "initial.phi"),
            _num(init.get("dphi_f", cfg.initial.dphi_f), "initial.dphi_f"),
        )
    if raw.get("portrait") is not None:
        grid = _check_keys(raw["portrait"], {"phi", "dphi_f"}, "portrait")
        for k in ("phi", "dphi_f"):
            if k not in grid:
                raise ConfigError(EXIT_INVALID, "missing axis", f"portrait.{k}")
        upd["portrait"] = PortraitGrid(_axis_values(grid["phi"], "portrait.phi"), _axis_values(grid["dphi_f"], "portrait.dphi_f"))
    if "max_cycles" in raw:
        upd["max_cycles"] = _num(raw["max_cycles"], "max_cycles", integer=True)
    if "seed" in raw:
        upd["seed"] = _num(raw["seed"], "seed", integer=True)
    if "noise_enabled" in raw:
        upd["noise_enabled"] = _bool(raw["noise_enabled"], "noise_enabled")
    if "fsm_exit_mode" in raw:
        upd["fsm_exit_mode"] = raw["fsm_exit_mode"]
    if "sim" in raw:
        upd["sim"] = _sim(raw["sim"])
    if "design" in raw:
        upd["design"] = _design(raw["design"])
    if "sweep" in raw:
        sw = _check_keys(raw["sweep"], {"axes"}, "sweep")
        axes = sw.get("axes", [])
        if not isinstance(axes, list):
            raise ConfigError(EXIT_INVALID, "expected a list", "sweep.axes")
        parsed = []
        for i, a in enumerate(axes):
            a = _check_keys(a, {"field", "values"}, f"sweep.axes[{i}]")
            if not isinstance(a.get("field"), str):
                raise ConfigError(EXIT_INVALID, "expected a field name", f"sweep.axes[{i}].field")
            vals = a.get("values", [])
            if not isinstance(vals, list):
                raise ConfigError(EXIT_INVALID, "expected a list", f"sweep.axes[{i}].values")
            parsed.append(SweepAxis(a["field"], tuple(_num(v, f"sweep.axes[{i}].values[{j}]") for j, v in enumerate(vals))))
        upd["sweep"] = tuple(parsed)
    if "verify" in raw:
        ver = _check_keys(raw["verify"], {"cqlf_budget"}, "verify")
        if "cqlf_budget" in ver:
            upd["cqlf_budget"] = _num(ver["cqlf_budget"], "verify.cqlf_budget", integer=True)
    if "output" in raw:
        out = _check_keys(raw["output"], {"dir"}, "output")
        if "dir" in out:
            if not isinstance(out["dir"], str):
                raise ConfigError(EXIT_INVALID, "expected a path string", "output.dir")
            upd["out_dir"] = out["dir"]
    cfg = replace(cfg, **upd)
    cfg.validate()
    return cfg


def _decode(text: str, source: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(EXIT_PARSE, f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def load_config(path) -> RunConfig:
    """Parse and validate a config file; ``table4-defaults`` names the bundled one."""
    if str(path) == DEFAULTS_NAME:
        return config_from_dict(_decode(bundled_defaults_text(), DEFAULTS_NAME))
    p = Path(path)
    if not p.is_file():
        raise ConfigError(EXIT_MISSING, f"config file not found: {p}")
    try:
        text = p.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(EXIT_PARSE, f"{p}: not UTF-8 text ({exc.reason})") from None
    return config_from_dict(_decode(text, str(p)))


def bundled_defaults_text() -> str:
    return resources.files("swdpll").joinpath("data", f"{DEFAULTS_NAME}.json").read_text(encoding="utf-8")
