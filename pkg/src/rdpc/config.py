"""Experiment configuration: flat ``key = value`` text with dotted sections.

Example::

    # comment
    scenario.preset = "second_order_lti"
    scenario.noise_std = 0.02
    [controller]
    type = "bilevel_robust"
    t_init = 4

Values are JSON (numbers, strings, lists, true/false, null); bare words are
read as strings. ``[section]`` headers prefix the keys that follow.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .robust import Box
from .sim import Scenario

__all__ = [
    "BUILTIN_CONFIGS",
    "ConfigError",
    "ControllerSpec",
    "ExcitationSpec",
    "ExperimentConfig",
    "RunSpec",
    "load_config",
    "parse_config_text",
]

CONTROLLER_TYPES = ("bilevel_robust", "bilevel_nonrobust", "single_level", "rls_mpc")


class ConfigError(ValueError):
    """Invalid configuration; the message names the field and the rule."""


@dataclass(frozen=True)
class ControllerSpec:
    type: str = "bilevel_robust"
    t_init: int = 4
    n_h: int = 10
    eg_kind: str = "noise"
    eg_value: float = 1e-3
    eg_first: float = 0.2
    eg_last: float = 0.02
    tinit_exponent: int = 2
    online_update: bool = False
    objective: str = "tracking"
    q: float = 10.0
    r: float = 0.1
    k_reg: float = 1e-6
    eta_g: float = 1.0
    eta_sigma: float = 1e3
    rls_lambda: float = 0.98
    rls_p0: float = 1e3


@dataclass(frozen=True)
class ExcitationSpec:
    enabled: bool = False
    ue_lower: tuple = (0.0,)
    ue_upper: tuple = (0.1,)
    pe_tolerance: float | None = None
    use_exact_rank: bool = False
    freeze_on_nonpe: bool = False


@dataclass(frozen=True)
class RunSpec:
    seed: int = 0
    mc: int = 1
    capacity: int | None = None
    infeasible: str = "abort"
    slack_penalty: float = 1e4


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario = field(default_factory=Scenario)
    controller: ControllerSpec = field(default_factory=ControllerSpec)
    excitation: ExcitationSpec = field(default_factory=ExcitationSpec)
    run: RunSpec = field(default_factory=RunSpec)

    @property
    def seeds(self) -> list[int]:
        return [self.run.seed + k for k in range(self.run.mc)]

    def to_dict(self) -> dict:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in _SECTIONS}

    def config_hash(self) -> str:
        return _sha(self.to_dict())

    def scenario_hash(self) -> str:
        """Identifies the realized noise: scenario fields plus the seed list."""
        return _sha({"scenario": self.to_dict()["scenario"], "seeds": self.seeds})

    def with_overrides(self, pairs: dict) -> ExperimentConfig:
        flat = _flatten(self.to_dict())
        for key, value in pairs.items():
            key = key if "." in key else f"controller.{key}"
            if key not in flat:
                raise ConfigError(f"unknown key {key!r}")
            flat[key] = value
        return _build(flat)


_SECTIONS = {"scenario": Scenario, "controller": ControllerSpec, "excitation": ExcitationSpec, "run": RunSpec}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _sha(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _flatten(d: dict) -> dict:
    return {f"{sec}.{k}": v for sec, body in d.items() for k, v in body.items()}


def _coerce(key: str, default, value):
    """Convert a parsed value to the type of the field default."""
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        seq = value if isinstance(value, (list, tuple)) else [value]
        try:
            return tuple(float(v) for v in seq)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a list of numbers, got {value!r}") from None
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


_OPTIONAL_NUMBERS = {"excitation.pe_tolerance": float, "run.capacity": int}


def _build(flat: dict) -> ExperimentConfig:
    parts = {}
    for sec, cls in _SECTIONS.items():
        proto = cls()
        kw = {}
        for f in fields(cls):
            key = f"{sec}.{f.name}"
            if key not in flat:
                continue
            value = flat[key]
            if key in _OPTIONAL_NUMBERS and value is not None:
                kind = _OPTIONAL_NUMBERS[key]
                try:
                    value = kind(value)
                except (TypeError, ValueError):
                    raise ConfigError(f"{key}: expected a number or null, got {value!r}") from None
            else:
                value = _coerce(key, getattr(proto, f.name), value)
            kw[f.name] = value
        try:
            parts[sec] = cls(**kw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{sec}: {exc}") from None
    unknown = sorted(set(flat) - {f"{s}.{f.name}" for s, c in _SECTIONS.items() for f in fields(c)})
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}")
    cfg = ExperimentConfig(**parts)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    c, e, r, s = cfg.controller, cfg.excitation, cfg.run, cfg.scenario
    if c.type not in CONTROLLER_TYPES:
        raise ConfigError(f"controller.type: must be one of {', '.join(CONTROLLER_TYPES)}")
    if c.t_init < 1 or c.n_h < 1:
        raise ConfigError("controller.t_init and controller.n_h must be positive")
    if c.eg_kind not in ("constant", "linear", "noise"):
        raise ConfigError("controller.eg_kind: must be constant, linear or noise")
    if c.eg_kind == "constant" and c.eg_value <= 0:
        raise ConfigError("controller.eg_value: must be > 0")
    if c.eg_kind == "linear" and (min(c.eg_first, c.eg_last) <= 0 or c.eg_last > c.eg_first):
        raise ConfigError("controller.eg_first/eg_last: must be > 0 and non-increasing")
    if c.tinit_exponent not in (1, 2):
        raise ConfigError("controller.tinit_exponent: must be 1 or 2")
    if c.objective not in ("tracking", "energy"):
        raise ConfigError("controller.objective: must be tracking or energy")
    if min(c.q, c.r, c.k_reg, c.eta_g, c.eta_sigma) < 0:
        raise ConfigError("controller weights must be nonnegative")
    if not 0 < c.rls_lambda <= 1:
        raise ConfigError("controller.rls_lambda: must lie in (0, 1]")
    if r.mc < 1:
        raise ConfigError("run.mc: must be at least 1")
    if r.infeasible not in ("abort", "relax"):
        raise ConfigError("run.infeasible: must be abort or relax")
    cap = r.capacity if r.capacity is not None else s.n_warmup
    if cap < c.t_init + c.n_h or cap > s.n_warmup:
        raise ConfigError("run.capacity: must lie between t_init + n_h and scenario.n_warmup")
    if e.enabled:
        try:
            ue = Box(e.ue_lower, e.ue_upper)
        except ValueError as exc:
            raise ConfigError(f"excitation.ue_lower/ue_upper: {exc}") from None
        u = s.u_box
        if ue.dim != u.dim or (ue.lower < u.lower).any() or (ue.upper > u.upper).any():
            raise ConfigError("excitation.ue_lower/ue_upper: excitation box must lie inside the input box")
        if ((u.upper - ue.upper) - (u.lower - ue.lower) <= 0).all():
            raise ConfigError("excitation: input box minus excitation box is a single point")
        if e.pe_tolerance is not None and e.pe_tolerance < 0:
            raise ConfigError("excitation.pe_tolerance: must be nonnegative")


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    flat = _flatten((base or ExperimentConfig()).to_dict())
    section = ""
    seen = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        key = f"{section}.{key}" if section else key
        if key not in flat:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        seen[key] = parse_value(value)
    flat.update(seen)
    return _build(flat)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(name_or_path) -> ExperimentConfig:
    """Load a built-in config by name, a ``key = value`` file, or a run manifest."""
    if str(name_or_path) in BUILTIN_CONFIGS:
        return parse_config_text(BUILTIN_CONFIGS[str(name_or_path)])
    path = Path(name_or_path)
    if not path.is_file():
        raise FileNotFoundError(f"config {name_or_path!s} is neither a built-in name nor a file")
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
        data = data.get("config", data)
        return _build(_flatten(data))
    return parse_config_text(text)


BUILTIN_CONFIGS = {
    # second-order plant tracking a square wave that pushes into the upper bound
    "lti_tracking": """
        scenario.preset = "second_order_lti"
        scenario.n_warmup = 60
        scenario.n_settle = 10
        scenario.n_steps = 100
        scenario.noise_std = 0.0208
        scenario.w_amplitude = 1.0
        scenario.w_tube = [1.0]
        scenario.u_lower = [-10]
        scenario.u_upper = [10]
        scenario.y_lower = [-2]
        scenario.y_upper = [0.5]
        controller.type = "bilevel_robust"
        controller.t_init = 4
        controller.n_h = 10
        controller.eg_kind = "noise"
        run.mc = 50
        run.infeasible = "relax"
    """,
    # zero demand: the optimal input is zero and excitation keeps data informative
    "equilibrium": """
        scenario.preset = "second_order_lti"
        scenario.n_warmup = 60
        scenario.n_settle = 0
        scenario.n_steps = 300
        scenario.noise_std = 0.0
        scenario.w_amplitude = 0.2
        scenario.w_tube = [0.2]
        scenario.u_lower = [0]
        scenario.u_upper = [1.5]
        scenario.y_lower = [-50]
        scenario.y_upper = [50]
        scenario.ref_low = 0
        scenario.ref_high = 0
        controller.type = "bilevel_robust"
        controller.t_init = 4
        controller.n_h = 10
        controller.eg_kind = "constant"
        controller.eg_value = 0.001
        controller.online_update = true
        controller.objective = "energy"
        controller.q = 0
        controller.r = 0
        excitation.enabled = true
        excitation.ue_lower = [0]
        excitation.ue_upper = [0.1]
        run.mc = 1
    """,
    # slowly drifting plant, recent data preferred through decreasing weights
    "ltv_tracking": """
        scenario.preset = "second_order_ltv"
        scenario.n_warmup = 60
        scenario.n_steps = 200
        scenario.noise_std = 0.0208
        controller.type = "bilevel_robust"
        controller.t_init = 4
        controller.n_h = 10
        controller.eg_kind = "linear"
        controller.eg_first = 0.2
        controller.eg_last = 0.02
        controller.online_update = true
        run.mc = 10
        run.infeasible = "relax"
    """,
    # four-zone thermal stand-in with synthetic weather and a night setback
    "multizone": """
        scenario.preset = "rc_multizone"
        scenario.n_warmup = 200
        scenario.n_settle = 0
        scenario.n_steps = 96
        scenario.noise_std = 0.05
        scenario.w_source = "weather"
        scenario.w_tube = [1.0, 50.0]
        scenario.u_lower = [0, 0]
        scenario.u_upper = [10, 10]
        scenario.y_lower = [20, 20, 20, 20]
        scenario.y_upper = [25, 25, 25, 25]
        scenario.night_setback = 4
        scenario.x0 = 21
        scenario.ref_low = 21
        scenario.ref_high = 21
        controller.type = "bilevel_robust"
        controller.t_init = 5
        controller.n_h = 8
        controller.eg_kind = "linear"
        controller.eg_first = 0.2
        controller.eg_last = 0.02
        controller.objective = "energy"
        controller.q = 0
        controller.r = 0
        run.mc = 1
        run.infeasible = "relax"
    """,
}
