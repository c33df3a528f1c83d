"""Plant simulation, scenario presets and closed-loop experiments."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .hankel import Dataset, DimensionError
from .robust import Box, ControlInfeasibleError, ObjectiveSpec

log = logging.getLogger(__name__)

__all__ = [
    "Metrics",
    "PlantModel",
    "Realization",
    "RunLog",
    "Scenario",
    "Warmup",
    "collect_warmup",
    "compute_metrics",
    "horizon_sets",
    "plant_step",
    "preset",
    "rc_multizone",
    "read_log",
    "realize",
    "run_closed_loop",
    "synthetic_weather",
    "violation_rate",
    "write_log",
]


@dataclass(frozen=True)
class PlantModel:
    """``x+ = A_i x + B u + E w``, ``y = C x + D u``, with ``A_i = A + a sin(i pi / p) I``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    drift_amplitude: float = 0.0
    drift_period: float = 336.0
    name: str = "custom"

    def __post_init__(self):
        A, B, C, D, E = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (self.A, self.B, self.C, self.D, self.E))
        n_x = A.shape[0]
        if A.shape != (n_x, n_x) or B.shape[0] != n_x or E.shape[0] != n_x or C.shape[1] != n_x:
            raise DimensionError("plant matrices have inconsistent shapes")
        if D.shape != (C.shape[0], B.shape[1]):
            raise DimensionError(f"D has shape {D.shape}, expected {(C.shape[0], B.shape[1])}")
        for name, m in zip("ABCDE", (A, B, C, D, E)):
            m.setflags(write=False)
            object.__setattr__(self, name, m)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_w(self) -> int:
        return self.E.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    def A_at(self, i: int) -> np.ndarray:
        if self.drift_amplitude == 0.0:
            return self.A
        return self.A + self.drift_amplitude * np.sin(i * np.pi / self.drift_period) * np.eye(self.n_x)

    def spectral_radius_bound(self) -> float:
        """Largest spectral radius over the drift range."""
        a = self.drift_amplitude
        return max(max(abs(np.linalg.eigvals(self.A + s * np.eye(self.n_x)))) for s in np.linspace(-a, a, 9))


def plant_step(model: PlantModel, i: int, x, u, w, rng=None, noise_std=0.0, v=None):
    """Advance one step.

    Measurement noise is ``v`` if given, else ``noise_std * N(0, I)`` drawn
    from ``rng`` (zero when ``noise_std`` is 0).

    Returns:
        ``(x_next, y_measured, y_true)``.
    """
    x, u, w = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (x, u, w))
    if x.shape != (model.n_x,) or u.shape != (model.n_u,) or w.shape != (model.n_w,):
        raise DimensionError("state, input or disturbance has the wrong size")
    y_true = model.C @ x + model.D @ u
    if v is None:
        std = np.broadcast_to(np.asarray(noise_std, dtype=float), (model.n_y,))
        v = std * rng.standard_normal(model.n_y) if np.any(std > 0) else np.zeros(model.n_y)
    x_next = model.A_at(i) @ x + model.B @ u + model.E @ w
    return x_next, y_true + v, y_true


# ---------------------------------------------------------------- presets

_A2 = np.array([[0.9535, 0.0761], [-0.8454, 0.5478]])
_B2 = np.array([[0.0465], [0.8454]])
_C2 = np.array([[1.0, 0.0]])

#: Thermal constants of the RC stand-in model.
RC_ZONE_CAPACITY = (6000.0, 2500.0, 2500.0, 3000.0)  # kJ/K
RC_EXT_WALL_CAPACITY = 8000.0  # kJ/K
RC_INT_WALL_CAPACITY = 4000.0  # kJ/K
RC_EXT_HALF_RESISTANCE = 4.0  # K/kW, node to wall core
RC_INT_HALF_RESISTANCE = 2.0  # K/kW
RC_WINDOW_AREA = (20.0, 8.0, 8.0, 10.0)  # m^2
RC_SHGC = 0.5
RC_WINDOW_RESISTANCE = 12.0  # K/kW, direct glazing loss per zone
RC_STEP_SECONDS = 900.0
# walls as (node a, node b); node -1 is outdoors
RC_WALLS = ((0, -1), (1, -1), (2, -1), (3, -1), (0, 1), (0, 2), (1, 2), (1, 3), (2, 3))
# heater i serves these zones with equal split
RC_HEATERS = ((0, 1), (2, 3))


def rc_multizone(step_seconds: float = RC_STEP_SECONDS) -> PlantModel:
    """Four-zone RC thermal network: 4 zone + 9 wall temperatures.

    Inputs are two heaters in kW, disturbances are the outdoor temperature
    in deg C and global radiation in W/m^2, outputs are zone temperatures.
    Each wall is a capacitance joined to its two sides by half resistances;
    windows add a direct zone-to-outdoor conductance and solar gain
    ``SHGC * area * radiation``.
    """
    n_z, n_wall = 4, len(RC_WALLS)
    n_x = n_z + n_wall
    cap = np.concatenate([RC_ZONE_CAPACITY, [RC_EXT_WALL_CAPACITY if b < 0 else RC_INT_WALL_CAPACITY for _, b in RC_WALLS]])
    G = np.zeros((n_x, n_x))  # conductance Laplacian among states
    g_out = np.zeros(n_x)  # conductance to outdoors
    for k, (a, b) in enumerate(RC_WALLS):
        node = n_z + k
        r = RC_EXT_HALF_RESISTANCE if b < 0 else RC_INT_HALF_RESISTANCE
        for side in (a, b):
            if side < 0:
                g_out[node] += 1.0 / r
            else:
                G[node, side] += 1.0 / r
                G[side, node] += 1.0 / r
    g_out[:n_z] += 1.0 / RC_WINDOW_RESISTANCE
    Ac = (G - np.diag(G.sum(axis=1) + g_out)) / cap[:, None]
    Bc = np.zeros((n_x, len(RC_HEATERS)))
    for h, zones in enumerate(RC_HEATERS):
        for z in zones:
            Bc[z, h] = 1.0 / len(zones) / cap[z]
    Ec = np.zeros((n_x, 2))
    Ec[:, 0] = g_out / cap
    Ec[:n_z, 1] = RC_SHGC * np.asarray(RC_WINDOW_AREA) * 1e-3 / cap[:n_z]
    # zero-order hold via the augmented exponential
    n_in = Bc.shape[1] + Ec.shape[1]
    M = np.zeros((n_x + n_in, n_x + n_in))
    M[:n_x, :n_x] = Ac
    M[:n_x, n_x:] = np.hstack([Bc, Ec])
    Md = expm(M * step_seconds)
    Ad, BEd = Md[:n_x, :n_x], Md[:n_x, n_x:]
    C = np.hstack([np.eye(n_z), np.zeros((n_z, n_wall))])
    return PlantModel(Ad, BEd[:, :2], C, np.zeros((n_z, 2)), BEd[:, 2:], name="rc_multizone")


def preset(name: str) -> PlantModel:
    if name == "second_order_lti":
        model = PlantModel(_A2, _B2, _C2, np.zeros((1, 1)), _B2, name=name)
    elif name == "second_order_ltv":
        model = PlantModel(_A2, _B2, _C2, np.zeros((1, 1)), _B2, drift_amplitude=0.02, drift_period=336.0, name=name)
    elif name == "rc_multizone":
        model = rc_multizone()
    else:
        raise ValueError(f"unknown preset {name!r}; choose second_order_lti, second_order_ltv or rc_multizone")
    rho = model.spectral_radius_bound()
    if rho >= 1.0:
        raise ValueError(f"preset {name} is not stable over its drift range (spectral radius {rho:.4f})")
    return model


# ---------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class Scenario:
    """Everything that fixes the realized noise and the constraint schedule.

    Disturbances are either ``uniform`` (i.i.d. in ``±w_amplitude``, forecast
    zero) or ``weather`` (synthetic outdoor temperature and radiation with a
    forecast error inside the tube). The reference is a square wave between
    ``ref_low`` and ``ref_high`` spending ``ref_duty`` of each period high.
    Warm-up inputs are uniform over U except for the last ``n_settle``
    samples, which hold the box centre so the loop starts near rest.
    """

    preset: str = "second_order_lti"
    n_warmup: int = 60
    n_steps: int = 100
    noise_std: float = 0.0
    w_source: str = "uniform"
    w_amplitude: float = 1.0
    w_tube: tuple = (1.0,)
    consistent_forecast: bool = True
    u_lower: tuple = (-10.0,)
    u_upper: tuple = (10.0,)
    y_lower: tuple = (-2.0,)
    y_upper: tuple = (0.5,)
    night_setback: float = 0.0
    ref_low: float = -1.0
    ref_high: float = 0.6
    ref_period: int = 50
    ref_duty: float = 0.38
    warmup_input_scale: float = 1.0
    n_settle: int = 10
    x0: float = 0.0

    def __post_init__(self):
        if self.n_steps < 1 or self.n_warmup < 1:
            raise ValueError("n_steps and n_warmup must be positive")
        if not 0 <= self.n_settle < self.n_warmup:
            raise ValueError("n_settle must lie in [0, n_warmup)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.w_source not in ("uniform", "weather"):
            raise ValueError(f"unknown w_source {self.w_source!r}")
        if not 0.0 <= self.ref_duty <= 1.0 or self.ref_period < 1:
            raise ValueError("reference duty must lie in [0, 1] and period be positive")
        Box(self.u_lower, self.u_upper)
        Box(self.y_lower, self.y_upper)

    @property
    def u_box(self) -> Box:
        return Box(self.u_lower, self.u_upper)

    @property
    def w_box(self) -> Box:
        return Box.symmetric(self.w_tube)

    def y_box_at(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Output bounds at closed-loop step k (15-minute clock for setbacks)."""
        lo = np.asarray(self.y_lower, dtype=float)
        hi = np.asarray(self.y_upper, dtype=float)
        if self.night_setback:
            hour = (k % 96) / 4.0
            if hour < 6.0 or hour >= 22.0:
                lo = lo - self.night_setback
        return lo, hi

    def reference_at(self, k: int, n_y: int) -> np.ndarray:
        high = (k % self.ref_period) < self.ref_duty * self.ref_period
        return np.full(n_y, self.ref_high if high else self.ref_low)


@dataclass
class Realization:
    """Pre-drawn random streams of one Monte-Carlo seed, shared by all controllers."""

    w: np.ndarray
    w_forecast: np.ndarray
    v: np.ndarray
    u_warmup: np.ndarray
    excitation_seed: int


def realize(scenario: Scenario, model: PlantModel, seed: int, n_h: int) -> Realization:
    ss = np.random.SeedSequence(seed)
    s_u, s_w, s_v, s_f, s_e = (np.random.Generator(np.random.Philox(c)) for c in ss.spawn(5))
    n_total = scenario.n_warmup + scenario.n_steps + n_h
    tube = np.broadcast_to(np.asarray(scenario.w_tube, dtype=float), (model.n_w,))
    if scenario.w_source == "uniform":
        amp = np.broadcast_to(np.asarray(scenario.w_amplitude, dtype=float), (model.n_w,))
        w = s_w.uniform(-amp, amp, size=(n_total, model.n_w))
        w_fc = np.zeros_like(w)
    else:
        w = synthetic_weather(n_total, s_w)[:, : model.n_w]
        err = s_f.uniform(-0.5, 0.5, size=w.shape) * tube
        w_fc = w + err
    if scenario.consistent_forecast and np.any(np.abs(w - w_fc) > tube + 1e-12):
        raise ValueError("realized disturbance leaves the forecast tube; widen w_tube")
    v = scenario.noise_std * s_v.standard_normal((n_total, model.n_y))
    u_box = scenario.u_box
    mid, half = u_box.center, u_box.half_width * scenario.warmup_input_scale
    u_w = s_u.uniform(mid - half, mid + half, size=(scenario.n_warmup, model.n_u))
    # let the plant settle at the box centre before closing the loop
    if scenario.n_settle:
        u_w[-scenario.n_settle :] = mid
    e_seed = int(s_e.integers(0, 2**63 - 1))
    return Realization(w, w_fc, v, u_w, e_seed)


def synthetic_weather(n: int, rng, step_hours: float = 0.25) -> np.ndarray:
    """Outdoor temperature (diurnal sine plus a bounded random walk) and radiation.

    Returns array (n, 2): deg C and W/m^2.
    """
    hours = np.arange(n) * step_hours
    phase = 2.0 * np.pi * (hours - 9.0) / 24.0
    walk = np.cumsum(rng.uniform(-0.1, 0.1, n))
    walk = np.clip(walk, -3.0, 3.0)
    temp = 5.0 + 5.0 * np.sin(phase) + walk
    sun = np.maximum(0.0, np.sin(2.0 * np.pi * (hours - 6.0) / 24.0))
    cloud = np.clip(1.0 - 0.3 * rng.uniform(0.0, 1.0, n), 0.0, 1.0)
    rad = 600.0 * sun * cloud
    return np.column_stack([temp, rad])


# ---------------------------------------------------------------- closed loop


@dataclass
class RunLog:
    """Per-step closed-loop record of one run."""

    mode: list = field(default_factory=list)
    excited: list = field(default_factory=list)
    u: list = field(default_factory=list)
    w: list = field(default_factory=list)
    y_true: list = field(default_factory=list)
    y_meas: list = field(default_factory=list)
    y_lo: list = field(default_factory=list)
    y_hi: list = field(default_factory=list)
    y_ref: list = field(default_factory=list)
    solve_ms: list = field(default_factory=list)
    status: str = "ok"
    message: str = ""
    u_data: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.u)

    def arrays(self) -> dict:
        return {k: np.array(getattr(self, k), dtype=float) for k in ("u", "w", "y_true", "y_meas", "y_lo", "y_hi", "y_ref")}


@dataclass(frozen=True)
class Metrics:
    violation_rate: float
    channel_violation_rate: tuple
    energy: float
    mean_output: tuple
    max_output: tuple
    mean_abs_tracking_error: float
    runs: int
    steps: int
    aborted: int = 0

    def as_dict(self) -> dict:
        return {
            "violation_rate": self.violation_rate,
            "channel_violation_rate": list(self.channel_violation_rate),
            "energy_mean": self.energy,
            "mean_output": list(self.mean_output),
            "max_output": list(self.max_output),
            "mean_abs_tracking_error": self.mean_abs_tracking_error,
            "runs": self.runs,
            "steps": self.steps,
            "aborted": self.aborted,
        }


def _violations(y, lo, hi) -> np.ndarray:
    """Per-step, per-channel violation flags; bounds are closed."""
    y, lo, hi = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (y, lo, hi))
    return (y < lo) | (y > hi)


def violation_rate(logs: list, schedule=None) -> float:
    """Steps with any output outside its box, over steps times runs.

    Each log is a :class:`RunLog` (its own bounds are used) or an array of
    outputs, in which case ``schedule`` gives ``(lo, hi)`` arrays.
    """
    if not logs:
        raise ValueError("no logs given")
    count, total = 0, 0
    for lg in logs:
        if isinstance(lg, RunLog):
            a = lg.arrays()
            flags = _violations(a["y_true"], a["y_lo"], a["y_hi"])
        else:
            lo, hi = schedule
            flags = _violations(np.asarray(lg, dtype=float).reshape(len(lg), -1), lo, hi)
        count += int(np.sum(np.any(flags, axis=1)))
        total += flags.shape[0]
    return count / total if total else 0.0


def compute_metrics(logs: list) -> Metrics:
    ys, flags, energy, err = [], [], [], []
    for lg in logs:
        a = lg.arrays()
        if len(lg) == 0:
            continue
        ys.append(a["y_true"])
        flags.append(_violations(a["y_true"], a["y_lo"], a["y_hi"]))
        energy.append(np.abs(a["u"]).sum(axis=1))
        err.append(np.abs(a["y_true"] - a["y_ref"]))
    aborted = sum(lg.status != "ok" for lg in logs)
    if not ys:
        return Metrics(0.0, (), 0.0, (), (), 0.0, len(logs), 0, aborted)
    Y, F = np.vstack(ys), np.vstack(flags)
    return Metrics(
        violation_rate=float(np.mean(np.any(F, axis=1))),
        channel_violation_rate=tuple(float(v) for v in F.mean(axis=0)),
        energy=float(np.mean(np.concatenate(energy))),
        mean_output=tuple(float(v) for v in Y.mean(axis=0)),
        max_output=tuple(float(v) for v in Y.max(axis=0)),
        mean_abs_tracking_error=float(np.mean(np.vstack(err))),
        runs=len(logs),
        steps=int(F.shape[0]),
        aborted=aborted,
    )


@dataclass
class Warmup:
    """Plant state and data after the open-loop warm-up of one seed."""

    model: PlantModel
    realization: Realization
    x: np.ndarray
    u: list
    w: list
    y: list
    dataset: Dataset


def collect_warmup(scenario: Scenario, seed: int, n_h: int, capacity: int | None = None) -> Warmup:
    model = preset(scenario.preset)
    rz = realize(scenario, model, seed, n_h)
    x = np.full(model.n_x, scenario.x0)
    us, ws, ys = [], [], []
    for i in range(scenario.n_warmup):
        u = rz.u_warmup[i]
        x, y_m, _ = plant_step(model, i, x, u, rz.w[i], v=rz.v[i])
        us.append(u)
        ws.append(rz.w[i])
        ys.append(y_m)
    cap = capacity or scenario.n_warmup
    ds = Dataset(np.array(us), np.array(ws), np.array(ys), cap)
    return Warmup(model, rz, x, us, ws, ys, ds)


def horizon_sets(scenario: Scenario, model: PlantModel, k: int, n_h: int) -> tuple[Box, np.ndarray]:
    """Stacked output box and reference over the horizon starting at step k."""
    n_y = model.n_y
    bounds = [scenario.y_box_at(k + j) for j in range(n_h)]
    lo = np.concatenate([b[0] for b in bounds])
    hi = np.concatenate([b[1] for b in bounds])
    if not np.any(model.D):
        # the current output is already fixed by the past inputs
        lo[:n_y], hi[:n_y] = -np.inf, np.inf
    ref = np.concatenate([scenario.reference_at(k + j, n_y) for j in range(n_h)])
    return Box(lo, hi), ref


def run_closed_loop(scenario: Scenario, make_controller, seed: int, n_h: int, t_init: int,
                    objective: ObjectiveSpec, capacity: int | None = None) -> RunLog:
    """Warm-up data collection followed by the receding-horizon loop.

    Args:
        make_controller: ``f(dataset, excitation_seed) -> controller`` with
            ``step(history, w_bar, y_box, objective)`` and ``observe(u, w, y)``.
        objective: Cost template; its reference is replaced by the scenario's.
        capacity: Dataset capacity; defaults to the warm-up length.

    On controller infeasibility the run stops and the log is marked aborted.
    """
    wu = collect_warmup(scenario, seed, n_h, capacity)
    model, rz, x, us, ws, ys, ds = wu.model, wu.realization, wu.x, wu.u, wu.w, wu.y, wu.dataset
    n_y = model.n_y
    ctrl = make_controller(ds, rz.excitation_seed)
    log_ = RunLog()
    for k in range(scenario.n_steps):
        i = scenario.n_warmup + k
        hist = (np.array(ys[-t_init:]).ravel(), np.array(us[-t_init:]).ravel(), np.array(ws[-t_init:]).ravel())
        w_bar = rz.w_forecast[i : i + n_h]
        y_box, ref = horizon_sets(scenario, model, k, n_h)
        obj = ObjectiveSpec(objective.kind, ref, objective.q, objective.r, objective.k_reg)
        try:
            u, info = ctrl.step(hist, w_bar, y_box, obj)
        except ControlInfeasibleError as exc:
            log_.status, log_.message = "aborted", f"step {k}: {exc}"
            log.info("run aborted at step %d: %s", k, exc)
            break
        x, y_m, y_t = plant_step(model, i, x, u, rz.w[i], v=rz.v[i])
        ctrl.observe(u, rz.w[i], y_m)
        us.append(u)
        ws.append(rz.w[i])
        ys.append(y_m)
        lo_k, hi_k = scenario.y_box_at(k)
        log_.mode.append(info.mode)
        log_.excited.append(int(info.excited))
        log_.u.append(np.array(u, dtype=float))
        log_.w.append(rz.w[i].copy())
        log_.y_true.append(y_t)
        log_.y_meas.append(y_m)
        log_.y_lo.append(lo_k)
        log_.y_hi.append(hi_k)
        log_.y_ref.append(scenario.reference_at(k, n_y))
        log_.solve_ms.append(info.solve_ms)
    data = getattr(ctrl, "dataset", None)
    log_.u_data = None if data is None else np.array(data.u)
    return log_


# ---------------------------------------------------------------- CSV logs


def _header(n_u, n_w, n_y):
    cols = ["step", "mode", "excited"]
    cols += [f"u_{i + 1}" for i in range(n_u)] + [f"w_{i + 1}" for i in range(n_w)]
    cols += [f"y_true_{i + 1}" for i in range(n_y)] + [f"y_meas_{i + 1}" for i in range(n_y)]
    cols += [f"ybox_lo_{i + 1}" for i in range(n_y)] + [f"ybox_hi_{i + 1}" for i in range(n_y)]
    cols += [f"yref_{i + 1}" for i in range(n_y)]
    return cols


def write_log(lg: RunLog, path, n_u: int, n_w: int, n_y: int, timing_path=None) -> None:
    """Trajectory CSV; wall-clock solve times go to ``timing_path`` so the
    trajectory file is reproducible byte for byte."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(_header(n_u, n_w, n_y))
        a = lg.arrays()
        for k in range(len(lg)):
            vals = np.concatenate([a["u"][k], a["w"][k], a["y_true"][k], a["y_meas"][k], a["y_lo"][k], a["y_hi"][k], a["y_ref"][k]])
            wr.writerow([k, lg.mode[k], lg.excited[k]] + [repr(float(v)) for v in vals])
    if timing_path is not None:
        with open(timing_path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["step", "solve_ms"])
            for k, ms in enumerate(lg.solve_ms):
                wr.writerow([k, f"{ms:.3f}"])


def read_log(path) -> RunLog:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]

    def cols(prefix):
        return [i for i, h in enumerate(header) if h.startswith(prefix)]

    lg = RunLog()
    for r in body:
        lg.mode.append(r[1])
        lg.excited.append(int(r[2]))
        for attr, pre in (("u", "u_"), ("w", "w_"), ("y_true", "y_true_"), ("y_meas", "y_meas_"),
                          ("y_lo", "ybox_lo_"), ("y_hi", "ybox_hi_"), ("y_ref", "yref_")):
            getattr(lg, attr).append(np.array([float(r[i]) for i in cols(pre)]))
    return lg
