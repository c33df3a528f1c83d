"""Active excitation and the receding-horizon data-driven controller.

When the nominal plan is (near) zero, new data would stop being
persistently exciting. The controller then reserves part of the input box
for a random perturbation ``u_e``, treats ``u_e`` as one more measured
disturbance in the robust problem, and applies ``u_bar_1 + u_e``.

Excitation enters the predictor through the applied-input channel: the
stored dataset holds the input actually applied, so the history part of
the augmented disturbance ``[w_init; 0]`` needs no extra data columns.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .hankel import Dataset, build_stack, is_persistently_exciting, pe_heuristic, push_sample
from .predictor import FactorizationError, RegularizerWeights, factorize_kkt
from .robust import Box, ControlInfeasibleError, ObjectiveSpec, solve_control

log = logging.getLogger(__name__)

__all__ = [
    "BilevelController",
    "ExcitationConfig",
    "StepInfo",
    "augment_history",
    "augment_uncertainty",
    "minkowski_diff_box",
    "weights_factory",
]


def minkowski_diff_box(a: Box, b: Box) -> Box:
    """Pontryagin difference ``a - b = {x : x + y in a for all y in b}``."""
    if a.dim != b.dim:
        raise ValueError(f"box dimensions differ: {a.dim} vs {b.dim}")
    lo, hi = a.lower - b.lower, a.upper - b.upper
    if np.any(lo > hi):
        raise ValueError("Pontryagin difference is empty: the subtrahend is wider than the box")
    return Box(lo, hi)


def augment_uncertainty(w_box: Box, u_e_box: Box) -> Box:
    """Per-step product box ``W x U_e`` for the augmented disturbance."""
    return Box(np.concatenate([w_box.lower, u_e_box.lower]), np.concatenate([w_box.upper, u_e_box.upper]))


def augment_history(w_init, n_u: int) -> np.ndarray:
    """Past augmented disturbance ``[w_k; 0]`` per step.

    Args:
        w_init: Past disturbances, shape (t_init, n_w).
        n_u: Input dimension, i.e. the size of the excitation component.

    Returns:
        Array of shape (t_init, n_w + n_u).
    """
    w = np.asarray(w_init, dtype=float)
    if w.ndim != 2:
        raise ValueError("w_init must have shape (t_init, n_w)")
    return np.hstack([w, np.zeros((w.shape[0], n_u))])


@dataclass(frozen=True)
class ExcitationConfig:
    """Settings for the excitation branch.

    Args:
        u_e_box: Excitation set, a sub-box of the input box.
        pe_tolerance: Threshold of the zero-input test; None means 1e-3 times
            the smallest input-box width.
        rng_seed: Seed of the counter-based stream used to sample ``u_e``.
        use_exact_rank: Replace the zero-input test by a rank test of the
            stored inputs followed by the plan, at depth L.
        enabled: Turn the excitation branch off entirely.
        freeze_on_nonpe: Skip the dataset update for samples applied without
            excitation while the plan was flagged as not exciting.
    """

    u_e_box: Box
    pe_tolerance: float | None = None
    rng_seed: int = 0
    use_exact_rank: bool = False
    enabled: bool = True
    freeze_on_nonpe: bool = False

    def __post_init__(self):
        if self.pe_tolerance is not None and self.pe_tolerance < 0:
            raise ValueError("pe_tolerance must be nonnegative")

    def validate(self, u_box: Box) -> None:
        if self.u_e_box.dim != u_box.dim:
            raise ValueError("excitation box and input box have different dimensions")
        if not (np.all(self.u_e_box.lower >= u_box.lower) and np.all(self.u_e_box.upper <= u_box.upper)):
            raise ValueError("excitation box must lie inside the input box")
        rest = minkowski_diff_box(u_box, self.u_e_box)
        if np.all(rest.lower == rest.upper):
            raise ValueError("input box minus excitation box is a single point")

    def tolerance(self, u_box: Box) -> float:
        if self.pe_tolerance is not None:
            return self.pe_tolerance
        return 1e-3 * float(np.min(u_box.upper - u_box.lower))


@dataclass
class StepInfo:
    mode: str
    excited: bool
    u_e: np.ndarray
    objective: float
    solve_ms: float
    slack: float = 0.0


@dataclass
class BilevelController:
    """Receding-horizon robust data-driven controller with optional excitation.

    Args:
        dataset: Initial data window.
        t_init: Past depth of the Hankel matrices.
        n_h: Prediction horizon.
        weights: Maps the column count n_c to the lower-level weights.
        u_box: Per-step input set U.
        w_box: Per-step forecast deviation set W (centred on zero).
        robust: False gives the non-robust variant (W = {0}, K = 0).
        excitation: Excitation settings; None disables the excitation branch.
        online_update: Append each new sample to the dataset and refactorize.
        soft_output: Output slack price used when relaxing an infeasible step.
    """

    dataset: Dataset
    t_init: int
    n_h: int
    weights: object
    u_box: Box
    w_box: Box
    robust: bool = True
    excitation: ExcitationConfig | None = None
    online_update: bool = False
    soft_output: float | None = None
    stale_updates: int = field(default=0, init=False)
    _last_nonpe: bool = field(default=False, init=False)
    _last_excited: bool = field(default=False, init=False)

    def __post_init__(self):
        if self.excitation is not None:
            self.excitation.validate(self.u_box)
            self._rng = np.random.Generator(np.random.Philox(self.excitation.rng_seed))
        self._refactor()

    def _refactor(self) -> bool:
        stack = build_stack(self.dataset, self.t_init, self.n_h)
        try:
            factor = factorize_kkt(stack, self.weights(stack.n_c))
        except FactorizationError as exc:
            if not hasattr(self, "_factor"):
                raise
            # keep the last valid predictor; the new window lost rank
            log.info("keeping previous factorization: %s", exc)
            self.stale_updates += 1
            return False
        self._stack, self._factor = stack, factor
        return True

    @property
    def factor(self):
        return self._factor

    @property
    def stack(self):
        return self._stack

    def _solve(self, history, w_bar, y_box, objective, u_box, excitation, soft=False):
        w_box = self.w_box if self.robust else Box.point(np.zeros(self.w_box.dim))
        return solve_control(
            self._factor,
            self._stack,
            history,
            (w_bar, w_box),
            (u_box, y_box),
            objective,
            excitation=excitation,
            feedback=self.robust,
            soft_output=self.soft_output if soft else None,
        )

    def _needs_excitation(self, u_plan) -> bool:
        cfg = self.excitation
        if cfg.use_exact_rank:
            n_u = self.dataset.n_u
            seq = np.vstack([self.dataset.u, np.reshape(u_plan, (-1, n_u))])
            return not is_persistently_exciting(seq, self.t_init + self.n_h)
        return pe_heuristic(u_plan, cfg.tolerance(self.u_box))

    def step(self, history, w_bar, y_box: Box, objective: ObjectiveSpec) -> tuple[np.ndarray, StepInfo]:
        """One pass of the excitation algorithm; returns the input to apply.

        Args:
            history: ``(y_init, u_init, w_init)`` over the last t_init steps.
            w_bar: Forecast disturbance over the horizon, shape (n_h, n_w).
            y_box: Output set, per step or stacked over the horizon.
            objective: Cost for this step (carries the reference).
        """
        t0 = time.perf_counter()
        n_u = self.dataset.n_u
        mode, slack = "nominal", 0.0
        try:
            sol = self._solve(history, w_bar, y_box, objective, self.u_box, None)
        except ControlInfeasibleError:
            if self.soft_output is None:
                raise
            sol = self._solve(history, w_bar, y_box, objective, self.u_box, None, soft=True)
            mode, slack = "relaxed", sol.slack
        excited = False
        u_e = np.zeros(n_u)
        cfg = self.excitation
        self._last_nonpe = False
        if cfg is not None and cfg.enabled and self._needs_excitation(sol.u_nominal):
            self._last_nonpe = True
            u_tilde = minkowski_diff_box(self.u_box, cfg.u_e_box)
            try:
                sol = self._solve(history, w_bar, y_box, objective, u_tilde, cfg.u_e_box)
                mode = "excited"
            except ControlInfeasibleError:
                if self.soft_output is None:
                    raise
                sol = self._solve(history, w_bar, y_box, objective, u_tilde, cfg.u_e_box, soft=True)
                mode, slack = "relaxed", sol.slack
            u_e = self._rng.uniform(cfg.u_e_box.lower, cfg.u_e_box.upper)
            excited = True
        elif cfg is not None and not cfg.enabled:
            self._last_nonpe = pe_heuristic(sol.u_nominal, cfg.tolerance(self.u_box))
        self._last_excited = excited
        u_bar = sol.first_input(n_u)
        if excited:
            u_bar = minkowski_diff_box(self.u_box, cfg.u_e_box).snap(u_bar)
        else:
            u_bar = self.u_box.snap(u_bar)
        u = np.clip(u_bar + u_e, self.u_box.lower, self.u_box.upper)
        ms = 1e3 * (time.perf_counter() - t0)
        return u, StepInfo(mode, excited, u_e, sol.objective_value, ms, slack)

    def observe(self, u, w, y) -> None:
        """Record the applied sample; refactorize when updating online."""
        if not self.online_update:
            return
        cfg = self.excitation
        if cfg is not None and cfg.freeze_on_nonpe and self._last_nonpe and not self._last_excited:
            return
        self.dataset = push_sample(self.dataset, u, w, y)
        self._refactor()


def weights_factory(kind: str, **kw):
    """Build ``n_c -> RegularizerWeights`` from a config description."""
    if kind == "constant":
        return lambda n_c: RegularizerWeights.constant(kw["value"], n_c)
    if kind == "linear":
        return lambda n_c: RegularizerWeights.linear(kw["first"], kw["last"], n_c)
    if kind == "noise":
        return lambda n_c: RegularizerWeights.from_noise(
            kw["noise"], kw["t_init"], n_c, tinit_exponent=kw.get("tinit_exponent", 2)
        )
    raise ValueError(f"unknown weight kind {kind!r}")
