"""Comparison controllers: regularized single-level DeePC, the non-robust
bi-level variant, and a robust MPC on an ARX model fitted by recursive
least squares.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .excitation import StepInfo
from .hankel import Dataset, DimensionError, HankelStack, build_stack, push_sample
from .predictor import KktFactor
from .qp import QpInfeasibleError, QpProblem, solve_qp
from .robust import (
    Box,
    ControlInfeasibleError,
    ControlSolution,
    ObjectiveSpec,
    assemble_from_predictor,
    solve_assembled,
    solve_control,
)

log = logging.getLogger(__name__)

__all__ = [
    "ArxModel",
    "DeepcSolution",
    "RlsController",
    "RlsResetError",
    "RlsState",
    "SingleLevelController",
    "arx_predictor",
    "arx_regressor",
    "batch_least_squares",
    "non_robust_control",
    "rls_init",
    "rls_robust_mpc",
    "rls_update",
    "single_level_deepc",
]


class RlsResetError(np.linalg.LinAlgError):
    """The RLS covariance stopped being positive definite."""


# ---------------------------------------------------------------- DeePC


@dataclass(frozen=True)
class DeepcSolution:
    u_pred: np.ndarray
    y_pred: np.ndarray
    g: np.ndarray
    sigma: np.ndarray
    objective_value: float


def single_level_deepc(
    stack: HankelStack,
    history: tuple,
    w_pred,
    sets: tuple,
    eta_g: float,
    eta_sigma: float,
    objective: ObjectiveSpec,
    tol: float = 1e-7,
) -> DeepcSolution:
    """Regularized DeePC with squared regularizers.

    Solves ``min J(y, u) + eta_g |g|^2 + eta_sigma |sigma|^2`` subject to
    ``H_u_init g = u_init``, ``H_w_init g = w_init``,
    ``H_y_init g = y_init + sigma``, ``H_w_pred g = w_pred`` and the set
    constraints on ``u = H_u_pred g`` and ``y = H_y_pred g``. The decision
    vector is ``[g; sigma]`` (plus L1 slacks for the energy cost).
    """
    if eta_g < 0 or eta_sigma < 0:
        raise ValueError("regularization weights must be nonnegative")
    y_init, u_init, w_init = (np.ravel(np.asarray(a, dtype=float)) for a in history)
    w_pred = np.ravel(np.asarray(w_pred, dtype=float))
    u_box, y_box = sets
    n_h, n_u, n_y = stack.n_h, stack.n_u, stack.n_y
    u_box = u_box.tile(n_h) if u_box.dim == n_u else u_box
    y_box = y_box.tile(n_h) if y_box.dim == n_y else y_box
    n_c, m = stack.n_c, stack.H_y_init.shape[0]
    if y_init.size != m or u_init.size != stack.H_u_init.shape[0] or w_init.size != stack.H_w_init.shape[0]:
        raise DimensionError("history does not match the Hankel stack")
    n_s = n_h * n_u if objective.kind == "energy" else 0
    n = n_c + m + n_s
    ig, isg, iss = slice(0, n_c), slice(n_c, n_c + m), slice(n_c + m, n)

    # equalities
    eq_rows, f = [], []
    for H, rhs in ((stack.H_u_init, u_init), (stack.H_w_init, w_init), (stack.H_w_pred, w_pred)):
        blk = np.zeros((H.shape[0], n))
        blk[:, ig] = H
        eq_rows.append(blk)
        f.append(rhs)
    blk = np.zeros((m, n))
    blk[:, ig] = stack.H_y_init
    blk[:, isg] = -np.eye(m)
    eq_rows.append(blk)
    f.append(y_init)
    E, f = np.vstack(eq_rows), np.concatenate(f)

    # inequalities on u and y
    Gu = np.zeros((n_h * n_u, n))
    Gu[:, ig] = stack.H_u_pred
    Gy = np.zeros((n_h * n_y, n))
    Gy[:, ig] = stack.H_y_pred
    rows, rhs = [], []
    for G, box in ((Gu, u_box), (Gy, y_box)):
        hi, lo = np.isfinite(box.upper), np.isfinite(box.lower)
        rows += [G[hi], -G[lo]]
        rhs += [box.upper[hi], -box.lower[lo]]
    if n_s:
        S = np.zeros((n_s, n))
        S[:, iss] = np.eye(n_s)
        rows += [Gu - S, -Gu - S]
        rhs += [np.zeros(n_s), np.zeros(n_s)]
    A, b = np.vstack(rows), np.concatenate(rhs)

    y_ref = objective.reference(n_h * n_y)
    P = 2.0 * objective.q * Gy.T @ Gy + 2.0 * objective.r * Gu.T @ Gu
    P[ig, ig] += 2.0 * eta_g * np.eye(n_c)
    P[isg, isg] += 2.0 * eta_sigma * np.eye(m)
    q = -2.0 * objective.q * Gy.T @ y_ref
    q[iss] += 1.0
    const = objective.q * float(y_ref @ y_ref)
    res = solve_qp(QpProblem(sp.csc_matrix(P), q, sp.csr_matrix(A), b, sp.csr_matrix(E), f), tol)
    g = res.z[ig]
    return DeepcSolution(stack.H_u_pred @ g, stack.H_y_pred @ g, g, res.z[isg], res.objective + const)


# ---------------------------------------------------------------- non-robust


def non_robust_control(
    factor: KktFactor, stack: HankelStack, history: tuple, w_bar, sets: tuple, objective: ObjectiveSpec
) -> ControlSolution:
    """The bi-level controller with W = {0} and K = 0."""
    point = Box.point(np.zeros(factor.n_w))
    return solve_control(factor, stack, history, (w_bar, point), sets, objective, feedback=False)


# ---------------------------------------------------------------- ARX / RLS


@dataclass(frozen=True)
class ArxModel:
    """``y_i = sum_j theta_y[j-1] y_{i-j} + theta_u[j-1] u_{i-j} + theta_w[j-1] w_{i-j}``.

    Arrays have shapes (order, n_y, n_y), (order, n_y, n_u), (order, n_y, n_w).
    """

    theta_y: np.ndarray
    theta_u: np.ndarray
    theta_w: np.ndarray

    def __post_init__(self):
        ty, tu, tw = (np.asarray(a, dtype=float) for a in (self.theta_y, self.theta_u, self.theta_w))
        if ty.ndim != 3 or tu.ndim != 3 or tw.ndim != 3:
            raise DimensionError("ARX coefficient arrays must be 3-D")
        t, n_y = ty.shape[0], ty.shape[1]
        if t < 1 or ty.shape != (t, n_y, n_y) or tu.shape[:2] != (t, n_y) or tw.shape[:2] != (t, n_y):
            raise DimensionError("inconsistent ARX coefficient shapes")
        for name, a in (("theta_y", ty), ("theta_u", tu), ("theta_w", tw)):
            object.__setattr__(self, name, a)

    @property
    def order(self) -> int:
        return self.theta_y.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.theta_y.shape[1], self.theta_u.shape[2], self.theta_w.shape[2]

    @classmethod
    def from_theta(cls, theta: np.ndarray, order: int, n_y: int, n_u: int, n_w: int) -> ArxModel:
        """Unpack a stacked parameter matrix of shape (n_phi, n_y); see :func:`arx_regressor`."""
        theta = np.asarray(theta, dtype=float)
        ky, ku = order * n_y, order * n_u
        ty = theta[:ky].T.reshape(n_y, order, n_y).transpose(1, 0, 2)
        tu = theta[ky : ky + ku].T.reshape(n_y, order, n_u).transpose(1, 0, 2)
        tw = theta[ky + ku :].T.reshape(n_y, order, n_w).transpose(1, 0, 2)
        return cls(ty, tu, tw)

    def to_theta(self) -> np.ndarray:
        parts = []
        for a in (self.theta_y, self.theta_u, self.theta_w):
            t, n_y, n_s = a.shape
            parts.append(a.transpose(1, 0, 2).reshape(n_y, t * n_s).T)
        return np.vstack(parts)


def arx_regressor(y_past, u_past, w_past) -> np.ndarray:
    """Regressor from the last ``order`` samples, oldest first in each input.

    Returns ``[y_{i-1}; ...; y_{i-t}; u_{i-1}; ...; w_{i-1}; ...]``.
    """
    parts = [np.asarray(a, dtype=float).reshape(len(a), -1)[::-1].ravel() for a in (y_past, u_past, w_past)]
    return np.concatenate(parts)


def batch_least_squares(ds: Dataset, order: int) -> np.ndarray:
    """Least-squares ARX parameters (n_phi, n_y) from a dataset."""
    T = len(ds)
    if T <= order:
        raise DimensionError("dataset shorter than the ARX order")
    Phi = np.array([arx_regressor(ds.y[i - order : i], ds.u[i - order : i], ds.w[i - order : i]) for i in range(order, T)])
    theta, *_ = np.linalg.lstsq(Phi, ds.y[order:], rcond=None)
    return theta


@dataclass(frozen=True)
class RlsState:
    theta: np.ndarray
    P: np.ndarray
    lam: float = 0.98

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("forgetting factor must lie in (0, 1]")
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim == 1:
            theta = theta[:, None]
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if P.shape != (theta.shape[0], theta.shape[0]):
            raise DimensionError("covariance does not match the parameter count")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "P", P)


def rls_init(ds: Dataset, order: int, lam: float = 0.98, p0: float = 1e3) -> RlsState:
    theta = batch_least_squares(ds, order)
    return RlsState(theta, p0 * np.eye(theta.shape[0]), lam)


def rls_update(state: RlsState, phi, y) -> RlsState:
    """Exponentially weighted RLS step shared across all outputs."""
    phi = np.ravel(np.asarray(phi, dtype=float))
    y = np.ravel(np.asarray(y, dtype=float))
    P, lam = state.P, state.lam
    Pphi = P @ phi
    k = Pphi / (lam + phi @ Pphi)
    theta = state.theta + np.outer(k, y - phi @ state.theta)
    P_new = (P - np.outer(k, Pphi)) / lam
    P_new = 0.5 * (P_new + P_new.T)
    try:
        np.linalg.cholesky(P_new)
    except np.linalg.LinAlgError:
        raise RlsResetError("RLS covariance lost positive definiteness") from None
    return RlsState(theta, P_new, lam)


def arx_predictor(model: ArxModel, history: tuple, n_h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Affine horizon prediction ``y = y0 + P_u u + P_w w`` of the ARX model.

    ``history`` is ``(y_init, u_init, w_init)`` over the last ``order``
    steps, each of shape (order, n_·) or flat. Returned arrays are stacked
    step-major over the horizon.
    """
    t = model.order
    n_y, n_u, n_w = model.dims
    y_h = np.asarray(history[0], dtype=float).reshape(t, n_y)
    u_h = np.asarray(history[1], dtype=float).reshape(t, n_u)
    w_h = np.asarray(history[2], dtype=float).reshape(t, n_w)
    n_in = n_h * (n_u + n_w)
    # each signal is tracked as [constant | coefficients over (u_pred, w_pred)]
    ys = [np.hstack([y_h[j][:, None], np.zeros((n_y, n_in))]) for j in range(t)]
    us = [np.hstack([u_h[j][:, None], np.zeros((n_u, n_in))]) for j in range(t)]
    ws = [np.hstack([w_h[j][:, None], np.zeros((n_w, n_in))]) for j in range(t)]
    for k in range(n_h):
        ynew = np.zeros((n_y, 1 + n_in))
        for j in range(1, t + 1):
            ynew += model.theta_y[j - 1] @ ys[-j] + model.theta_u[j - 1] @ us[-j] + model.theta_w[j - 1] @ ws[-j]
        ys.append(ynew)
        uk = np.zeros((n_u, 1 + n_in))
        uk[:, 1 + k * n_u : 1 + (k + 1) * n_u] = np.eye(n_u)
        wk = np.zeros((n_w, 1 + n_in))
        off = 1 + n_h * n_u
        wk[:, off + k * n_w : off + (k + 1) * n_w] = np.eye(n_w)
        us.append(uk)
        ws.append(wk)
    Y = np.vstack(ys[t:])
    return Y[:, 0], Y[:, 1 : 1 + n_h * n_u], Y[:, 1 + n_h * n_u :]


def rls_robust_mpc(
    model: ArxModel,
    history: tuple,
    forecast: tuple,
    sets: tuple,
    objective: ObjectiveSpec,
    n_h: int,
    feedback: bool = True,
    soft_output: float | None = None,
) -> ControlSolution:
    """Robust MPC on the ARX model with the same tightening as the data-driven controller."""
    y0, P_u, P_w = arx_predictor(model, history, n_h)
    n_y, n_u, n_w = model.dims
    prob = assemble_from_predictor(y0, P_u, P_w, (n_h, n_u, n_w, n_y), forecast, sets, objective,
                                   feedback=feedback, soft_output=soft_output)
    return solve_assembled(prob)


@dataclass
class RlsController:
    """Receding-horizon robust MPC whose ARX model is updated online by RLS."""

    dataset: Dataset
    order: int
    n_h: int
    u_box: Box
    w_box: Box
    lam: float = 0.98
    p0: float = 1e3
    soft_output: float | None = None
    _recent: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        self.state = rls_init(self.dataset, self.order, self.lam, self.p0)
        ds = self.dataset
        self._recent = [(ds.y[i], ds.u[i], ds.w[i]) for i in range(len(ds) - self.order, len(ds))]

    @property
    def model(self) -> ArxModel:
        n_y, n_u, n_w = self.dataset.n_y, self.dataset.n_u, self.dataset.n_w
        return ArxModel.from_theta(self.state.theta, self.order, n_y, n_u, n_w)

    def step(self, history, w_bar, y_box: Box, objective: ObjectiveSpec) -> tuple[np.ndarray, StepInfo]:
        t0 = time.perf_counter()
        forecast = (w_bar, self.w_box)
        sets = (self.u_box, y_box)
        mode = "nominal"
        try:
            sol = rls_robust_mpc(self.model, history, forecast, sets, objective, self.n_h)
        except ControlInfeasibleError:
            if self.soft_output is None:
                raise
            sol = rls_robust_mpc(self.model, history, forecast, sets, objective, self.n_h,
                                 soft_output=self.soft_output)
            mode = "relaxed"
        u = self.u_box.snap(sol.first_input(self.u_box.dim))
        ms = 1e3 * (time.perf_counter() - t0)
        return u, StepInfo(mode, False, np.zeros_like(u), sol.objective_value, ms, sol.slack)

    def observe(self, u, w, y) -> None:
        ys, us, ws = (np.array([r[k] for r in self._recent]) for k in range(3))
        phi = arx_regressor(ys, us, ws)
        try:
            self.state = rls_update(self.state, phi, y)
        except RlsResetError:
            log.warning("RLS covariance reset")
            self.state = RlsState(self.state.theta, self.p0 * np.eye(phi.size), self.lam)
        self._recent = self._recent[1:] + [(np.atleast_1d(y), np.atleast_1d(u), np.atleast_1d(w))]


@dataclass
class SingleLevelController:
    """Receding-horizon regularized DeePC on the nominal forecast."""

    dataset: Dataset
    t_init: int
    n_h: int
    u_box: Box
    eta_g: float = 1.0
    eta_sigma: float = 1e3
    online_update: bool = False

    def __post_init__(self):
        self._stack = build_stack(self.dataset, self.t_init, self.n_h)

    def step(self, history, w_bar, y_box: Box, objective: ObjectiveSpec) -> tuple[np.ndarray, StepInfo]:
        t0 = time.perf_counter()
        try:
            sol = single_level_deepc(self._stack, history, w_bar, (self.u_box, y_box), self.eta_g, self.eta_sigma, objective)
        except QpInfeasibleError as exc:
            raise ControlInfeasibleError(str(exc)) from exc
        u = self.u_box.snap(sol.u_pred[: self.u_box.dim])
        ms = 1e3 * (time.perf_counter() - t0)
        return u, StepInfo("nominal", False, np.zeros_like(u), sol.objective_value, ms)

    def observe(self, u, w, y) -> None:
        if self.online_update:
            self.dataset = push_sample(self.dataset, u, w, y)
            self._stack = build_stack(self.dataset, self.t_init, self.n_h)
