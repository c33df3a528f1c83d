"""Trajectory prediction through the KKT system of the lower-level problem.

The lower level picks Hankel column weights ``g`` minimizing

    0.5 * ||H_y_init g - y_init||^2 + 0.5 * g' E_g g   s.t.   H g = b,

with ``b = [u_init; w_init; u_pred; w_pred]``. Its solution is linear in
``[H_y_init' y_init; b]``, so the predicted output is affine in the planned
inputs and the forecast disturbances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .hankel import DimensionError, HankelStack, numerical_rank


class FactorizationError(np.linalg.LinAlgError):
    """The KKT matrix cannot be factorized (rank-deficient data)."""


@dataclass(frozen=True)
class NoiseModel:
    sigma_v: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.sigma_v, dtype=float))
        if s.shape[0] != s.shape[1]:
            raise DimensionError("sigma_v must be square")
        if not np.allclose(s, s.T, atol=1e-12):
            raise ValueError("sigma_v must be symmetric")
        if s.size and np.min(np.linalg.eigvalsh(s)) < -1e-12:
            raise ValueError("sigma_v must be positive semidefinite")
        object.__setattr__(self, "sigma_v", s)

    @classmethod
    def from_std(cls, std: float, n_y: int) -> NoiseModel:
        return cls(np.eye(n_y) * float(std) ** 2)

    @property
    def trace_sigma_v(self) -> float:
        return float(np.trace(self.sigma_v))


@dataclass(frozen=True)
class RegularizerWeights:
    """Diagonal of the penalty matrix E_g, one weight per Hankel column."""

    e_g: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.e_g, dtype=float).ravel()
        if e.size == 0 or np.any(~np.isfinite(e)) or np.any(e <= 0):
            raise ValueError("all E_g weights must be finite and > 0")
        object.__setattr__(self, "e_g", e)

    @classmethod
    def constant(cls, value: float, n_c: int) -> RegularizerWeights:
        return cls(np.full(n_c, float(value)))

    @classmethod
    def linear(cls, first: float, last: float, n_c: int) -> RegularizerWeights:
        """Weights interpolated from the oldest column to the newest one."""
        return cls(np.linspace(first, last, n_c))

    @classmethod
    def from_noise(
        cls, noise: NoiseModel, t_init: int, n_c: int, tinit_exponent: int = 2,
        floor: float = 1e-9,
    ) -> RegularizerWeights:
        if tinit_exponent not in (1, 2):
            raise ValueError("tinit_exponent must be 1 or 2")
        value = t_init**tinit_exponent * noise.trace_sigma_v
        return cls.constant(max(value, floor), n_c)


def _residual_sq(g, y_init, stack: HankelStack) -> float:
    g = np.asarray(g, dtype=float)
    y_init = np.asarray(y_init, dtype=float).ravel()
    if g.shape != (stack.n_c,) or y_init.shape != (stack.H_y_init.shape[0],):
        raise DimensionError("g or y_init does not match the Hankel stack")
    r = stack.H_y_init @ g - y_init
    return float(r @ r)


def wasserstein_bound_nonconvex(g, y_init, stack: HankelStack, noise: NoiseModel) -> float:
    """Tight but non-convex bound on the squared 2-Wasserstein prediction distance.

    Diagnostic only; the controller never minimizes it.
    """
    res = _residual_sq(g, y_init, stack)
    gn = float(np.linalg.norm(g))
    return res + (np.sqrt(stack.t_init) * gn - 1.0) ** 2 * noise.trace_sigma_v


def wasserstein_bound_convex(
    g, y_init, stack: HankelStack, noise: NoiseModel, tinit_exponent: int = 1
) -> float:
    res = _residual_sq(g, y_init, stack)
    gn2 = float(np.dot(g, g))
    return res + stack.t_init**tinit_exponent * noise.trace_sigma_v * (gn2 + 1.0)


@dataclass(frozen=True)
class RhsLayout:
    """Offsets of the blocks of b = [u_init; w_init; u_pred; w_pred]."""

    u_init: slice
    w_init: slice
    u_pred: slice
    w_pred: slice
    n_rows: int

    @classmethod
    def for_stack(cls, stack: HankelStack) -> RhsLayout:
        sizes = [
            stack.t_init * stack.n_u,
            stack.t_init * stack.n_w,
            stack.n_h * stack.n_u,
            stack.n_h * stack.n_w,
        ]
        edges = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        sl = [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]
        return cls(*sl, n_rows=int(edges[-1]))


@dataclass(frozen=True, eq=False)
class KktFactor:
    """Factorized inverse of the lower-level KKT matrix.

    The top block row of the inverse is kept as ``diag(e_inv) - left @ right``
    (applied to the first rhs block) plus ``m_sch.T`` (applied to b), so that
    building it costs O(n_c * (m + n_r)^2) rather than O(n_c^3).
    """

    h_y_init: np.ndarray
    h: np.ndarray
    e_inv: np.ndarray
    left: np.ndarray
    right: np.ndarray
    m_sch: np.ndarray
    schur_chol: tuple
    layout: RhsLayout
    t_init: int
    n_h: int
    n_u: int
    n_w: int
    n_y: int
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_c(self) -> int:
        return self.h.shape[1]

    @property
    def m11_inv(self) -> np.ndarray:
        if "m11_inv" not in self._cache:
            z, w = self.left[:, : self.t_init * self.n_y], self.right[: self.t_init * self.n_y]
            self._cache["m11_inv"] = np.diag(self.e_inv) - z @ w
        return self._cache["m11_inv"]

    @property
    def m_top(self) -> np.ndarray:
        """Dense n_c x (n_c + n_r) matrix with g = m_top @ [H_y_init' y_init; b]."""
        if "m_top" not in self._cache:
            first = np.diag(self.e_inv) - self.left @ self.right
            self._cache["m_top"] = np.hstack([first, self.m_sch.T])
        return self._cache["m_top"]

    def apply_top(self, rhs_y: np.ndarray, b: np.ndarray) -> np.ndarray:
        scale = self.e_inv if rhs_y.ndim == 1 else self.e_inv[:, None]
        return scale * rhs_y - self.left @ (self.right @ rhs_y) + self.m_sch.T @ b

    def schur_solve(self, v: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self.schur_chol, v)


def factorize_kkt(stack: HankelStack, weights: RegularizerWeights) -> KktFactor:
    """Block-inverse the KKT matrix, inverting M_11 by the Woodbury identity.

    Only the m x m matrix ``I + H_y_init E_g^{-1} H_y_init'`` (m = t_init * n_y)
    and the n_r x n_r Schur complement ``H M_11^{-1} H'`` are factorized.
    """
    n_c = stack.n_c
    if weights.e_g.shape != (n_c,):
        raise DimensionError(f"E_g has {weights.e_g.size} weights, stack has {n_c} columns")
    hy = stack.H_y_init
    h = stack.H
    n_r = h.shape[0]
    if n_r > n_c or numerical_rank(h) < n_r:
        raise FactorizationError(
            "Assumption 1 violated: the stacked input/disturbance Hankel matrix "
            f"({n_r} x {n_c}) does not have full row rank; the data are not "
            "persistently exciting"
        )

    e_inv = 1.0 / weights.e_g
    z = hy * e_inv  # H_y_init E^{-1}
    m_mid = np.eye(hy.shape[0]) + z @ hy.T
    w = sla.cho_solve(sla.cho_factor(m_mid), z)  # M_mid^{-1} H_y_init E^{-1}
    # H M_11^{-1} with M_11^{-1} = E^{-1} - z' w
    hm = h * e_inv - (h @ z.T) @ w
    schur = hm @ h.T
    schur = 0.5 * (schur + schur.T)
    try:
        chol = sla.cho_factor(schur)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            "Assumption 1 violated: Schur complement H M_11^{-1} H' is not positive definite"
        ) from exc
    m_sch = sla.cho_solve(chol, hm)
    # M_11^{-1} - M_11^{-1} H' M_sch  =  E^{-1} - [z', hm'] [w; m_sch]
    left = np.hstack([z.T, hm.T])
    right = np.vstack([w, m_sch])
    return KktFactor(
        h_y_init=hy,
        h=h,
        e_inv=e_inv,
        left=left,
        right=right,
        m_sch=m_sch,
        schur_chol=chol,
        layout=RhsLayout.for_stack(stack),
        t_init=stack.t_init,
        n_h=stack.n_h,
        n_u=stack.n_u,
        n_w=stack.n_w,
        n_y=stack.n_y,
    )


def _rhs(factor: KktFactor, y_init, u_init, w_init, u_pred, w_pred):
    parts = [np.asarray(p, dtype=float).ravel() for p in (y_init, u_init, w_init, u_pred, w_pred)]
    lay = factor.layout
    expected = [
        factor.t_init * factor.n_y,
        lay.u_init.stop - lay.u_init.start,
        lay.w_init.stop - lay.w_init.start,
        lay.u_pred.stop - lay.u_pred.start,
        lay.w_pred.stop - lay.w_pred.start,
    ]
    for name, p, n in zip(("y_init", "u_init", "w_init", "u_pred", "w_pred"), parts, expected):
        if p.size != n:
            raise DimensionError(f"{name} has {p.size} entries, expected {n}")
    return factor.h_y_init.T @ parts[0], np.concatenate(parts[1:])


def _kkt_residual(factor: KktFactor, r1, b, g, kappa):
    hy, h = factor.h_y_init, factor.h
    res1 = r1 - (hy.T @ (hy @ g) + g / factor.e_inv[:, None] + h.T @ kappa)
    return res1, b - h @ g


def _kkt_solve(factor: KktFactor, r1, b, refine: int):
    """Solve M [g; kappa] = [r1; b] column-wise with iterative refinement.

    The block/Woodbury factor loses digits when E_g is tiny relative to
    H_y_init' H_y_init; a few refinement sweeps against the exact KKT matrix
    restore them at O(n_c (m + n_r)) cost per sweep.
    """
    vec = r1.ndim == 1
    r1 = r1.reshape(len(r1), -1)
    b = b.reshape(len(b), -1)
    g = factor.apply_top(r1, b)
    kappa = factor.m_sch @ r1 - factor.schur_solve(b)
    for _ in range(refine):
        res1, res2 = _kkt_residual(factor, r1, b, g, kappa)
        g = g + factor.apply_top(res1, res2)
        kappa = kappa + factor.m_sch @ res1 - factor.schur_solve(res2)
    if vec:
        return g[:, 0], kappa[:, 0]
    return g, kappa


def solve_lower(factor: KktFactor, y_init, u_init, w_init, u_pred, w_pred, refine: int = 3) -> np.ndarray:
    """Hankel column weights g solving the lower-level prediction problem."""
    rhs_y, b = _rhs(factor, y_init, u_init, w_init, u_pred, w_pred)
    return _kkt_solve(factor, rhs_y, b, refine)[0]


def dual_variable(factor: KktFactor, y_init, u_init, w_init, u_pred, w_pred, refine: int = 3) -> np.ndarray:
    """Multiplier of the equality rows of the lower-level problem."""
    rhs_y, b = _rhs(factor, y_init, u_init, w_init, u_pred, w_pred)
    return _kkt_solve(factor, rhs_y, b, refine)[1]


def predict(factor: KktFactor, stack: HankelStack, g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.shape != (stack.n_c,):
        raise DimensionError(f"g must have {stack.n_c} entries")
    return stack.H_y_pred @ g


@dataclass(frozen=True)
class AffinePredictor:
    """g = g0 + G_u u_pred + G_w w_pred with the measured history folded into g0."""

    g0: np.ndarray
    G_u: np.ndarray
    G_w: np.ndarray

    def __call__(self, u_pred, w_pred) -> np.ndarray:
        return self.g0 + self.G_u @ np.ravel(u_pred) + self.G_w @ np.ravel(w_pred)


def affine_predictor(factor: KktFactor, y_init, u_init, w_init, refine: int = 3) -> AffinePredictor:
    lay = factor.layout
    n_up = lay.u_pred.stop - lay.u_pred.start
    n_wp = lay.w_pred.stop - lay.w_pred.start
    g0 = solve_lower(factor, y_init, u_init, w_init, np.zeros(n_up), np.zeros(n_wp), refine)
    # columns of the map from b to g, restricted to the u_pred / w_pred rows
    cols = np.eye(lay.n_rows)[:, lay.u_pred.start : lay.w_pred.stop]
    gmap, _ = _kkt_solve(factor, np.zeros((factor.n_c, cols.shape[1])), cols, refine)
    return AffinePredictor(g0, gmap[:, :n_up].copy(), gmap[:, n_up:].copy())
