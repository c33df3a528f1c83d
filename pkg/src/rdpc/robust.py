"""Robust upper-level problem: causal disturbance feedback over box uncertainty.

The planned input is ``u = u_bar + K w``, with ``K`` strictly block-lower
triangular, and the predicted output is affine in ``(u, w)`` through the
lower-level KKT map. Every constraint row is required for all ``w`` in a box.
For boxes the worst case is the support function ``a(z)'c + |a(z)|'r``. Its
absolute values are written with epigraph variables, so the robust problem
stays a single convex QP.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .hankel import DimensionError, HankelStack
from .predictor import KktFactor, affine_predictor, predict, solve_lower
from .qp import QpInfeasibleError, QpProblem, QpResult, phase_one, solve_qp

log = logging.getLogger(__name__)

__all__ = [
    "AffineExpr",
    "Box",
    "ControlInfeasibleError",
    "ControlSolution",
    "ObjectiveSpec",
    "RobustProblem",
    "assemble_from_predictor",
    "assemble_problem",
    "nominal_prediction",
    "causality_mask",
    "robustify_row",
    "solve_assembled",
    "solve_control",
    "worst_case",
]


class ControlInfeasibleError(QpInfeasibleError):
    """No input plan satisfies the tightened constraints.

    ``row_label`` names the tightened row with the largest violation at the
    least-infeasible point.
    """

    def __init__(self, message, row_label=None, violation=None):
        super().__init__(message, max_violation=violation)
        self.row_label = row_label


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``{x : lower <= x <= upper}``; bounds may be infinite."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionError(f"box bounds have shapes {lo.shape} and {hi.shape}")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ValueError("empty box: lower > upper in some coordinate")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def point(cls, x) -> Box:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(x, x)

    @classmethod
    def symmetric(cls, radius, center=0.0) -> Box:
        r = np.atleast_1d(np.asarray(radius, dtype=float))
        if np.any(r < 0):
            raise ValueError("negative half-width")
        c = np.broadcast_to(np.asarray(center, dtype=float), r.shape)
        return cls(c - r, c + r)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    @property
    def is_bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def tile(self, n: int) -> Box:
        """Cartesian power: the same box at each of n steps."""
        return Box(np.tile(self.lower, n), np.tile(self.upper, n))

    def shift(self, offset) -> Box:
        return Box(self.lower + offset, self.upper + offset)

    def snap(self, x, rel_tol: float = 1e-9) -> np.ndarray:
        """Clip into the box and move points within ``rel_tol * width`` of a bound onto it.

        Solver output sits at an active bound only up to round-off; snapping
        makes e.g. an idle input exactly zero.
        """
        x = np.clip(np.asarray(x, dtype=float), self.lower, self.upper)
        width = np.where(np.isfinite(self.upper - self.lower), self.upper - self.lower, 1.0)
        tol = rel_tol * np.maximum(width, 1.0)
        x = np.where(np.abs(x - self.lower) <= tol, self.lower, x)
        return np.where(np.abs(x - self.upper) <= tol, self.upper, x)

    def vertices(self) -> np.ndarray:
        if not self.is_bounded:
            raise ValueError("unbounded box has no vertices")
        corners = np.array(np.meshgrid(*[[0, 1]] * self.dim, indexing="ij")).reshape(self.dim, -1).T
        return np.where(corners == 0, self.lower, self.upper)


def causality_mask(n_h: int, n_u: int, n_w: int) -> np.ndarray:
    """Free-entry pattern of K: block (i, j) is free iff j < i."""
    if min(n_h, n_u) < 1 or n_w < 0:
        raise DimensionError("dimensions must be positive")
    blocks = np.tril(np.ones((n_h, n_h), dtype=bool), k=-1)
    return np.kron(blocks, np.ones((n_u, n_w), dtype=bool))


@dataclass
class AffineExpr:
    """Rows of ``constant + coeff_dec z + (coeff_unc + coeff_bilinear z) w``.

    ``coeff_bilinear[r, k, :]`` is how the coefficient of ``w_k`` in row r
    depends on the decision vector ``z``; it carries the K-times-w products.
    """

    constant: np.ndarray
    coeff_dec: np.ndarray
    coeff_unc: np.ndarray
    coeff_bilinear: np.ndarray | None = None

    def __post_init__(self):
        self.constant = np.atleast_1d(np.asarray(self.constant, dtype=float))
        self.coeff_dec = np.atleast_2d(np.asarray(self.coeff_dec, dtype=float))
        self.coeff_unc = np.atleast_2d(np.asarray(self.coeff_unc, dtype=float))
        R = self.constant.size
        n_z, n_w = self.coeff_dec.shape[1], self.coeff_unc.shape[1]
        if self.coeff_bilinear is None:
            self.coeff_bilinear = np.zeros((R, n_w, n_z))
        self.coeff_bilinear = np.asarray(self.coeff_bilinear, dtype=float)
        if (
            self.coeff_dec.shape[0] != R
            or self.coeff_unc.shape[0] != R
            or self.coeff_bilinear.shape != (R, n_w, n_z)
        ):
            raise DimensionError("inconsistent AffineExpr shapes")

    @property
    def n_rows(self) -> int:
        return self.constant.size

    @property
    def n_dec(self) -> int:
        return self.coeff_dec.shape[1]

    @property
    def n_unc(self) -> int:
        return self.coeff_unc.shape[1]

    def unc_coeff(self, z) -> np.ndarray:
        """Coefficient matrix of w for a fixed decision z, shape (rows, n_unc)."""
        return self.coeff_unc + self.coeff_bilinear @ np.asarray(z, dtype=float)

    def evaluate(self, z, w) -> np.ndarray:
        z = np.asarray(z, dtype=float)[: self.n_dec]
        return self.constant + self.coeff_dec @ z + self.unc_coeff(z) @ np.asarray(w, dtype=float)

    def row(self, i: int) -> AffineExpr:
        s = slice(i, i + 1)
        return AffineExpr(self.constant[s], self.coeff_dec[s], self.coeff_unc[s], self.coeff_bilinear[s])


def worst_case(expr: AffineExpr, z, box: Box) -> np.ndarray:
    """max over w in box of each row, via the box support function."""
    z = np.asarray(z, dtype=float)[: expr.n_dec]
    a = expr.unc_coeff(z)
    return expr.constant + expr.coeff_dec @ z + a @ box.center + np.abs(a) @ box.half_width


class _RowSink:
    """Accumulates sparse inequality rows ``A z <= b`` and allocates auxiliary variables."""

    def __init__(self, n_base: int):
        self.n_base = n_base
        self.n_aux = 0
        self.blocks: list[sp.coo_matrix] = []
        self.rhs: list[np.ndarray] = []
        self.labels: list[str] = []
        self.n_rows = 0

    def new_aux(self, n: int) -> np.ndarray:
        idx = self.n_base + self.n_aux + np.arange(n)
        self.n_aux += n
        return idx

    def add(self, mat, rhs, labels) -> None:
        """Append rows; `mat` columns index into [base | aux-so-far]."""
        mat = sp.coo_matrix(mat)
        rhs = np.asarray(rhs, dtype=float).ravel()
        if mat.shape[0] != rhs.size:
            raise DimensionError("row block and rhs disagree")
        if mat.shape[0] == 0:
            return
        self.blocks.append(mat)
        self.rhs.append(rhs)
        self.labels.extend(labels)
        self.n_rows += rhs.size

    def matrix(self, n_total: int) -> tuple[sp.csr_matrix, np.ndarray]:
        if not self.blocks:
            return sp.csr_matrix((0, n_total)), np.zeros(0)
        rows, cols, vals, off = [], [], [], 0
        for blk in self.blocks:
            rows.append(blk.row + off)
            cols.append(blk.col)
            vals.append(blk.data)
            off += blk.shape[0]
        A = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(off, n_total)
        )
        A.sum_duplicates()
        A.eliminate_zeros()
        return A, np.concatenate(self.rhs)


def _robustify(
    sink: _RowSink, expr: AffineExpr, box: Box, lower, upper, name: str, step_of=None, soft: bool = False
) -> np.ndarray:
    """Emit tightened rows of ``lower <= expr(z, w) <= upper`` for all w in box.

    With ``soft`` each row gets a nonnegative slack that widens both sides;
    the slack indices are returned so the caller can price them.
    """
    if box.dim != expr.n_unc:
        raise DimensionError(f"{name}: box has {box.dim} dims, expression has {expr.n_unc}")
    if np.any(box.half_width < 0) or not box.is_bounded:
        raise ValueError(f"{name}: uncertainty box must be bounded with nonnegative half-widths")
    R, n_z = expr.n_rows, expr.n_dec
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (R,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (R,))
    has_lo, has_hi = np.isfinite(lower), np.isfinite(upper)
    active = has_lo | has_hi
    c, r = box.center, box.half_width
    bil = expr.coeff_bilinear
    a0 = expr.coeff_unc

    # nominal part at the box center
    nom_const = expr.constant + a0 @ c
    nom_lin = expr.coeff_dec + np.einsum("k,rkz->rz", c, bil)

    depends = np.any(bil != 0.0, axis=2)  # (R, n_unc)
    needs_t = depends & (r > 0)[None, :] & active[:, None]
    fixed = np.where(~needs_t, np.abs(a0), 0.0) @ r

    rr, kk = np.nonzero(needs_t)
    n_t = rr.size
    t_idx = sink.new_aux(n_t)
    n_cols = sink.n_base + sink.n_aux
    if n_t:
        # |a_k(z)| <= t :  +-(bil z) - t <= -+a0
        B = bil[rr, kk, :]
        T = sp.coo_matrix((-np.ones(n_t), (np.arange(n_t), t_idx)), shape=(n_t, n_cols))
        Bz = sp.coo_matrix(B, shape=(n_t, n_z))
        Bz = sp.coo_matrix((Bz.data, (Bz.row, Bz.col)), shape=(n_t, n_cols))
        sink.add(sp.vstack([Bz + T, -Bz + T]), np.concatenate([-a0[rr, kk], a0[rr, kk]]),
                 [f"abs:{name}[{i}],w[{k}]" for i, k in zip(rr, kk)] * 2)

    s_idx = np.zeros(0, dtype=int)
    if soft:
        act = np.nonzero(active)[0]
        s_idx = sink.new_aux(act.size)
        n_cols = sink.n_base + sink.n_aux
        sink.add(sp.coo_matrix((-np.ones(act.size), (np.arange(act.size), s_idx)), shape=(act.size, n_cols)),
                 np.zeros(act.size), [f"slack:{name}[{i}]" for i in act])
        slack = sp.coo_matrix((-np.ones(act.size), (act, s_idx)), shape=(R, n_cols))
    # sum_k r_k t_{r,k} per row
    S = sp.coo_matrix((r[kk], (rr, t_idx)), shape=(R, n_cols))
    if soft:
        S = S + slack
    L = sp.coo_matrix(nom_lin)
    L = sp.coo_matrix((L.data, (L.row, L.col)), shape=(R, n_cols))

    def lab(i, side):
        step = "" if step_of is None else f"@{step_of(i)}"
        return f"{name}[{i}]{step}:{side}"

    hi_rows = np.nonzero(has_hi)[0]
    lo_rows = np.nonzero(has_lo)[0]
    if hi_rows.size:
        mat = (L + S).tocsr()[hi_rows]
        sink.add(mat, upper[hi_rows] - nom_const[hi_rows] - fixed[hi_rows], [lab(i, "upper") for i in hi_rows])
    if lo_rows.size:
        mat = (-L + S).tocsr()[lo_rows]
        sink.add(mat, -lower[lo_rows] + nom_const[lo_rows] - fixed[lo_rows], [lab(i, "lower") for i in lo_rows])
    return s_idx


def robustify_row(expr_row: AffineExpr, box: Box, bound: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Deterministic rows equivalent to ``expr_row(z, w) <= bound`` for all w in box.

    Returns ``(A, b, n_aux)``: rows over ``[z; t]`` where ``t`` are
    ``n_aux`` epigraph variables bounding ``|a_k(z)|``. Without K-dependent
    coefficients no auxiliaries are needed and a single row ``a'c + |a|'r``
    tightening is returned.
    """
    if expr_row.n_rows != 1:
        raise DimensionError("robustify_row takes a single-row expression")
    if np.any(box.half_width < 0):
        raise ValueError("negative half-width")
    sink = _RowSink(expr_row.n_dec)
    _robustify(sink, expr_row, box, -np.inf, bound, "row")
    A, b = sink.matrix(expr_row.n_dec + sink.n_aux)
    return A.toarray(), b, sink.n_aux


@dataclass(frozen=True)
class ObjectiveSpec:
    """Nominal cost evaluated at the forecast disturbance.

    kind="tracking": sum of q*(y_bar - y_ref)^2 + r*u_bar^2 over the horizon.
    kind="energy": sum of |u_bar| plus the same quadratic terms, which are
    usually switched off with q = r = 0.
    ``k_reg`` adds a small ridge on the feedback entries so the optimal K is
    unique.
    """

    kind: str = "tracking"
    y_ref: np.ndarray | float = 0.0
    q: float = 10.0
    r: float = 0.1
    k_reg: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("tracking", "energy"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if min(self.q, self.r, self.k_reg) < 0:
            raise ValueError("objective weights must be nonnegative")

    def reference(self, n: int) -> np.ndarray:
        ref = np.asarray(self.y_ref, dtype=float).ravel()
        if ref.size == 1:
            return np.full(n, ref[0])
        if ref.size != n:
            raise DimensionError(f"reference has {ref.size} entries, expected {n}")
        return ref


@dataclass(frozen=True)
class ControlSolution:
    u_nominal: np.ndarray
    k_gain: np.ndarray
    objective_value: float
    y_nominal: np.ndarray
    z: np.ndarray = field(repr=False)
    qp: QpResult | None = field(default=None, repr=False)
    slack: float = 0.0

    def first_input(self, n_u: int) -> np.ndarray:
        return self.u_nominal[:n_u].copy()


@dataclass
class RobustProblem:
    """Assembled QP plus the expressions needed to interpret its solution."""

    qp: QpProblem
    n_ubar: int
    free_idx: tuple[np.ndarray, np.ndarray]
    k_shape: tuple[int, int]
    y_expr: AffineExpr
    u_expr: AffineExpr
    unc_box: Box
    nominal_unc: np.ndarray
    y_nom_const: np.ndarray
    y_nom_lin: np.ndarray
    obj_const: float
    row_labels: list[str]
    excitation_selector: np.ndarray
    slack_idx: np.ndarray

    @property
    def n_k(self) -> int:
        return self.free_idx[0].size

    def unpack(self, z) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z, dtype=float)
        u_bar = z[: self.n_ubar].copy()
        K = np.zeros(self.k_shape)
        K[self.free_idx] = z[self.n_ubar : self.n_ubar + self.n_k]
        return u_bar, K


def _stacked_box(box: Box, n_steps: int, name: str, per: int) -> Box:
    if box.dim == per:
        return box.tile(n_steps)
    if box.dim == per * n_steps:
        return box
    raise DimensionError(f"{name} box has {box.dim} entries, expected {per} or {per * n_steps}")


def assemble_problem(
    factor: KktFactor,
    stack: HankelStack,
    history: tuple,
    forecast: tuple,
    sets: tuple,
    objective: ObjectiveSpec,
    excitation: Box | None = None,
    feedback: bool = True,
    soft_output: float | None = None,
) -> RobustProblem:
    """Single-level robust QP for one receding-horizon step.

    Args:
        history: ``(y_init, u_init, w_init)`` measured over the last t_init steps.
        forecast: ``(w_bar, w_box)``; ``w_bar`` is the nominal disturbance over
            the horizon, shape (n_h, n_w), and ``w_box`` the deviation box
            around it (per step or stacked over the horizon).
        sets: ``(u_box, y_box)`` input set for ``u_bar + K w`` and output set,
            per step or stacked; ``y_box`` may hold infinite bounds.
        excitation: per-step excitation box U_e. When given, the uncertainty
            vector is augmented with a future excitation component per step
            that enters the plant through the input channel.
        feedback: if False, K is fixed to zero.
        soft_output: if set, output rows get slacks priced at this weight
            (L1) instead of being hard.
    """
    y_init, u_init, w_init = history
    ap = affine_predictor(factor, y_init, u_init, w_init)
    hyp = stack.H_y_pred
    dims = (factor.n_h, factor.n_u, factor.n_w, factor.n_y)
    return assemble_from_predictor(
        hyp @ ap.g0, hyp @ ap.G_u, hyp @ ap.G_w, dims, forecast, sets, objective,
        excitation, feedback, soft_output,
    )


def assemble_from_predictor(
    y0,
    P_u,
    P_w,
    dims: tuple[int, int, int, int],
    forecast: tuple,
    sets: tuple,
    objective: ObjectiveSpec,
    excitation: Box | None = None,
    feedback: bool = True,
    soft_output: float | None = None,
) -> RobustProblem:
    """Robust QP for any predictor ``y = y0 + P_u u + P_w w`` over the horizon.

    ``dims`` is ``(n_h, n_u, n_w, n_y)``. This is the shared core behind the
    data-driven controller and the model-based baseline.
    """
    n_h, n_u, n_w, n_y = dims
    y0 = np.asarray(y0, dtype=float).ravel()
    P_u = np.asarray(P_u, dtype=float).reshape(n_h * n_y, n_h * n_u)
    P_w = np.asarray(P_w, dtype=float).reshape(n_h * n_y, n_h * n_w)
    w_bar, w_box = forecast
    u_box, y_box = sets
    w_bar = np.asarray(w_bar, dtype=float).reshape(n_h * n_w)
    w_box = _stacked_box(w_box, n_h, "disturbance", n_w)
    u_box = _stacked_box(u_box, n_h, "input", n_u)
    y_box = _stacked_box(y_box, n_h, "output", n_y)

    n_e = n_u if excitation is not None else 0
    n_wt = n_w + n_e
    n_unc = n_h * n_wt
    # selectors from the augmented uncertainty vector [w_k; e_k]_k
    sel_w = np.zeros((n_h * n_w, n_unc))
    sel_e = np.zeros((n_h * n_u, n_unc))
    for k in range(n_h):
        sel_w[k * n_w : (k + 1) * n_w, k * n_wt : k * n_wt + n_w] = np.eye(n_w)
        if n_e:
            sel_e[k * n_u : (k + 1) * n_u, k * n_wt + n_w : (k + 1) * n_wt] = np.eye(n_u)
    lo = sel_w.T @ (w_bar + w_box.lower)
    hi = sel_w.T @ (w_bar + w_box.upper)
    nominal = sel_w.T @ w_bar
    if n_e:
        e_box = excitation.tile(n_h)
        lo = lo + sel_e.T @ e_box.lower
        hi = hi + sel_e.T @ e_box.upper
        nominal = nominal + sel_e.T @ e_box.center
    unc_box = Box(lo, hi)

    mask = causality_mask(n_h, n_u, n_wt) if feedback else np.zeros((n_h * n_u, n_unc), dtype=bool)
    free = np.nonzero(mask)
    n_ub, n_k = n_h * n_u, free[0].size
    n_base = n_ub + n_k
    kk = n_ub + np.arange(n_k)

    # y = y0 + P_u u_bar + (b0 + P_u K) w
    b0 = P_u @ sel_e + P_w @ sel_w
    bil_y = np.zeros((n_h * n_y, n_unc, n_base))
    bil_y[:, free[1], kk] = P_u[:, free[0]]
    dec_y = np.hstack([P_u, np.zeros((n_h * n_y, n_k))])
    y_expr = AffineExpr(y0, dec_y, b0, bil_y)

    # planned input u_bar + K w
    bil_u = np.zeros((n_ub, n_unc, n_base))
    bil_u[free[0], free[1], kk] = 1.0
    u_expr = AffineExpr(
        np.zeros(n_ub), np.hstack([np.eye(n_ub), np.zeros((n_ub, n_k))]), np.zeros((n_ub, n_unc)), bil_u
    )

    sink = _RowSink(n_base)
    _robustify(sink, u_expr, unc_box, u_box.lower, u_box.upper, "u", lambda i: i // n_u)
    slack_idx = _robustify(
        sink, y_expr, unc_box, y_box.lower, y_box.upper, "y", lambda i: i // n_y, soft=soft_output is not None
    )

    # nominal output at the forecast: y_bar = y_nom_const + y_nom_lin z_base
    y_nom_const = y0 + b0 @ nominal
    y_nom_lin = dec_y + np.einsum("k,rkz->rz", nominal, bil_y)

    n_s = n_ub if objective.kind == "energy" else 0
    s_idx = sink.new_aux(n_s)
    n_total = n_base + sink.n_aux
    if n_s:
        S = sp.coo_matrix((np.ones(n_s), (np.arange(n_s), s_idx)), shape=(n_s, n_total))
        U = sp.coo_matrix((np.ones(n_s), (np.arange(n_s), np.arange(n_s))), shape=(n_s, n_total))
        sink.add(sp.vstack([U - S, -U - S]), np.zeros(2 * n_s), [f"l1[{i}]" for i in range(n_s)] * 2)

    A, b = sink.matrix(n_total)

    y_ref = objective.reference(n_h * n_y)
    F = np.zeros((n_h * n_y, n_total))
    F[:, :n_base] = y_nom_lin
    e = y_nom_const - y_ref
    P = 2.0 * objective.q * (F.T @ F)
    q = 2.0 * objective.q * (F.T @ e)
    obj_const = objective.q * float(e @ e)
    diag = np.zeros(n_total)
    diag[:n_ub] += 2.0 * objective.r
    diag[kk] += 2.0 * objective.k_reg
    P[np.diag_indices(n_total)] += diag
    if n_s:
        q[s_idx] += 1.0
    if slack_idx.size:
        q[slack_idx] += soft_output

    qp = QpProblem(P=sp.csc_matrix(P), q=q, A=A, b=b, labels=list(sink.labels))
    return RobustProblem(
        qp=qp,
        n_ubar=n_ub,
        free_idx=free,
        k_shape=mask.shape,
        y_expr=y_expr,
        u_expr=u_expr,
        unc_box=unc_box,
        nominal_unc=nominal,
        y_nom_const=y_nom_const,
        y_nom_lin=y_nom_lin,
        obj_const=obj_const,
        row_labels=list(sink.labels),
        excitation_selector=sel_e,
        slack_idx=slack_idx,
    )


def solve_control(
    factor: KktFactor,
    stack: HankelStack,
    history: tuple,
    forecast: tuple,
    sets: tuple,
    objective: ObjectiveSpec,
    excitation: Box | None = None,
    feedback: bool = True,
    soft_output: float | None = None,
    tol: float = 1e-7,
) -> ControlSolution:
    """Assemble and solve the robust problem; see :func:`assemble_problem`.

    Raises:
        ControlInfeasibleError: carries the label of the most violated
            tightened row at the least-infeasible point.
    """
    prob = assemble_problem(factor, stack, history, forecast, sets, objective, excitation, feedback, soft_output)
    return solve_assembled(prob, tol)


def solve_assembled(prob: RobustProblem, tol: float = 1e-7) -> ControlSolution:
    try:
        res = solve_qp(prob.qp, tol)
    except QpInfeasibleError as exc:
        relax = np.array([not lab.startswith(("abs:", "l1[", "slack:")) for lab in prob.row_labels])
        viol, row = phase_one(prob.qp, relax)
        label = prob.row_labels[row] if row is not None else None
        raise ControlInfeasibleError(
            f"robust problem infeasible; most violated tightened row {label} by {viol:.3g}",
            row_label=label,
            violation=viol,
        ) from exc
    u_bar, K = prob.unpack(res.z)
    z_base = res.z[: prob.y_nom_lin.shape[1]]
    y_nom = prob.y_nom_const + prob.y_nom_lin @ z_base
    slack = float(np.sum(np.maximum(res.z[prob.slack_idx], 0.0))) if prob.slack_idx.size else 0.0
    return ControlSolution(
        u_nominal=u_bar,
        k_gain=K,
        objective_value=res.objective + prob.obj_const,
        y_nominal=y_nom,
        z=res.z,
        qp=res,
        slack=slack,
    )


def nominal_prediction(
    factor: KktFactor, stack: HankelStack, history: tuple, solution: ControlSolution, prob: RobustProblem
) -> np.ndarray:
    """Re-solve the lower level at the nominal uncertainty with the returned plan."""
    y_init, u_init, w_init = history
    sel_w = prob.excitation_selector  # (n_h n_u, n_unc)
    n_unc = prob.nominal_unc.size
    n_h, n_w = factor.n_h, factor.n_w
    n_wt = n_unc // n_h
    w_nom = prob.nominal_unc.reshape(n_h, n_wt)[:, :n_w].ravel()
    u_app = solution.u_nominal + solution.k_gain @ prob.nominal_unc + sel_w @ prob.nominal_unc
    g = solve_lower(factor, y_init, u_init, w_init, u_app, w_nom)
    return predict(factor, stack, g)
