"""Convex QP backend: ``min 1/2 z'Pz + q'z  s.t.  A z <= b,  E z = f``.

Clarabel (interior point) is tried first; if its point misses the KKT
tolerance, OSQP (ADMM with solution polishing) is used instead. Every
returned point is checked against the KKT conditions of the problem as
stated, not the solver's internal scaling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .hankel import DimensionError

log = logging.getLogger(__name__)

__all__ = [
    "QpError",
    "QpInfeasibleError",
    "QpProblem",
    "QpResult",
    "QpUnboundedError",
    "dump_qp",
    "kkt_residuals",
    "load_qp",
    "phase_one",
    "solve_qp",
]

_DUMP_HEADER = "# rdpc-qp v1"


class QpError(RuntimeError):
    """The backend could not produce a point meeting the KKT tolerance."""


class QpInfeasibleError(QpError):
    def __init__(self, message, max_violation=None, certificate=None):
        super().__init__(message)
        self.max_violation = max_violation
        self.certificate = certificate


class QpUnboundedError(QpError):
    def __init__(self, message, ray=None):
        super().__init__(message)
        self.ray = ray


def _csr(mat, n: int) -> sp.csr_matrix:
    if mat is None:
        return sp.csr_matrix((0, n))
    return sp.csr_matrix(mat, dtype=float)


@dataclass
class QpProblem:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csr_matrix | None = None
    b: np.ndarray | None = None
    E: sp.csr_matrix | None = None
    f: np.ndarray | None = None
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        P = sp.csc_matrix(self.P, dtype=float)
        if P.shape != (n, n):
            raise DimensionError(f"P has shape {P.shape}, expected ({n}, {n})")
        if n and abs(P - P.T).max() > 1e-9 * max(1.0, abs(P).max()):
            raise ValueError("P must be symmetric")
        self.P = P
        self.A = _csr(self.A, n)
        self.E = _csr(self.E, n)
        self.b = np.zeros(0) if self.b is None else np.asarray(self.b, dtype=float).ravel()
        self.f = np.zeros(0) if self.f is None else np.asarray(self.f, dtype=float).ravel()
        if self.A.shape != (self.b.size, n) or self.E.shape != (self.f.size, n):
            raise DimensionError("constraint rows and right-hand sides disagree")

    @property
    def n_var(self) -> int:
        return self.q.size

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ (self.P @ z) + self.q @ z)


@dataclass(frozen=True)
class QpResult:
    z: np.ndarray
    objective: float
    y_ineq: np.ndarray
    y_eq: np.ndarray
    residuals: dict
    backend: str


def kkt_residuals(prob: QpProblem, z, y_ineq, y_eq) -> dict:
    """Scaled KKT residuals; multipliers follow ``Pz + q + A'y + E'nu = 0``, ``y >= 0``."""
    Az, Ez = prob.A @ z, prob.E @ z
    Pz = prob.P @ z
    grad = Pz + prob.q + prob.A.T @ y_ineq + prob.E.T @ y_eq

    def amax(v):
        return float(np.max(np.abs(v))) if np.size(v) else 0.0

    p_scale = max(1.0, amax(Az), amax(prob.b), amax(Ez), amax(prob.f))
    d_scale = max(1.0, amax(Pz), amax(prob.q), amax(prob.A.T @ y_ineq), amax(prob.E.T @ y_eq))
    slack = prob.b - Az
    primal = max(amax(np.maximum(-slack, 0.0)), amax(Ez - prob.f)) / p_scale
    dual = amax(np.minimum(y_ineq, 0.0)) / d_scale
    stat = amax(grad) / d_scale
    comp = amax(np.maximum(y_ineq, 0.0) * np.maximum(slack, 0.0)) / max(p_scale, d_scale)
    return {"primal": primal, "dual": dual, "stationarity": stat, "complementarity": comp}


def _ok(res: dict, tol: float) -> bool:
    return all(v <= tol for v in res.values())


def _osqp(prob: QpProblem, tol: float):
    import osqp

    C = sp.vstack([prob.E, prob.A], format="csc")
    lo = np.concatenate([prob.f, np.full(prob.b.size, -np.inf)])
    hi = np.concatenate([prob.f, prob.b])
    solver = osqp.OSQP()
    solver.setup(
        sp.triu(prob.P, format="csc"),
        prob.q,
        C,
        lo,
        hi,
        verbose=False,
        polishing=True,
        eps_abs=min(tol, 1e-9),
        eps_rel=min(tol, 1e-9),
        max_iter=20000,
        adaptive_rho_interval=25,
        polish_refine_iter=10,
        delta=1e-10,
    )
    r = solver.solve(raise_error=False)
    status = r.info.status
    if "primal infeasible" in status:
        raise QpInfeasibleError(f"OSQP: {status}", certificate=r.prim_inf_cert)
    if "dual infeasible" in status:
        raise QpUnboundedError(f"OSQP: {status}", ray=r.dual_inf_cert)
    if r.x is None or not np.all(np.isfinite(r.x)):
        return None
    m_eq = prob.f.size
    return r.x, r.y[m_eq:], r.y[:m_eq]


def _clarabel(prob: QpProblem, tol: float):
    import clarabel

    C = sp.vstack([prob.E, prob.A], format="csc")
    rhs = np.concatenate([prob.f, prob.b])
    cones = []
    if prob.f.size:
        cones.append(clarabel.ZeroConeT(prob.f.size))
    if prob.b.size:
        cones.append(clarabel.NonnegativeConeT(prob.b.size))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = settings.tol_gap_rel = min(tol, 1e-10)
    settings.tol_feas = settings.tol_ktratio = min(tol, 1e-10)
    settings.max_iter = 200
    P = sp.triu(prob.P, format="csc")
    sol = clarabel.DefaultSolver(P, prob.q, C, rhs, cones, settings).solve()
    status = str(sol.status)
    if "PrimalInfeasible" in status:
        raise QpInfeasibleError(f"Clarabel: {status}")
    if "DualInfeasible" in status:
        raise QpUnboundedError(f"Clarabel: {status}")
    x = np.asarray(sol.x)
    if not np.all(np.isfinite(x)):
        return None
    y = np.asarray(sol.z)
    m_eq = prob.f.size
    return x, y[m_eq:], y[:m_eq]


def solve_qp(prob: QpProblem, tol: float = 1e-7) -> QpResult:
    """Solve to scaled KKT residuals below ``tol``.

    Raises:
        QpInfeasibleError: constraints are inconsistent.
        QpUnboundedError: objective is unbounded below on the feasible set.
        QpError: neither backend reached the tolerance.
    """
    if prob.n_var == 0:
        return QpResult(np.zeros(0), 0.0, np.zeros(prob.b.size), np.zeros(prob.f.size), {}, "empty")
    best = None
    for name, backend in (("clarabel", _clarabel), ("osqp", _osqp)):
        out = backend(prob, tol)
        if out is None:
            log.debug("%s returned no usable point", name)
            continue
        z, y_in, y_eq = out
        res = kkt_residuals(prob, z, y_in, y_eq)
        if _ok(res, tol):
            return QpResult(z, prob.objective(z), y_in, y_eq, res, name)
        log.debug("%s KKT residuals above tolerance: %s", name, res)
        if best is None or max(res.values()) < max(best[3].values()):
            best = (z, y_in, y_eq, res, name)
    if best is not None and best[3]["primal"] > 1e3 * tol:
        viol, _ = phase_one(prob)
        if viol > tol:
            raise QpInfeasibleError(f"no feasible point found, max violation {viol:.3g}", max_violation=viol)
    raise QpError(f"QP did not converge to tolerance {tol:g}: {None if best is None else best[3]}")


def phase_one(prob: QpProblem, relax=None) -> tuple[float, int | None]:
    """Smallest uniform relaxation ``s`` with ``A z <= b + s`` feasible, and its worst row.

    Args:
        relax: optional boolean mask of the inequality rows that may be
            relaxed; the others are kept hard. Defaults to all rows.

    Returns ``(s, row)``; row is None when there are no inequality rows.
    """
    n, m = prob.n_var, prob.b.size
    if m == 0:
        return 0.0, None
    relax = np.ones(m, dtype=bool) if relax is None else np.asarray(relax, dtype=bool)
    A = sp.hstack([prob.A, -relax[:, None].astype(float)], format="csr")
    E = sp.hstack([prob.E, sp.csr_matrix((prob.f.size, 1))], format="csr") if prob.f.size else None
    c = np.zeros(n + 1)
    c[-1] = 1.0
    bounds = [(None, None)] * n + [(0.0, None)]
    res = linprog(c, A_ub=A, b_ub=prob.b, A_eq=E, b_eq=prob.f if prob.f.size else None,
                  bounds=bounds, method="highs")
    if res.status != 0:
        return float("inf"), None
    z = res.x[:n]
    viol = np.where(relax, prob.A @ z - prob.b, -np.inf)
    return float(max(res.x[-1], 0.0)), int(np.argmax(viol))


def dump_qp(prob: QpProblem, path) -> None:
    """Write the problem as dense text.

    Layout: header line, ``n m_ineq m_eq``, then P (n rows), q (one row),
    A (m_ineq rows), b, E (m_eq rows), f. Values use 17 significant digits;
    empty blocks are written as empty lines.
    """
    n, m, p = prob.n_var, prob.b.size, prob.f.size

    def rows(mat):
        return [" ".join(f"{v:.17g}" for v in r) for r in np.atleast_2d(mat)] if mat.size else []

    lines = [_DUMP_HEADER, f"{n} {m} {p}"]
    lines += rows(prob.P.toarray())
    lines += [" ".join(f"{v:.17g}" for v in prob.q)]
    lines += rows(prob.A.toarray())
    lines += [" ".join(f"{v:.17g}" for v in prob.b)]
    lines += rows(prob.E.toarray())
    lines += [" ".join(f"{v:.17g}" for v in prob.f)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_qp(path) -> QpProblem:
    lines = Path(path).read_text().split("\n")
    if lines[0].strip() != _DUMP_HEADER:
        raise ValueError(f"{path}: not a QP dump")
    n, m, p = (int(t) for t in lines[1].split())
    pos = 2

    def take(k, width):
        nonlocal pos
        block = [np.array(lines[pos + i].split(), dtype=float) for i in range(k)]
        pos += k
        return np.array(block).reshape(k, width)

    P = take(n, n)
    q = take(1, n)[0]
    A = take(m, n)
    b = take(1, m)[0]
    E = take(p, n)
    f = take(1, p)[0]
    return QpProblem(sp.csc_matrix(P), q, sp.csr_matrix(A), b, sp.csr_matrix(E), f)
