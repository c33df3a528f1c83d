"""Hankel matrices over a sliding window of measured data."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes do not fit together."""


def _as_signal(signal) -> np.ndarray:
    arr = np.asarray(signal, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionError(f"signal must be 1-D or 2-D, got shape {arr.shape}")
    return arr


def build_hankel(signal, depth: int) -> np.ndarray:
    """Block Hankel matrix of a vector signal.

    Args:
        signal: Array of shape (T, n_s), or (T,) for a scalar signal.
        depth: Number of block rows.

    Returns:
        Array of shape (depth * n_s, T - depth + 1) whose column j is the
        concatenation of samples j, ..., j + depth - 1.
    """
    x = _as_signal(signal)
    T, n_s = x.shape
    if depth < 1:
        raise DimensionError("depth must be positive")
    if depth > T:
        raise DimensionError(f"depth {depth} exceeds signal length {T}")
    n_cols = T - depth + 1
    if n_s == 0:
        return np.zeros((0, n_cols))
    windows = np.lib.stride_tricks.sliding_window_view(x, (depth, n_s))[:, 0]
    return np.ascontiguousarray(windows.reshape(n_cols, depth * n_s).T)


def numerical_rank(mat: np.ndarray) -> int:
    """Rank with threshold sigma_max * max(rows, cols) * 1e-10."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.size == 0:
        return 0
    core = mat
    if mat.shape[1] > 2 * mat.shape[0]:
        # same singular values, but the SVD no longer scales with the column count
        core = np.linalg.qr(mat.T, mode="r")
    sv = np.linalg.svd(core, compute_uv=False)
    if sv[0] == 0.0:
        return 0
    tol = sv[0] * max(mat.shape) * 1e-10
    return int(np.sum(sv > tol))


def is_persistently_exciting(signal, order: int) -> bool:
    x = _as_signal(signal)
    if order < 1 or x.shape[0] < order:
        return False
    H = build_hankel(x, order)
    if H.shape[1] < H.shape[0]:
        return False
    return numerical_rank(H) == H.shape[0]


def pe_heuristic(u_nominal, tol: float) -> bool:
    """True when the planned input is within `tol` of zero (excitation needed)."""
    u = np.asarray(u_nominal, dtype=float)
    if u.size == 0:
        return True
    return float(np.max(np.abs(u))) <= tol


@dataclass(frozen=True)
class Dataset:
    """Time-ordered window of inputs, measured disturbances and outputs.

    Row i of each array is the sample taken at time i of the window; at most
    `capacity` samples are kept.
    """

    u: np.ndarray
    w: np.ndarray
    y: np.ndarray
    capacity: int

    def __post_init__(self):
        u, w, y = (_as_signal(a) for a in (self.u, self.w, self.y))
        if not (len(u) == len(w) == len(y)):
            raise DimensionError(
                f"sequence lengths differ: u={len(u)}, w={len(w)}, y={len(y)}"
            )
        if self.capacity < 1:
            raise DimensionError("capacity must be positive")
        if len(u) > self.capacity:
            u, w, y = u[-self.capacity:], w[-self.capacity:], y[-self.capacity:]
        for name, arr in (("u", u), ("w", w), ("y", y)):
            arr = np.array(arr, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, n_u: int, n_w: int, n_y: int, capacity: int) -> Dataset:
        return cls(np.zeros((0, n_u)), np.zeros((0, n_w)), np.zeros((0, n_y)), capacity)

    def __len__(self) -> int:
        return self.u.shape[0]

    @property
    def n_u(self) -> int:
        return self.u.shape[1]

    @property
    def n_w(self) -> int:
        return self.w.shape[1]

    @property
    def n_y(self) -> int:
        return self.y.shape[1]

    @property
    def is_full(self) -> bool:
        return len(self) == self.capacity

    def to_csv(self, path) -> None:
        header = (
            ["t"]
            + [f"u_{i + 1}" for i in range(self.n_u)]
            + [f"w_{i + 1}" for i in range(self.n_w)]
            + [f"y_{i + 1}" for i in range(self.n_y)]
        )
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t in range(len(self)):
                row = np.concatenate([self.u[t], self.w[t], self.y[t]])
                writer.writerow([t] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, capacity: int | None = None) -> Dataset:
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DimensionError(f"{path}: missing header row") from None
            rows = [r for r in reader if r]
        cols = {p: [i for i, h in enumerate(header) if h.startswith(p + "_")] for p in "uwy"}
        if header[0] != "t" or not cols["u"] or not cols["y"]:
            raise DimensionError(f"{path}: header must be t, u_*, w_*, y_*")
        data = np.array([[float(v) for v in r] for r in rows]).reshape(len(rows), len(header))
        cap = capacity if capacity is not None else max(len(rows), 1)
        return cls(data[:, cols["u"]], data[:, cols["w"]], data[:, cols["y"]], cap)


def push_sample(ds: Dataset, u, w, y) -> Dataset:
    """Append one sample on the right, dropping the oldest one at capacity."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if u.shape != (ds.n_u,) or w.shape != (ds.n_w,) or y.shape != (ds.n_y,):
        raise DimensionError(
            f"sample shapes {u.shape}, {w.shape}, {y.shape} do not match "
            f"dataset ({ds.n_u},), ({ds.n_w},), ({ds.n_y},)"
        )
    start = 1 if ds.is_full else 0
    return Dataset(
        np.vstack([ds.u[start:], u]),
        np.vstack([ds.w[start:], w]),
        np.vstack([ds.y[start:], y]),
        ds.capacity,
    )


@dataclass(frozen=True)
class HankelStack:
    """Hankel blocks of u, w and y split into init (past) and pred (future) depths."""

    H_u_init: np.ndarray
    H_w_init: np.ndarray
    H_y_init: np.ndarray
    H_u_pred: np.ndarray
    H_w_pred: np.ndarray
    H_y_pred: np.ndarray
    t_init: int
    n_h: int
    n_u: int
    n_w: int
    n_y: int

    @property
    def L(self) -> int:
        return self.t_init + self.n_h

    @property
    def n_c(self) -> int:
        return self.H_y_init.shape[1]

    @property
    def H(self) -> np.ndarray:
        """Equality-constraint matrix [H_u_init; H_w_init; H_u_pred; H_w_pred]."""
        return np.vstack([self.H_u_init, self.H_w_init, self.H_u_pred, self.H_w_pred])


def build_stack(ds: Dataset, t_init: int, n_h: int) -> HankelStack:
    if t_init < 1 or n_h < 1:
        raise DimensionError("t_init and n_h must be positive")
    L = t_init + n_h
    if len(ds) < L:
        raise DimensionError(f"need at least {L} samples, dataset has {len(ds)}")

    def split(signal):
        H = build_hankel(signal, L)
        k = t_init * signal.shape[1]
        return H[:k], H[k:]

    u_i, u_p = split(ds.u)
    w_i, w_p = split(ds.w)
    y_i, y_p = split(ds.y)
    return HankelStack(u_i, w_i, y_i, u_p, w_p, y_p, t_init, n_h, ds.n_u, ds.n_w, ds.n_y)
