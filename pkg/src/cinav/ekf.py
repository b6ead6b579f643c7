"""Error-state Kalman filter algebra: prediction, Joseph-form update,
observation stacking and chi-square innovation gating."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import block_diag
from scipy.stats import chi2

from . import _kernels as kern
from .ins import N_STATES

KINDS = ("sp", "sp_sl", "v2v", "stacked")
MAX_CONDITION = 1e12


class UpdateRejected(RuntimeError):
    """Raised when the innovation covariance cannot be factorised."""

    def __init__(self, message: str, innovation: np.ndarray):
        super().__init__(message)
        self.innovation = innovation


@dataclass
class FilterState:
    x: np.ndarray
    P: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float).reshape(N_STATES)
        self.P = np.asarray(self.P, dtype=float)
        if self.P.shape != (N_STATES, N_STATES):
            raise ValueError(f"P must be {N_STATES}x{N_STATES}")

    def check(self, tol: float = 1e-9) -> None:
        if not np.allclose(self.P, self.P.T, rtol=0.0, atol=tol):
            raise ValueError("P is not symmetric")
        if np.linalg.eigvalsh(self.P).min() < -tol:
            raise ValueError("P is not positive semidefinite")


@dataclass
class Observation:
    z: np.ndarray
    H: np.ndarray
    R: np.ndarray
    kind: str = "stacked"

    def __post_init__(self) -> None:
        self.z = np.atleast_1d(np.asarray(self.z, dtype=float))
        m = self.z.shape[0]
        self.H = np.asarray(self.H, dtype=float).reshape(m, N_STATES)
        self.R = np.asarray(self.R, dtype=float).reshape(m, m)
        if self.kind not in KINDS:
            raise ValueError(f"unknown observation kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.z.shape[0]


def predict(fs: FilterState, F: np.ndarray, Q: np.ndarray) -> FilterState:
    x = F @ fs.x
    P = F @ fs.P @ F.T + Q
    return FilterState(x, 0.5 * (P + P.T), fs.timestamp)


def innovation(fs: FilterState, obs: Observation) -> tuple[np.ndarray, np.ndarray]:
    """Innovation vector and its covariance ``S = H P H^T + R``."""
    y = obs.z - obs.H @ fs.x
    S = obs.H @ fs.P @ obs.H.T + obs.R
    return y, 0.5 * (S + S.T)


def update(fs: FilterState, obs: Observation) -> FilterState:
    """Kalman measurement update with the Joseph-form covariance.

    ``S`` is factorised by Cholesky; a non-positive-definite or badly
    conditioned ``S`` raises :class:`UpdateRejected` carrying the innovation.
    """
    x, P, y, status = kern.joseph_update(fs.x, fs.P, obs.z, obs.H, obs.R, MAX_CONDITION)
    if status == 1:
        raise UpdateRejected("innovation covariance not positive definite", y)
    if status == 2:
        raise UpdateRejected("innovation covariance ill-conditioned", y)
    return FilterState(x, P, fs.timestamp)


def stack(parts: list[Observation], kind: str = "stacked") -> Observation:
    if not parts:
        raise ValueError("cannot stack an empty observation list")
    if len(parts) == 1:
        o = parts[0]
        return Observation(o.z.copy(), o.H.copy(), o.R.copy(), kind)
    z = np.concatenate([o.z for o in parts])
    H = np.vstack([o.H for o in parts])
    R = block_diag(*[o.R for o in parts])
    return Observation(z, H, R, kind)


@lru_cache(maxsize=64)
def gate_threshold(m: int, alpha: float) -> float:
    return float(chi2.ppf(1.0 - alpha, m))


def gate(innovation: np.ndarray, S: np.ndarray, alpha: float = 0.001) -> bool:
    """Accept when the Mahalanobis distance is within the ``1 - alpha`` quantile."""
    y = np.atleast_1d(np.asarray(innovation, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    d2 = float(y @ np.linalg.solve(S, y))
    return d2 <= gate_threshold(y.shape[0], alpha)
