"""Effective degrees of freedom of the random effects and the df cap."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import CapInfeasible

BINDING_RTOL = 1e-6
LOOKUP_GRID = np.logspace(-6, 6, 50)


def _c(a):
    return np.require(a, dtype=np.float64, requirements=["C", "W"])


def gram_eigenvalues(X):
    """Eigenvalues of X'X; entries below 1e-14 * max are reported as 0."""
    return kernels.gram_eigvals(_c(X))


def df_u(X, lam, N):
    """N * sum_q d_q / (d_q + lam) over the eigenvalues d_q of X'X."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    return float(kernels.df_from_eigs(gram_eigenvalues(X), float(lam), int(N)))


def saturation_ratio(X, lam, N):
    return df_u(X, lam, N) / (N * np.shape(X)[1])


def lambda_cap(X, df_max, N):
    """Smallest penalty keeping df_u(X, lam, N) <= df_max.

    Returns 0.0 when the cap is vacuous (df_max >= N*Q).
    """
    if not df_max > 0:
        raise CapInfeasible(f"df_max = {df_max!r} must be positive")
    return float(kernels.lambda_cap_from_eigs(gram_eigenvalues(X), float(df_max), int(N)))


def enforce_cap(lambda_current, X, df_max, N):
    """Raise ``lambda_current`` to the cap floor; ``df_max=None`` disables."""
    if df_max is None:
        return float(lambda_current), False
    lc = lambda_cap(X, df_max, N)
    if lc > lambda_current:
        return lc, True
    return float(lambda_current), False


def ratio_lookup(X, N, grid=LOOKUP_GRID):
    """(lambda, r) pairs of the saturation-ratio function over ``grid``."""
    d = gram_eigenvalues(X)
    Q = np.shape(X)[1]
    r = np.array([kernels.df_from_eigs(d, float(g), int(N)) / (N * Q) for g in grid])
    return np.column_stack([np.asarray(grid, dtype=float), r])


def calibrate_cap(X_fix, lambda_min, N, return_table=False):
    """df_max implied by an analyst floor ``lambda_min`` at the basis ``X_fix``."""
    df_max = df_u(X_fix, lambda_min, N)
    if return_table:
        return df_max, ratio_lookup(X_fix, N)
    return df_max


def write_lookup_csv(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "r"])
        for lam, r in table:
            w.writerow([repr(float(lam)), repr(float(r))])


@dataclass
class ComplexityDiagnostics:
    df_U: float
    saturation_ratio: float
    cap_ratio: Optional[float]
    lambda_final: float
    cap_ever_activated: bool
    binding: bool
    N: int
    Q: int

    @property
    def df_max(self):
        return None if self.cap_ratio is None else self.cap_ratio * self.N * self.Q

    @classmethod
    def from_state(cls, X, lam, N, cap_ratio, activated):
        Q = np.shape(X)[1]
        df = df_u(X, lam, N)
        binding = False
        if cap_ratio is not None:
            binding = abs(df - cap_ratio * N * Q) <= BINDING_RTOL * N * Q
        return cls(df, df / (N * Q), cap_ratio, float(lam), bool(activated),
                   bool(binding), int(N), int(Q))

    def to_dict(self):
        return asdict(self)
