"""Inference for Theta conditional on the fitted basis and penalty.

Random effects are profiled out by ridge regression at fixed ``(X_hat, lam)``.
Per-unit scores feed a sandwich covariance, and a multiplier bootstrap pushes
reweighted scores through a single Newton step (projected onto Theta >= 0).
All products with the information use its Kronecker structure
``(A A') (x) F / sigma2`` and never form the QK x QK matrix, except in
``ReducedInformation.dense`` which exists for cross-checks.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Optional, Union

import numpy as np

from .complexity import df_u
from .data import DataSet
from .errors import NonPositiveDF, SingularInformation

MULTIPLIERS = ("exp_centered", "rademacher", "gaussian")
DF_THETA_MODES = ("fixed_QK", "active_set")
COND_LIMIT = 1e14


def vec(M):
    """Column-stacking vectorization."""
    return np.asarray(M).ravel(order="F")


def unvec(v, Q, K):
    return np.asarray(v).reshape((Q, K), order="F")


@dataclass
class InferenceConfig:
    B: int = 1000
    multiplier_dist: str = "exp_centered"
    df_theta_mode: str = "fixed_QK"
    active_set_delta: Optional[float] = None
    test_side: Union[str, np.ndarray] = "one_sided"
    ci_level: float = 0.95
    rng_seed: int = 0
    small_sample: bool = True

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must lie in (0, 1)")
        if self.multiplier_dist not in MULTIPLIERS:
            raise ValueError(f"multiplier_dist must be one of {MULTIPLIERS}")
        if self.df_theta_mode not in DF_THETA_MODES:
            raise ValueError(f"df_theta_mode must be one of {DF_THETA_MODES}")


# -- variance scale ------------------------------------------------------------

def df_theta(Theta, mode="fixed_QK", delta=None):
    Theta = np.asarray(Theta)
    if mode == "fixed_QK":
        return float(Theta.size)
    if mode == "active_set":
        if delta is None:
            delta = 1e-8 * float(Theta.max(initial=0.0))
        return float(np.count_nonzero(Theta > delta))
    raise ValueError(f"unknown df_theta mode {mode!r}")


def sigma2_hat(data: DataSet, params, mode="fixed_QK", delta=None):
    """RSS / (PN - df_U - df_Theta) at the fitted (X, Theta, U, lam)."""
    X, Theta, U, lam = params.X, params.Theta, params.U, params.lam
    R = data.Y - X @ (Theta @ data.A + U)
    denom = data.P * data.N - df_u(X, lam, data.N) - df_theta(Theta, mode, delta)
    if not denom > 0:
        raise NonPositiveDF(f"PN - df_U - df_Theta = {denom:.6g} <= 0")
    return float(np.sum(R * R) / denom)


# -- profiled residuals and scores --------------------------------------------

def hat_matrix(X, lam):
    G = X.T @ X + lam * np.eye(X.shape[1])
    return X @ np.linalg.solve(G, X.T)


def profiled_residuals(data: DataSet, X_hat, Theta, lam, method="hat"):
    """Residuals after substituting the ridge-optimal U(Theta).

    ``method="hat"`` uses ``(I - H_lam)(y_n - X Theta a_n)``; ``"ridge"`` forms
    U(Theta) explicitly. Both give the same matrix.
    """
    E = data.Y - X_hat @ (Theta @ data.A)
    if method == "hat":
        return E - hat_matrix(X_hat, lam) @ E
    if method == "ridge":
        G = X_hat.T @ X_hat + lam * np.eye(X_hat.shape[1])
        U = np.linalg.solve(G, X_hat.T @ E)
        return E - X_hat @ U
    raise ValueError(f"unknown method {method!r}")


def score_contributions(data: DataSet, X_hat, Theta, lam, sigma2):
    """Per-unit scores S_n = -(X' r_n) a_n' / sigma2, shape (N, Q, K)."""
    r = profiled_residuals(data, X_hat, Theta, lam)
    XR = X_hat.T @ r
    return -np.einsum("qn,kn->nqk", XR, data.A) / sigma2


def profiled_objective(data: DataSet, X_hat, Theta, lam):
    """min over U of the penalized criterion at fixed (X_hat, Theta, lam)."""
    E = data.Y - X_hat @ (Theta @ data.A)
    G = X_hat.T @ X_hat + lam * np.eye(X_hat.shape[1])
    U = np.linalg.solve(G, X_hat.T @ E)
    R = E - X_hat @ U
    return float(np.sum(R * R) + lam * np.sum(U * U))


# -- information ---------------------------------------------------------------

class ReducedInformation:
    """(A A') (x) F / sigma2 with F = lam X'X (X'X + lam I)^-1."""

    def __init__(self, X_hat, A, lam, sigma2):
        X_hat = np.asarray(X_hat, dtype=float)
        A = np.asarray(A, dtype=float)
        Q = X_hat.shape[1]
        XtX = X_hat.T @ X_hat
        F = lam * XtX @ np.linalg.inv(XtX + lam * np.eye(Q))
        self.F = 0.5 * (F + F.T)
        self.AAt = A @ A.T
        self.sigma2 = float(sigma2)
        self.Q, self.K = Q, A.shape[0]
        self.cond_AAt = float(np.linalg.cond(self.AAt))
        self.cond_F = float(np.linalg.cond(self.F))
        for name, c in (("AA'", self.cond_AAt), ("F", self.cond_F)):
            if not np.isfinite(c) or c > COND_LIMIT:
                raise SingularInformation(name, f"information factor {name} is singular "
                                                f"(condition number {c:.3g})")

    @property
    def cond(self):
        return self.cond_AAt * self.cond_F

    def solve(self, v):
        """Apply the inverse information to one vec(Theta)-vector or a stack (m, QK)."""
        v = np.asarray(v, dtype=float)
        single = v.ndim == 1
        V = np.atleast_2d(v).reshape((-1, self.K, self.Q)).transpose(0, 2, 1)
        W = np.linalg.solve(self.F, V)
        W = np.linalg.solve(self.AAt, W.transpose(0, 2, 1))
        out = self.sigma2 * W.reshape((-1, self.Q * self.K))
        return out[0] if single else out

    def dense(self):
        return np.kron(self.AAt, self.F) / self.sigma2


def reduced_information(X_hat, A, lam, sigma2):
    return ReducedInformation(X_hat, A, lam, sigma2)


def working_F(X_hat):
    """Inner factor without the profiling reduction (X'X)."""
    return X_hat.T @ X_hat


# -- sandwich and bootstrap ------------------------------------------------------

def influence(scores, info):
    """Rows g_n = I^-1 vec(S_n), shape (N, QK)."""
    N = scores.shape[0]
    S = scores.transpose(0, 2, 1).reshape((N, -1))
    return info.solve(S)


def sandwich_cov(scores, info, small_sample=False):
    """I^-1 J I^-1 with J = sum_n vec(S_n) vec(S_n)'.

    ``small_sample`` multiplies J by N / (N - 1).
    """
    G = influence(scores, info)
    V = G.T @ G
    N = scores.shape[0]
    if small_sample and N > 1:
        V *= N / (N - 1)
    return 0.5 * (V + V.T)


def draw_multipliers(dist, N, B, seed):
    """B x N multipliers; row b comes from its own stream keyed on (seed, b)."""
    out = np.empty((B, N))
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1))
    for b in range(B):
        rng = np.random.default_rng(np.random.SeedSequence(ss.entropy, spawn_key=(b,)))
        if dist == "exp_centered":
            out[b] = rng.exponential(1.0, N) - 1.0
        elif dist == "rademacher":
            out[b] = 2.0 * rng.integers(0, 2, N) - 1.0
        elif dist == "gaussian":
            out[b] = rng.standard_normal(N)
        else:
            raise ValueError(f"unknown multiplier distribution {dist!r}")
    return out


@dataclass
class BootstrapResult:
    replicates: np.ndarray  # (B, QK), projected
    raw: np.ndarray  # (B, QK), before projection
    bse: np.ndarray  # (QK,)
    multipliers: np.ndarray  # (B, N)


def one_step_bootstrap(theta_hat, scores, info, B, dist="exp_centered", seed=0,
                       multipliers=None):
    """Projected one-step replicates vec(Theta_hat) - I^-1 sum_n xi_n vec(S_n)."""
    N = scores.shape[0]
    xi = draw_multipliers(dist, N, B, seed) if multipliers is None else np.asarray(multipliers, float)
    if xi.shape != (B, N):
        raise ValueError(f"multipliers must be {B}x{N}")
    G = influence(scores, info)
    raw = vec(theta_hat)[None, :] - xi @ G
    reps = np.maximum(raw, 0.0)
    if B > 1:
        bse = reps.std(axis=0, ddof=1)
    else:
        warnings.warn("B = 1: bootstrap SE undefined, reported as NaN", RuntimeWarning, stacklevel=2)
        bse = np.full(reps.shape[1], np.nan)
    return BootstrapResult(reps, raw, bse, xi)


# -- tests and intervals ---------------------------------------------------------

def norm_sf(z):
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def p_value(z, side):
    if not np.isfinite(z):
        return float("nan")
    if side == "one_sided":
        return norm_sf(z)
    return 2.0 * norm_sf(abs(z))


def _z(est, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, est / np.where(se > 0, se, 1.0), np.nan)
    # a zero estimate with zero spread carries no evidence
    return np.where((se == 0) & (est == 0), 0.0, z)


def tests_and_intervals(estimate, se, bse, replicates, ci_level=0.95, sides="one_sided"):
    """z, p, Wald (raw and clipped) and percentile intervals, all as vec arrays."""
    estimate, se = np.asarray(estimate, float), np.asarray(se, float)
    n = estimate.size
    sides = np.broadcast_to(np.asarray(sides, dtype=object), (n,))
    z = _z(estimate, se)
    p = np.array([p_value(zi, s) for zi, s in zip(z, sides)])
    zc = NormalDist().inv_cdf(0.5 + ci_level / 2.0)
    lo_raw, hi_raw = estimate - zc * se, estimate + zc * se
    alpha = 1.0 - ci_level
    pct = np.quantile(replicates, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
    return {
        "z": z, "p": p, "sides": np.array(sides, dtype=object),
        "wald_lo_raw": lo_raw, "wald_hi_raw": hi_raw,
        "wald_lo": np.maximum(lo_raw, 0.0), "wald_hi": np.maximum(hi_raw, 0.0),
        "pct_lo": pct[0], "pct_hi": pct[1],
    }


@dataclass
class InferenceReport:
    Q: int
    K: int
    estimate: np.ndarray
    se: np.ndarray
    bse: np.ndarray
    z: np.ndarray
    p: np.ndarray
    sides: np.ndarray
    wald_lo: np.ndarray
    wald_hi: np.ndarray
    wald_lo_raw: np.ndarray
    wald_hi_raw: np.ndarray
    pct_lo: np.ndarray
    pct_hi: np.ndarray
    covariance: np.ndarray
    replicates: np.ndarray
    sigma2: float
    df_U: float
    df_theta: float
    df_theta_mode: str
    cond_AAt: float
    cond_F: float
    lam: float
    B: int
    multiplier_dist: str
    small_sample: bool
    covariate_labels: tuple = ()
    basis_labels: tuple = ()
    boundary: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    def index(self, q, k):
        return q + self.Q * k

    def rows(self):
        cov = self.covariate_labels or tuple(f"a{k + 1}" for k in range(self.K))
        bas = self.basis_labels or tuple(f"Basis{q + 1}" for q in range(self.Q))
        out = []
        for k in range(self.K):
            for q in range(self.Q):
                i = self.index(q, k)
                out.append({"Covariate": cov[k], "Basis": bas[q],
                            "Estimate": self.estimate[i], "SE": self.se[i],
                            "BSE": self.bse[i], "z": self.z[i], "p": self.p[i],
                            "side": self.sides[i]})
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["Covariate", "Basis", "Estimate", "SE", "BSE", "z", "p"])
            for r in self.rows():
                w.writerow([r["Covariate"], r["Basis"], f"{r['Estimate']:.3f}",
                            f"{r['SE']:.3f}", _fmt(r["BSE"], 3), _fmt(r["z"], 2),
                            _fmt(r["p"], 4)])

    def to_dict(self, include_replicates=False):
        d = {
            "rows": [{k: (float(v) if isinstance(v, (float, np.floating)) else v)
                      for k, v in r.items()} for r in self.rows()],
            "wald_ci": np.column_stack([self.wald_lo, self.wald_hi]).tolist(),
            "wald_ci_unclipped": np.column_stack([self.wald_lo_raw, self.wald_hi_raw]).tolist(),
            "percentile_ci": np.column_stack([self.pct_lo, self.pct_hi]).tolist(),
            "covariance": self.covariance.tolist(),
            "sigma2": self.sigma2, "df_U": self.df_U, "df_theta": self.df_theta,
            "df_theta_mode": self.df_theta_mode, "cond_AAt": self.cond_AAt,
            "cond_F": self.cond_F, "lambda": self.lam, "B": self.B,
            "multiplier_dist": self.multiplier_dist, "small_sample": self.small_sample,
            "boundary_coefficients": [bool(b) for b in self.boundary],
            "note": ("coefficients at the boundary (estimate 0) satisfy KKT, not a zero "
                     "score; their limiting law can be non-Gaussian"),
        }
        if include_replicates:
            d["replicates"] = self.replicates.tolist()
        return _jsonable(d)


def _fmt(v, nd):
    return "NaN" if not np.isfinite(v) else f"{v:.{nd}f}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def infer(data: DataSet, params, cfg: InferenceConfig = None, multipliers=None,
          covariate_labels=(), basis_labels=()) -> InferenceReport:
    """Full inference pass: sigma2, scores, sandwich SE, bootstrap, tests."""
    cfg = cfg or InferenceConfig()
    X, Theta, lam = params.X, params.Theta, params.lam
    Q, K = Theta.shape
    sigma2 = sigma2_hat(data, params, cfg.df_theta_mode, cfg.active_set_delta)
    scores = score_contributions(data, X, Theta, lam, sigma2)
    info = ReducedInformation(X, data.A, lam, sigma2)
    V = sandwich_cov(scores, info, small_sample=cfg.small_sample)
    se = np.sqrt(np.clip(np.diag(V), 0.0, None))
    boot = one_step_bootstrap(Theta, scores, info, cfg.B, cfg.multiplier_dist,
                              cfg.rng_seed, multipliers)
    sides = cfg.test_side
    if not isinstance(sides, str):
        sides = vec(np.asarray(sides, dtype=object))
    est = vec(Theta)
    ti = tests_and_intervals(est, se, boot.bse, boot.replicates, cfg.ci_level, sides)
    return InferenceReport(
        Q=Q, K=K, estimate=est, se=se, bse=boot.bse, z=ti["z"], p=ti["p"],
        sides=ti["sides"], wald_lo=ti["wald_lo"], wald_hi=ti["wald_hi"],
        wald_lo_raw=ti["wald_lo_raw"], wald_hi_raw=ti["wald_hi_raw"],
        pct_lo=ti["pct_lo"], pct_hi=ti["pct_hi"], covariance=V,
        replicates=boot.replicates, sigma2=sigma2, df_U=df_u(X, lam, data.N),
        df_theta=df_theta(Theta, cfg.df_theta_mode, cfg.active_set_delta),
        df_theta_mode=cfg.df_theta_mode, cond_AAt=info.cond_AAt, cond_F=info.cond_F,
        lam=float(lam), B=cfg.B, multiplier_dist=cfg.multiplier_dist,
        small_sample=cfg.small_sample,
        covariate_labels=tuple(covariate_labels), basis_labels=tuple(basis_labels),
        boundary=est <= 0.0)
