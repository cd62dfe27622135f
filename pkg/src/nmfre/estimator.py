"""Block-wise penalized estimation of (X, Theta, U).

The working objective is ``||Y - X(Theta A + U)||_F^2 + lam ||U||_F^2`` with
``X >= 0``, ``Theta >= 0`` and unit column sums on ``X``. Each iteration
enforces the df cap, takes a ridge step for ``U``, multiplicative steps for
``X`` and ``Theta``, and keeps the candidate only if the objective does not go
up (one damped retry, then rollback).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .complexity import ComplexityDiagnostics
from .data import DataSet, FitConfig, ModelParams
from .errors import (DegenerateColumn, DimensionMismatch, NegativeData,
                     NotConvergedWarning, SingularSystem)


def _c(a):
    return np.require(a, dtype=np.float64, requirements=["C", "W"])


def _check_shapes(data, X, Theta, U=None):
    P, N, K = data.P, data.N, data.K
    if X.ndim != 2 or X.shape[0] != P:
        raise DimensionMismatch(f"X must have {P} rows, got shape {X.shape}")
    Q = X.shape[1]
    if Theta.shape != (Q, K):
        raise DimensionMismatch(f"Theta must be {Q}x{K}, got {Theta.shape}")
    if U is not None and U.shape != (Q, N):
        raise DimensionMismatch(f"U must be {Q}x{N}, got {U.shape}")


def objective(data: DataSet, p: ModelParams) -> float:
    _check_shapes(data, p.X, p.Theta, p.U)
    return float(kernels.objective(_c(data.Y), _c(data.A), _c(p.X), _c(p.Theta),
                                   _c(p.U), float(p.lam)))


def u_step(data: DataSet, X, Theta, lam, center=True):
    """Ridge update of every unit's random effect, then row-centring."""
    if not lam > 0:
        raise SingularSystem(f"lambda = {lam!r}; the ridge system needs lambda > 0")
    X, Theta = _c(X), _c(Theta)
    _check_shapes(data, X, Theta)
    U = kernels.u_solve(_c(data.Y), _c(data.A), X, Theta, float(lam))
    return kernels.center_rows(U) if center else U


def x_step(data: DataSet, p: ModelParams):
    """Multiplicative X update; returns (X_new, D) with D the column sums.

    The caller rescales ``(Theta, U) <- (D Theta, D U)``.
    """
    _check_shapes(data, p.X, p.Theta, p.U)
    Xr = kernels.x_update(_c(data.Y), _c(data.A), _c(p.X), _c(p.Theta), _c(p.U))
    D = Xr.sum(axis=0)
    if (D < kernels.COLSUM_FLOOR).any():
        q = int(np.argmin(D))
        raise DegenerateColumn(f"column {q} of X collapsed to zero")
    return Xr / D, D


def theta_step(data: DataSet, p: ModelParams):
    _check_shapes(data, p.X, p.Theta, p.U)
    return kernels.theta_update(_c(data.Y), _c(data.A), _c(p.X), _c(p.Theta), _c(p.U))


@dataclass
class ObjectiveTrace:
    objective: np.ndarray
    lam: np.ndarray
    df_U: np.ndarray
    cap_activated: np.ndarray
    safeguard: np.ndarray

    def __len__(self):
        return len(self.objective)

    def records(self):
        names = {kernels.SAFEGUARD_NONE: "none", kernels.SAFEGUARD_DAMPED: "damped",
                 kernels.SAFEGUARD_ROLLBACK: "rollback"}
        return [
            {"iteration": i + 1, "objective": float(self.objective[i]),
             "lambda": float(self.lam[i]), "df_U": float(self.df_U[i]),
             "cap_activated": bool(self.cap_activated[i]),
             "safeguard": names[int(self.safeguard[i])]}
            for i in range(len(self))
        ]

    @classmethod
    def from_records(cls, recs):
        codes = {"none": 0, "damped": 1, "rollback": 2}
        return cls(np.array([r["objective"] for r in recs], dtype=float),
                   np.array([r["lambda"] for r in recs], dtype=float),
                   np.array([r["df_U"] for r in recs], dtype=float),
                   np.array([r["cap_activated"] for r in recs], dtype=bool),
                   np.array([codes[r["safeguard"]] for r in recs], dtype=np.int64))


@dataclass
class FitResult:
    params: ModelParams
    trace: ObjectiveTrace
    diagnostics: ComplexityDiagnostics
    restarts_tried: int
    best_restart: int
    converged: bool
    sigma2_working: float
    config: Optional[FitConfig] = None
    objective_value: float = float("nan")

    def to_dict(self):
        p = self.params
        return {
            "params": {"X": p.X.tolist(), "Theta": p.Theta.tolist(),
                       "U": p.U.tolist(), "lambda": p.lam, "Q": p.Q},
            "objective": self.objective_value,
            "converged": self.converged,
            "restarts_tried": self.restarts_tried,
            "best_restart": self.best_restart,
            "sigma2_working": self.sigma2_working,
            "diagnostics": self.diagnostics.to_dict(),
            "config": self.config.to_dict() if self.config is not None else None,
            "trace": self.trace.records(),
        }

    @classmethod
    def from_dict(cls, d):
        pp = d["params"]
        params = ModelParams(np.array(pp["X"], dtype=float), np.array(pp["Theta"], dtype=float),
                             np.array(pp["U"], dtype=float), float(pp["lambda"]))
        cfg = FitConfig.from_dict(d["config"]) if d.get("config") else None
        return cls(params, ObjectiveTrace.from_records(d["trace"]),
                   ComplexityDiagnostics(**d["diagnostics"]), d["restarts_tried"],
                   d["best_restart"], d["converged"], d["sigma2_working"], cfg,
                   d.get("objective", float("nan")))


def _restart_rng(seed, restart):
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1),
                                                        spawn_key=(int(restart),)))


def random_start(data: DataSet, Q, rng):
    """Uniform(0.5, 1.5) basis and a Theta scaled to the data magnitude."""
    X = rng.uniform(0.5, 1.5, size=(data.P, Q))
    X /= X.sum(axis=0)
    Theta = rng.uniform(0.0, 1.0, size=(Q, data.K))
    fitted = float((X @ Theta @ data.A).mean())
    target = float(np.abs(data.Y).mean())
    if fitted > 0 and target > 0:
        Theta *= target / fitted
    return X, Theta


def _require_nonneg_A(data):
    if (data.A < 0).any():
        raise NegativeData("covariates must be non-negative for the multiplicative "
                           "Theta update; split signed rows with expand_signed_covariate")


def init_covariate_nmf(data: DataSet, cfg: FitConfig, rng=None, restart=0):
    """Covariate-driven NMF with U fixed at 0; returns normalized (X0, Theta0)."""
    _require_nonneg_A(data)
    if rng is None:
        rng = _restart_rng(cfg.rng_seed, restart)
    X, Theta = random_start(data, cfg.Q, rng)
    U = np.zeros((cfg.Q, data.N))
    out = kernels.run_blocks(_c(data.Y), _c(data.A), _c(X), _c(Theta), U,
                             float(cfg.lambda_init), -1.0, float(cfg.tol),
                             int(cfg.init_maxit), float(cfg.damping_eta), False,
                             0, 0.0, 1.0)
    X, Theta, status = out[0], out[1], out[6]
    if status == kernels.STATUS_DEGENERATE:
        raise DegenerateColumn("a basis column collapsed during initialization")
    return X, Theta


def _fit_once(data, cfg, restart):
    rng = _restart_rng(cfg.rng_seed, restart)
    X0, Theta0 = init_covariate_nmf(data, cfg, rng=rng)
    N, Q = data.N, cfg.Q
    df_max = cfg.cap_ratio * N * Q if cfg.cap_ratio is not None else -1.0
    ws = cfg.warm_start
    if ws is not None:
        tau2 = ws.sigma2_init / cfg.lambda_init
        freeze, ema = int(ws.freeze_iters), float(ws.ema_rate)
    else:
        tau2, freeze, ema = 1.0 / cfg.lambda_init, 0, 0.0
    out = kernels.run_blocks(_c(data.Y), _c(data.A), X0, Theta0, np.zeros((Q, N)),
                             float(cfg.lambda_init), float(df_max), float(cfg.tol),
                             int(cfg.maxit), float(cfg.damping_eta), True, freeze, ema, tau2)
    (X, Theta, U, lam, n, converged, status, cap_any, sigma2_work,
     obj_tr, lam_tr, dfu_tr, cap_tr, safe_tr) = out
    if status == kernels.STATUS_DEGENERATE:
        raise DegenerateColumn("a basis column collapsed during fitting")
    params = ModelParams(X, Theta, U, float(lam))
    trace = ObjectiveTrace(obj_tr[:n].copy(), lam_tr[:n].copy(), dfu_tr[:n].copy(),
                           cap_tr[:n].astype(bool), safe_tr[:n].copy())
    diag = ComplexityDiagnostics.from_state(X, lam, N, cfg.cap_ratio, cap_any)
    R = data.Y - X @ (Theta @ data.A + U)
    sigma2_iter = float(np.sum(R * R) / (data.P * N))
    L = float(kernels.objective(_c(data.Y), _c(data.A), X, Theta, U, float(lam)))
    return FitResult(params, trace, diag, cfg.n_restarts, restart, bool(converged),
                     sigma2_iter if ws is None else float(sigma2_work), cfg, L)


def fit(data: DataSet, cfg: FitConfig) -> FitResult:
    """Fit the model from ``cfg.n_restarts`` seeded starts and keep the best."""
    _require_nonneg_A(data)
    if cfg.Q > data.P:
        raise DimensionMismatch(f"Q = {cfg.Q} exceeds P = {data.P}")
    best = None
    for r in range(cfg.n_restarts):
        res = _fit_once(data, cfg, r)
        if best is None or res.objective_value < best.objective_value:
            best = res
    if not best.converged:
        warnings.warn(f"no convergence within maxit={cfg.maxit}; returning best iterate",
                      NotConvergedWarning, stacklevel=2)
    return best
