"""Monte Carlo harness: Orthodont-based designs and the df-cap stress test."""

from __future__ import annotations

import csv
import dataclasses
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import DataSet, FitConfig, WarmStart
from .estimator import fit
from .inference import InferenceConfig, infer
from .errors import NotConvergedWarning, SimulationFailure

ORTHODONT_X = np.array([0.2308, 0.2409, 0.2566, 0.2717])
ORTHODONT_MALE = np.r_[np.ones(16), np.zeros(11)]
INTERCEPT = 90.502
MALE_EFFECT = 9.4285
TREND_X = np.array([[0.45, 0.30, 0.15, 0.10],
                    [0.25, 0.25, 0.25, 0.25],
                    [0.10, 0.15, 0.30, 0.45]]).T
FAILURE_LIMIT = 0.01
ALPHA = 0.05


@dataclass
class SimDesign:
    N: int
    X_true: np.ndarray
    Theta_true: np.ndarray
    covariate_gen: str = "bernoulli"
    p_male: float = 16 / 27
    sigma2_true: float = 1.0
    tau2_true: float = 1.0
    error_dist: str = "gaussian"
    R: int = 200
    B: int = 200
    fit_cfg: FitConfig = field(default_factory=FitConfig)
    inf_cfg: InferenceConfig = field(default_factory=InferenceConfig)
    scenario: str = "null_boundary"
    target: tuple = (0, 1)
    seed: int = 20260101
    label: str = ""

    def __post_init__(self):
        self.X_true = np.asarray(self.X_true, dtype=float)
        self.Theta_true = np.asarray(self.Theta_true, dtype=float)
        if self.X_true.ndim == 1:
            self.X_true = self.X_true[:, None]
        if np.abs(self.X_true.sum(axis=0) - 1).max() > 1e-8 or (self.X_true < 0).any():
            raise ValueError("X_true must be non-negative with unit column sums")
        if (self.Theta_true < 0).any():
            raise ValueError("Theta_true must be non-negative")
        if self.sigma2_true < 0 or self.tau2_true < 0:
            raise ValueError("variances must be non-negative")
        if self.covariate_gen == "orthodont_fixed" and self.N != 27:
            raise ValueError("orthodont_fixed covariates need N = 27")
        if self.scenario not in ("null_boundary", "alternative_interior"):
            raise ValueError(f"unknown scenario {self.scenario!r}")

    @property
    def P(self):
        return self.X_true.shape[0]

    @property
    def Q(self):
        return self.X_true.shape[1]

    @property
    def truth(self):
        return float(self.Theta_true[self.target])

    @property
    def one_sided(self):
        return self.scenario == "null_boundary"


def baseline_design(N=27, error_dist="gaussian", scenario="null_boundary", R=200, B=200,
                    seed=20260101, n_restarts=1):
    male = 0.0 if scenario == "null_boundary" else MALE_EFFECT
    return SimDesign(
        N=N, X_true=ORTHODONT_X, Theta_true=np.array([[INTERCEPT, male]]),
        covariate_gen="orthodont_fixed" if N == 27 else "bernoulli",
        error_dist=error_dist, R=R, B=B, scenario=scenario, seed=seed,
        fit_cfg=FitConfig(Q=1, lambda_init=1.0, cap_ratio=0.21, n_restarts=n_restarts),
        inf_cfg=InferenceConfig(B=B),
        label=f"baseline N={N} {error_dist} {scenario}")


def stress_design(cap_setting=0.21, error_dist="gaussian", scenario="null_boundary",
                  R=100, B=200, seed=20260202, N=100):
    """Q=3 three-trend design with a deliberately weak initial penalty (1/1000)."""
    male = 0.0 if scenario == "null_boundary" else MALE_EFFECT
    Theta = np.full((3, 2), 0.0)
    Theta[:, 0] = INTERCEPT / 3
    Theta[0, 1] = male
    cap = None if cap_setting in (None, "off") else float(cap_setting)
    return SimDesign(
        N=N, X_true=TREND_X, Theta_true=Theta, covariate_gen="bernoulli",
        error_dist=error_dist, R=R, B=B, scenario=scenario, seed=seed,
        fit_cfg=FitConfig(Q=3, lambda_init=1.0 / 1000.0, cap_ratio=cap, n_restarts=1,
                          warm_start=WarmStart(freeze_iters=30, ema_rate=0.05, sigma2_init=1.0)),
        inf_cfg=InferenceConfig(B=B),
        label=f"stress cap={cap_setting} {error_dist} {scenario}")


def _replicate_seeds(master, r):
    ss = np.random.SeedSequence(int(master) & (2**64 - 1), spawn_key=(int(r),))
    return [int(s) for s in ss.generate_state(3, dtype=np.uint64)]


def generate_dataset(design: SimDesign, rep_seed):
    """Draw (A, U, E) and return (DataSet, truth) with Y = X(Theta A + U) + E."""
    rng = np.random.default_rng(rep_seed)
    N, P, Q = design.N, design.P, design.Q
    if design.covariate_gen == "orthodont_fixed":
        male = ORTHODONT_MALE.copy()
    elif design.covariate_gen == "bernoulli":
        male = (rng.random(N) < design.p_male).astype(float)
    else:
        raise ValueError(f"unknown covariate generator {design.covariate_gen!r}")
    A = np.vstack([np.ones(N), male])
    U = np.sqrt(design.tau2_true) * rng.standard_normal((Q, N))
    if design.error_dist == "gaussian":
        E = rng.standard_normal((P, N))
    elif design.error_dist == "exp_centered":
        E = rng.exponential(1.0, (P, N)) - 1.0
    else:
        raise ValueError(f"unknown error distribution {design.error_dist!r}")
    E *= np.sqrt(design.sigma2_true)
    Y = design.X_true @ (design.Theta_true @ A + U) + E
    ds = DataSet(Y, A, row_labels_A=("intercept", "male"), strict=False)
    return ds, {"U": U, "E": E, "A": A}


def match_components(X_hat, X_true):
    """perm[q_true] = fitted column matched to true column q (cosine similarity)."""
    a = X_hat / np.linalg.norm(X_hat, axis=0)
    b = X_true / np.linalg.norm(X_true, axis=0)
    rows, cols = linear_sum_assignment(-(b.T @ a))
    perm = np.empty(X_true.shape[1], dtype=int)
    perm[rows] = cols
    return perm


def run_replicate(design: SimDesign, r: int) -> dict:
    data_seed, fit_seed, boot_seed = _replicate_seeds(design.seed, r)
    ds, _ = generate_dataset(design, data_seed)
    fcfg = dataclasses.replace(design.fit_cfg, rng_seed=fit_seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotConvergedWarning)
        res = fit(ds, fcfg)
    icfg = dataclasses.replace(design.inf_cfg, B=design.B, rng_seed=boot_seed,
                               test_side="one_sided" if design.one_sided else "two_sided")
    rep = infer(ds, res.params, icfg)
    q_true, k = design.target
    q_hat = int(match_components(res.params.X, design.X_true)[q_true]) if design.Q > 1 else q_true
    i = rep.index(q_hat, k)
    est, se, bse = float(rep.estimate[i]), float(rep.se[i]), float(rep.bse[i])
    truth = design.truth
    z1 = NormalDist().inv_cdf(1 - ALPHA)
    z2 = NormalDist().inv_cdf(1 - ALPHA / 2)

    def reject(s):
        if not s > 0:
            return False
        z = est / s
        return bool(z > z1) if design.one_sided else bool(abs(z) > z2)

    def cover(s):
        return bool(abs(est - truth) <= z2 * s) if np.isfinite(s) else False

    return {
        "replicate": r, "estimate": est, "se": se, "bse": bse,
        "reject_se": reject(se), "reject_bse": reject(bse),
        "cover_se": cover(se), "cover_bse": cover(bse),
        "pct_cover": bool(rep.pct_lo[i] <= truth <= rep.pct_hi[i]),
        "dfu_ratio": res.diagnostics.saturation_ratio, "lambda": res.params.lam,
        "cap_activated": res.diagnostics.cap_ever_activated,
        "converged": res.converged, "failed": False, "error": "",
    }


def _safe_replicate(args):
    design, r = args
    try:
        return run_replicate(design, r)
    except Exception as exc:  # counted against the failure budget
        return {"replicate": r, "failed": True, "error": f"{type(exc).__name__}: {exc}"}


@dataclass
class MonteCarloSummary:
    label: str
    N: int
    scenario: str
    error_dist: str
    cap_ratio: Optional[float]
    R: int
    n_failed: int
    truth: float
    bias: float
    sd: float
    rmse: float
    mean_se: float
    mean_bse: float
    reject_se: float
    reject_bse: float
    cover_se: float
    cover_bse: float
    pct_cover: float
    mean_dfu_ratio: float
    dfu_q99: float
    max_dfu_ratio: float
    mean_lambda: float
    converged_rate: float = float("nan")
    records: list = field(default_factory=list, repr=False)

    def baseline_row(self):
        hyp = "Null" if self.scenario == "null_boundary" else "Alternative"
        return {"N": self.N, "Hypothesis": hyp, "Error": self.error_dist,
                "Bias": f"{self.bias:.3f}", "SD": f"{self.sd:.3f}", "RMSE": f"{self.rmse:.3f}",
                "MeanSE": f"{self.mean_se:.3f}", "MeanBSE": f"{self.mean_bse:.3f}",
                "RejectSE": f"{self.reject_se:.3f}", "RejectBSE": f"{self.reject_bse:.3f}",
                "CoverSE": f"{self.cover_se:.3f}", "CoverBSE": f"{self.cover_bse:.3f}",
                "PctCover": f"{self.pct_cover:.3f}", "dfU": f"{self.mean_dfu_ratio:.3f}",
                "R": self.R, "Failed": self.n_failed}

    def stress_row(self):
        hyp = "Null" if self.scenario == "null_boundary" else "Alternative"
        lam = "<0.001" if self.mean_lambda < 1e-3 else f"{self.mean_lambda:.4f}"
        return {"Hypothesis": hyp,
                "rmax": "off" if self.cap_ratio is None else f"{self.cap_ratio:.2f}",
                "Error": self.error_dist, "Bias": f"{self.bias:.3f}", "SD": f"{self.sd:.3f}",
                "dfU_0.99": f"{self.dfu_q99:.3f}", "MeanLambda": lam,
                "Reject": f"{self.reject_bse:.3f}", "Cover": f"{self.cover_bse:.3f}",
                "RejectSE": f"{self.reject_se:.3f}", "CoverSE": f"{self.cover_se:.3f}",
                "R": self.R, "Failed": self.n_failed}


def summarize(design: SimDesign, records) -> MonteCarloSummary:
    """Aggregate replicate records in replicate order.

    SD uses the 1/R convention so that RMSE^2 = bias^2 + SD^2 holds exactly.
    """
    records = sorted(records, key=lambda d: d["replicate"])
    ok = [d for d in records if not d["failed"]]
    n_failed = len(records) - len(ok)
    if not ok:
        raise SimulationFailure("every replicate failed")
    col = lambda key: np.array([d[key] for d in ok], dtype=float)
    est = col("estimate")
    truth = design.truth
    bias = float(est.mean() - truth)
    sd = float(est.std(ddof=0))
    dfr = col("dfu_ratio")
    return MonteCarloSummary(
        label=design.label, N=design.N, scenario=design.scenario,
        error_dist=design.error_dist, cap_ratio=design.fit_cfg.cap_ratio, R=len(ok),
        n_failed=n_failed, truth=truth, bias=bias, sd=sd,
        rmse=float(np.sqrt(np.mean((est - truth) ** 2))),
        mean_se=float(np.nanmean(col("se"))), mean_bse=float(np.nanmean(col("bse"))),
        reject_se=float(col("reject_se").mean()), reject_bse=float(col("reject_bse").mean()),
        cover_se=float(col("cover_se").mean()), cover_bse=float(col("cover_bse").mean()),
        pct_cover=float(col("pct_cover").mean()), mean_dfu_ratio=float(dfr.mean()),
        dfu_q99=float(np.quantile(dfr, 0.99)), max_dfu_ratio=float(dfr.max()),
        mean_lambda=float(col("lambda").mean()),
        converged_rate=float(col("converged").mean()), records=records)


def default_workers():
    return max(1, int(os.environ.get("NMFRE_THREADS", "1")))


def run_monte_carlo(design: SimDesign, workers=None) -> MonteCarloSummary:
    """Run all replicates (optionally in worker processes) and summarize."""
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = [(design, r) for r in range(design.R)]
    if workers == 1:
        records = [_safe_replicate(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_safe_replicate, jobs, chunksize=max(1, design.R // (4 * workers))))
    n_failed = sum(d["failed"] for d in records)
    if n_failed > FAILURE_LIMIT * design.R:
        first = next(d["error"] for d in records if d["failed"])
        raise SimulationFailure(f"{n_failed}/{design.R} replicates failed (first: {first})")
    return summarize(design, records)


def run_stress_test(cap_setting=0.21, error_dist="gaussian", scenario="null_boundary",
                    R=100, B=200, seed=20260202, workers=None) -> MonteCarloSummary:
    return run_monte_carlo(stress_design(cap_setting, error_dist, scenario, R, B, seed), workers)


BASELINE_COLUMNS = ["N", "Hypothesis", "Error", "Bias", "SD", "RMSE", "MeanSE", "MeanBSE",
              "RejectSE", "RejectBSE", "CoverSE", "CoverBSE", "PctCover", "dfU", "R", "Failed"]
STRESS_COLUMNS = ["Hypothesis", "rmax", "Error", "Bias", "SD", "dfU_0.99", "MeanLambda",
              "Reject", "Cover", "RejectSE", "CoverSE", "R", "Failed"]


def write_summary_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_records_csv(path, records):
    cols = ["replicate", "failed", "estimate", "se", "bse", "reject_se", "reject_bse",
            "cover_se", "cover_bse", "pct_cover", "dfu_ratio", "lambda", "cap_activated",
            "converged", "error"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in r.items() if c in cols})
