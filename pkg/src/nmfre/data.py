"""Data and parameter containers, covariate coding and CSV matrix I/O."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, NegativeData, NonFinite, ParseError

COLSUM_TOL = 1e-10
ROWMEAN_TOL = 1e-8


def _as_matrix(a, name):
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be a 2-D matrix, got ndim={a.ndim}")
    return a


@dataclass(frozen=True)
class DataSet:
    """Response ``Y`` (P x N, non-negative) and covariates ``A`` (K x N).

    Units are matched to columns of ``A`` by position; labels are advisory.
    ``strict=False`` skips only the ``Y >= 0`` check (simulated data may dip
    below zero).
    """

    Y: np.ndarray
    A: np.ndarray
    row_labels_Y: tuple = ()
    row_labels_A: tuple = ()
    col_labels: tuple = ()
    strict: bool = True

    def __post_init__(self):
        Y = _as_matrix(self.Y, "Y")
        A = _as_matrix(self.A, "A")
        if Y.size == 0 or A.size == 0:
            raise DimensionMismatch("Y and A need P, K, N >= 1")
        if Y.shape[1] != A.shape[1]:
            raise DimensionMismatch(
                f"Y has {Y.shape[1]} columns but A has {A.shape[1]}")
        if not (np.isfinite(Y).all() and np.isfinite(A).all()):
            raise NonFinite("Y and A must not contain NaN or infinite entries")
        if self.strict and (Y < 0).any():
            p, n = np.argwhere(Y < 0)[0]
            raise NegativeData(f"Y[{p}, {n}] = {Y[p, n]} is negative")
        Y.setflags(write=False)
        A.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "A", A)
        P, N = Y.shape
        K = A.shape[0]
        object.__setattr__(self, "row_labels_Y",
                           tuple(self.row_labels_Y) or tuple(f"y{i + 1}" for i in range(P)))
        object.__setattr__(self, "row_labels_A",
                           tuple(self.row_labels_A) or tuple(f"a{i + 1}" for i in range(K)))
        object.__setattr__(self, "col_labels",
                           tuple(self.col_labels) or tuple(f"n{i + 1}" for i in range(N)))
        if (len(self.row_labels_Y) != P or len(self.row_labels_A) != K
                or len(self.col_labels) != N):
            raise DimensionMismatch("label lengths do not match matrix shapes")

    @property
    def P(self):
        return self.Y.shape[0]

    @property
    def N(self):
        return self.Y.shape[1]

    @property
    def K(self):
        return self.A.shape[0]


@dataclass
class ModelParams:
    X: np.ndarray
    Theta: np.ndarray
    U: np.ndarray
    lam: float

    @property
    def Q(self):
        return self.X.shape[1]

    def copy(self):
        return ModelParams(self.X.copy(), self.Theta.copy(), self.U.copy(), float(self.lam))


@dataclass
class WarmStart:
    freeze_iters: int = 30
    ema_rate: float = 0.05
    sigma2_init: float = 1.0


@dataclass
class FitConfig:
    """Knobs of the block-wise estimator.

    ``cap_ratio=None`` disables the df cap. ``warm_start=None`` keeps the
    penalty at ``lambda_init`` (raised only by the cap).
    """

    Q: int = 1
    lambda_init: float = 1.0
    cap_ratio: Optional[float] = 0.21
    tol: float = 1e-8
    maxit: int = 5000
    n_restarts: int = 5
    rng_seed: int = 0
    warm_start: Optional[WarmStart] = None
    damping_eta: float = 0.5
    init_maxit: int = 500

    def __post_init__(self):
        if isinstance(self.warm_start, dict):
            self.warm_start = WarmStart(**self.warm_start)
        if int(self.Q) < 1:
            raise ValueError("Q must be a positive integer")
        if not self.lambda_init > 0:
            raise ValueError("lambda_init must be positive")
        if self.cap_ratio is not None and not 0 < self.cap_ratio <= 1:
            raise ValueError("cap_ratio must lie in (0, 1] or be None")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.maxit < 1 or self.init_maxit < 1:
            raise ValueError("maxit and init_maxit must be >= 1")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if not 0 < self.damping_eta <= 1:
            raise ValueError("damping_eta must lie in (0, 1]")
        ws = self.warm_start
        if ws is not None:
            if ws.freeze_iters < 0 or not 0 < ws.ema_rate <= 1 or not ws.sigma2_init > 0:
                raise ValueError("warm_start: freeze_iters >= 0, ema_rate in (0, 1], sigma2_init > 0")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown FitConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def expand_signed_covariate(row):
    """Split a signed covariate into its positive and negative parts.

    >>> expand_signed_covariate([1.0, -2.0, 0.0])
    (array([1., 0., 0.]), array([0., 2., 0.]))
    """
    a = np.asarray(row, dtype=np.float64)
    if not np.isfinite(a).all():
        raise NonFinite("covariate row contains NaN or infinite entries")
    pos = np.maximum(a, 0.0)
    neg = np.maximum(-a, 0.0)
    return pos, neg


def validate_params(p: ModelParams) -> list:
    """List the ModelParams invariants that ``p`` violates (empty if valid)."""
    problems = []
    X, Theta, U = np.asarray(p.X), np.asarray(p.Theta), np.asarray(p.U)
    if (X < 0).any():
        problems.append("X has negative entries")
    if (Theta < 0).any():
        problems.append("Theta has negative entries")
    for q, s in enumerate(X.sum(axis=0)):
        if abs(s - 1.0) > COLSUM_TOL:
            problems.append(f"X column {q} sums to {s!r}, not 1")
    for q, m in enumerate(U.mean(axis=1) if U.size else []):
        if abs(m) > ROWMEAN_TOL:
            problems.append(f"U row {q} has mean {m!r}, not 0")
    if not p.lam > 0:
        problems.append(f"lambda = {p.lam!r} is not positive")
    return problems


# -- CSV I/O -----------------------------------------------------------------

def read_matrix_csv(path):
    """Read a labelled CSV matrix: header = column labels, first column = row labels."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not a text CSV file") from exc
    if len(rows) < 2:
        raise ParseError(f"{path}: need a header row and at least one data row")
    header = rows[0]
    cols = [c.strip() for c in header[1:]]
    labels, body = [], []
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise ParseError(f"{path}:{i}: expected {len(header)} fields, got {len(r)}")
        labels.append(r[0].strip())
        try:
            body.append([float(v) for v in r[1:]])
        except ValueError as exc:
            raise ParseError(f"{path}:{i}: {exc}") from exc
    M = np.array(body, dtype=np.float64).reshape(len(labels), len(cols))
    if not np.isfinite(M).all():
        raise NonFinite(f"{path}: NaN or infinite entries")
    return M, labels, cols


def write_matrix_csv(path, M, row_labels, col_labels, corner=""):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([corner, *col_labels])
        for lab, row in zip(row_labels, np.asarray(M)):
            w.writerow([lab, *(repr(float(v)) for v in row)])


def load_dataset(path_Y, path_A) -> DataSet:
    Y, ry, cy = read_matrix_csv(path_Y)
    A, ra, ca = read_matrix_csv(path_A)
    if Y.shape[1] != A.shape[1]:
        raise DimensionMismatch(f"Y has {Y.shape[1]} units but A has {A.shape[1]}")
    return DataSet(Y, A, tuple(ry), tuple(ra), tuple(cy))


def write_dataset(ds: DataSet, path_Y, path_A):
    write_matrix_csv(path_Y, ds.Y, ds.row_labels_Y, ds.col_labels)
    write_matrix_csv(path_A, ds.A, ds.row_labels_A, ds.col_labels)


def bundled_path(name):
    return resources.files("nmfre") / "data" / name


def load_orthodont() -> DataSet:
    """Orthodont growth distances (4 ages x 27 children) with (intercept, male)."""
    with resources.as_file(bundled_path("orthodont_Y.csv")) as py, \
            resources.as_file(bundled_path("orthodont_A.csv")) as pa:
        return load_dataset(py, pa)
