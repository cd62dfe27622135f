"""Non-negative matrix factorization with random effects (NMF-RE)."""

from ._accel import backend
from .complexity import (ComplexityDiagnostics, calibrate_cap, df_u, enforce_cap,
                         lambda_cap, ratio_lookup)
from .data import (DataSet, FitConfig, ModelParams, WarmStart, expand_signed_covariate,
                   load_dataset, load_orthodont, validate_params, write_dataset)
from .estimator import (FitResult, ObjectiveTrace, fit, init_covariate_nmf, objective,
                        theta_step, u_step, x_step)
from .inference import InferenceConfig, InferenceReport, infer

__version__ = "0.1.0"
