"""Test-set metrics on predictive Gaussians."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class EvalReport:
    rmse: float
    mll: float
    per_point_log_densities: np.ndarray
    n_test: int


def _check(*arrays):
    n = len(arrays[0])
    if n < 1:
        raise ValueError("need at least one test point")
    if any(len(a) != n for a in arrays):
        raise ValueError("length mismatch")


def rmse(means, targets):
    means = np.asarray(means, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    _check(means, targets)
    return float(np.sqrt(np.mean((means - targets)**2)))


def log_densities(means, variances, targets):
    means = np.asarray(means, dtype=np.float64).ravel()
    variances = np.asarray(variances, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    _check(means, variances, targets)
    if np.any(~(variances > 0)):
        raise ValueError("predictive variances must be positive")
    return -0.5 * (math.log(2 * math.pi) + np.log(variances)
                   + (targets - means)**2 / variances)


def mll(means, variances, targets):
    """Mean predictive log density; higher is better."""
    return float(np.mean(log_densities(means, variances, targets)))


def evaluate(means, variances, targets) -> EvalReport:
    lp = log_densities(means, variances, targets)
    return EvalReport(rmse(means, targets), float(np.mean(lp)), lp, len(lp))
