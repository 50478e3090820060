"""Naive Monte-Carlo and finite-difference oracles.

Everything here is deliberately simple and independent of the closed-form
kernel-expectation and moment-propagation code, so the two can be checked
against each other. Only plain data (parameter values, inducing inputs, the
model's fixed K_zz jitter) is read from the model objects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layer import KZZ_JITTER

CHUNK = 50_000


class OracleError(ArithmeticError):
    pass


@dataclass
class McEstimate:
    """Monte-Carlo estimate; ``value`` and ``standard_error`` may be arrays."""

    value: np.ndarray
    standard_error: np.ndarray
    n_samples: int
    seed: int

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if np.any(np.asarray(self.standard_error) < 0):
            raise ValueError("standard_error must be non-negative")

    def z_scores(self, reference):
        """``|value - reference| / standard_error`` (0 where both agree exactly)."""
        diff = np.abs(np.asarray(self.value) - np.asarray(reference))
        se = np.asarray(self.standard_error)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, diff / np.where(se > 0, se, 1.0),
                         np.where(diff == 0, 0.0, np.inf))
        return z


@dataclass
class PsiEstimates:
    psi0: McEstimate
    psi1: McEstimate
    psi2: McEstimate


def _rbf(sf2, ls, A, B):
    diff = (A[:, None, :] - B[None, :, :]) / ls
    return sf2 * np.exp(-0.5 * np.sum(diff * diff, axis=-1))


class _Moments:
    """Running mean and sum of squared deviations (Chan et al. merge)."""

    def __init__(self):
        self.n, self.mean, self.m2 = 0, 0.0, 0.0

    def add(self, x):
        k = x.shape[0]
        mu = x.mean(axis=0)
        m2 = ((x - mu)**2).sum(axis=0)
        if self.n == 0:
            self.n, self.mean, self.m2 = k, mu, m2
            return
        n = self.n + k
        delta = mu - self.mean
        self.mean = self.mean + delta * k / n
        self.m2 = self.m2 + m2 + delta**2 * self.n * k / n
        self.n = n

    def standard_error(self):
        return np.sqrt(self.m2 / (self.n - 1) / self.n)


def mc_psi(p, Z, q, n_samples: int, seed: int) -> PsiEstimates:
    """Sample ``h ~ N(q.mean, diag(q.variance))`` and average kernel products.

    ``q`` must hold a single belief (mean of shape ``(D,)``).
    """
    if n_samples < 1000:
        raise ValueError("mc_psi needs at least 1000 samples")
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    mean = np.asarray(q.mean, dtype=np.float64).ravel()
    var = np.asarray(q.variance, dtype=np.float64).ravel()
    sf2 = float(np.exp(p.log_sf2))
    ls = np.exp(np.asarray(p.log_lengthscales, dtype=np.float64))
    M = Z.shape[0]

    if np.all(var == 0):
        k = _rbf(sf2, ls, mean[None], Z)[0]
        zero = lambda shape: np.zeros(shape)
        return PsiEstimates(
            McEstimate(np.float64(sf2), np.float64(0.0), n_samples, seed),
            McEstimate(k, zero(M), n_samples, seed),
            McEstimate(np.outer(k, k), zero((M, M)), n_samples, seed))

    rng = np.random.default_rng(seed)
    acc0, acc1, acc2 = _Moments(), _Moments(), _Moments()
    done = 0
    while done < n_samples:
        k = min(CHUNK, n_samples - done)
        h = mean + np.sqrt(var) * rng.standard_normal((k, mean.size))
        K = _rbf(sf2, ls, h, Z)                             # (k, M)
        diag = sf2 * np.ones((k, 1))                        # k(h, h)
        acc0.add(diag)
        acc1.add(K)
        acc2.add((K[:, :, None] * K[:, None, :]).reshape(k, M * M))
        done += k
    return PsiEstimates(
        McEstimate(acc0.mean[0], acc0.standard_error()[0], n_samples, seed),
        McEstimate(acc1.mean, acc1.standard_error(), n_samples, seed),
        McEstimate(acc2.mean.reshape(M, M),
                   acc2.standard_error().reshape(M, M), n_samples, seed))


def _layer_values(layer):
    sf2 = float(np.exp(layer.kernel.log_sf2))
    ls = np.exp(np.asarray(layer.kernel.log_lengthscales, dtype=np.float64))
    Z = np.asarray(layer.Z, dtype=np.float64)
    Kzz = _rbf(sf2, ls, Z, Z) + KZZ_JITTER * np.eye(Z.shape[0])
    return sf2, ls, Z, np.linalg.inv(Kzz), float(np.exp(layer.log_noise))


def _sample_layer(layer, belief, H, rng):
    """Draw each sample's layer output given its own input row of ``H``."""
    sf2, ls, Z, Kinv, noise = _layer_values(layer)
    n = H.shape[0]
    Kfu = _rbf(sf2, ls, H, Z)                               # (n, M)
    A = Kfu @ Kinv
    cond_var = np.maximum(sf2 - np.sum(A * Kfu, axis=1), 0.0) + noise
    out = np.empty((n, belief.mean.shape[0]))
    for d in range(belief.mean.shape[0]):
        L = np.linalg.cholesky(belief.cov[d])
        u = belief.mean[d] + rng.standard_normal((n, Z.shape[0])) @ L.T
        out[:, d] = np.sum(A * u, axis=1) + np.sqrt(cond_var) * \
            rng.standard_normal(n)
    return out


def _final_layer_logpdf(layer, belief, H, y, rng):
    """log N(y; f-mean, f-var) with the final GP's u sampled per row."""
    sf2, ls, Z, Kinv, noise = _layer_values(layer)
    n = H.shape[0]
    Kfu = _rbf(sf2, ls, H, Z)
    A = Kfu @ Kinv
    var = np.maximum(sf2 - np.sum(A * Kfu, axis=1), 0.0) + noise
    L = np.linalg.cholesky(belief.cov[0])
    u = belief.mean[0] + rng.standard_normal((n, Z.shape[0])) @ L.T
    mean = np.sum(A * u, axis=1)
    return -0.5 * (math.log(2 * math.pi) + np.log(var) + (y - mean)**2 / var)


def mc_log_z(model, cavities, x, y, n_samples: int, seed: int) -> McEstimate:
    """Monte-Carlo log normalizer of one datapoint under the cavities.

    Samples the inducing outputs of every layer from its cavity and each
    hidden output from the FITC conditional. The final Gaussian likelihood
    is integrated exactly given its input and inducing outputs. Returns the
    log of the sample mean with a delta-method standard error.
    """
    layers = model.layers
    if len(layers) > 2:
        raise ValueError("mc_log_z supports at most two layers")
    if n_samples < 100_000:
        raise ValueError("mc_log_z needs at least 1e5 samples")
    x = np.asarray(x, dtype=np.float64).ravel()
    y = float(y)
    rng = np.random.default_rng(seed)
    logw = np.empty(n_samples)
    done = 0
    while done < n_samples:
        k = min(CHUNK, n_samples - done)
        H = np.repeat(x[None], k, axis=0)
        for layer, belief in zip(layers[:-1], cavities[:-1]):
            H = _sample_layer(layer, belief, H, rng)
        logw[done:done + k] = _final_layer_logpdf(layers[-1], cavities[-1],
                                                  H, y, rng)
        done += k
    top = np.max(logw)
    if not np.isfinite(top):
        raise OracleError("every sampled density underflowed to zero")
    w = np.exp(logw - top)
    mean_w = w.mean()
    se = w.std(ddof=1) / math.sqrt(n_samples) / mean_w
    return McEstimate(np.float64(top + math.log(mean_w)), np.float64(se),
                      n_samples, seed)


def fd_grad(f, params, step: float = 1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``params``."""
    x = np.array(params, dtype=np.float64, copy=True)
    shape = x.shape
    x = x.ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        fp = float(f(x.reshape(shape)))
        x[i] = orig - step
        fm = float(f(x.reshape(shape)))
        x[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(shape)
