"""Deep GP stack: sequential moment projection, log Z and its gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .data import Standardizer
from .kernel import MomentBelief
from .layer import (GaussianSite, InducingBelief, SparseGpLayer,
                    backward_point, backward_uncertain, forward_point,
                    forward_uncertain, prepare)
from .numerics import JitterPolicy, NotPositiveDefinite, chol_psd, inv_psd

LOG_2PI = math.log(2.0 * math.pi)
PARAM_KEYS = ("log_sf2", "log_lengthscales", "Z", "log_noise")


@dataclass
class DgpModel:
    layers: List[SparseGpLayer]
    standardizer: Optional[Standardizer] = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        for lo, hi in zip(self.layers[:-1], self.layers[1:]):
            if lo.output_dim != hi.input_dim:
                raise ValueError(
                    f"layer output dim {lo.output_dim} does not match next "
                    f"input dim {hi.input_dim}")
        if self.layers[-1].output_dim != 1:
            raise ValueError("the final layer must have output_dim 1")

    @property
    def input_dim(self):
        return self.layers[0].input_dim

    @property
    def num_layers(self):
        return len(self.layers)

    def num_params(self):
        return sum(layer.num_params() for layer in self.layers)

    def get_params(self):
        """Flat vector of all learnable scalars (log-space hyperparameters, Z)."""
        parts = []
        for layer in self.layers:
            parts += [[layer.kernel.log_sf2], layer.kernel.log_lengthscales,
                      layer.Z.ravel(), [layer.log_noise]]
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])

    def set_params(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.num_params(),):
            raise ValueError("parameter vector has the wrong length")
        i = 0
        for layer in self.layers:
            D, M = layer.input_dim, layer.num_inducing
            layer.kernel.log_sf2 = float(theta[i])
            layer.kernel.log_lengthscales = theta[i + 1:i + 1 + D].copy()
            i += 1 + D
            layer.Z = theta[i:i + M * D].reshape(M, D).copy()
            i += M * D
            layer.log_noise = float(theta[i])
            i += 1

    def copy(self):
        return DgpModel([layer.copy() for layer in self.layers],
                        self.standardizer)


def flatten_param_grads(grads):
    """Flatten per-layer hyperparameter gradients in ``get_params`` order."""
    parts = []
    for g in grads:
        parts += [[g["log_sf2"]], g["log_lengthscales"], np.ravel(g["Z"]),
                  [g["log_noise"]]]
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


@dataclass
class InferenceState:
    """SEP state: one averaged factor and posterior per layer.

    For every layer the identity ``posterior = prior + n_train * factor``
    holds in natural parameters. Nothing here grows with ``n_train``.
    """

    factors: List[GaussianSite]
    posteriors: List[GaussianSite]
    priors: List[GaussianSite]
    n_train: int
    jitters: List[float] = field(default_factory=list)

    @classmethod
    def initial(cls, model: DgpModel, n_train: int,
                policy: Optional[JitterPolicy] = None):
        factors = [GaussianSite.zeros(layer.output_dim, layer.num_inducing)
                   for layer in model.layers]
        state = cls(factors, [], [], int(n_train))
        state.rebuild(model, policy)
        return state

    def rebuild(self, model: DgpModel, policy: Optional[JitterPolicy] = None):
        """Recompute priors from the current hyperparameters and the posterior.

        Raises ``NotPositiveDefinite`` (leaving the state untouched) if a
        rebuilt posterior precision is not positive definite.
        """
        priors, posteriors, jitters = [], [], []
        for layer, g in zip(model.layers, self.factors):
            L, jitter = chol_psd(layer.kzz(), policy)
            Kinv = inv_psd(L)
            D, M = layer.output_dim, layer.num_inducing
            prior = GaussianSite(np.zeros((D, M)),
                                 np.repeat(Kinv[None], D, axis=0))
            post = prior + g.scaled(self.n_train)
            for d in range(D):
                try:
                    np.linalg.cholesky(post.eta2[d])
                except np.linalg.LinAlgError:
                    raise NotPositiveDefinite(
                        "rebuilt posterior is not positive definite")
            priors.append(prior)
            posteriors.append(post)
            jitters.append(jitter)
        self.priors, self.posteriors, self.jitters = priors, posteriors, jitters

    def cavity_sites(self):
        return [q - g for q, g in zip(self.posteriors, self.factors)]

    def posterior_beliefs(self):
        return [q.moments() for q in self.posteriors]

    def copy(self):
        return InferenceState([g.copy() for g in self.factors],
                              [q.copy() for q in self.posteriors],
                              [p.copy() for p in self.priors], self.n_train,
                              list(self.jitters))

    def num_params(self):
        return sum(s.eta1.size + s.eta2.size
                   for sites in (self.factors, self.posteriors, self.priors)
                   for s in sites)


@dataclass
class Tape:
    preps: list
    inputs: list      # per layer: X, or (mx, vx)
    outputs: list     # per layer: (mean, var)
    stats: list       # kfu or (psi1, psi2)


def prepare_all(model, beliefs, policy=None):
    if len(beliefs) != model.num_layers:
        raise ValueError("need one inducing belief per layer")
    return [prepare(layer, b, policy) for layer, b in zip(model.layers, beliefs)]


def forward_batch(model: DgpModel, beliefs, X, preps=None, policy=None):
    """Propagate a batch ``X`` (B, D) through the stack, keeping a tape."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.input_dim:
        raise ValueError(
            f"input has {X.shape[1]} columns, model expects {model.input_dim}")
    preps = preps if preps is not None else prepare_all(model, beliefs, policy)
    tape = Tape(preps, [], [], [])
    for i, (layer, prep) in enumerate(zip(model.layers, preps)):
        if i == 0:
            m, v, st = forward_point(layer, prep, X)
            tape.inputs.append(X)
        else:
            mx, vx = tape.outputs[-1]
            m, v, st = forward_uncertain(layer, prep, mx, vx)
            tape.inputs.append((mx, vx))
        tape.outputs.append((m, v))
        tape.stats.append(st)
    return tape


def backward_batch(model: DgpModel, tape: Tape, gm, gv):
    """Reverse pass given cotangents of the final (B, 1) mean and variance."""
    grads = [None] * model.num_layers
    for i in reversed(range(model.num_layers)):
        layer, prep = model.layers[i], tape.preps[i]
        if i == 0:
            g = backward_point(layer, prep, tape.inputs[0], tape.stats[0],
                               gm, gv)
        else:
            mx, vx = tape.inputs[i]
            g = backward_uncertain(layer, prep, mx, vx, tape.outputs[i][0],
                                   tape.stats[i], gm, gv)
            gm, gv = g.pop("in_mean"), g.pop("in_var")
        grads[i] = g
    return grads


def gaussian_logpdf(y, m, v):
    return -0.5 * (LOG_2PI + np.log(v) + (y - m)**2 / v)


def logz_and_grads(model: DgpModel, beliefs, X, y, preps=None, policy=None):
    """Per-point log Z and gradients for a batch.

    Returns:
        ``(logz, grads)`` where ``logz`` has shape (B,) and ``grads`` holds
        one dict per layer: hyperparameter entries are summed over the
        batch; ``mean`` (B, D, M) and ``cov`` (B, D, M, M) are per-point
        gradients with respect to the inducing beliefs.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    tape = forward_batch(model, beliefs, X, preps, policy)
    m, v = tape.outputs[-1]
    logz = gaussian_logpdf(y, m, v)[:, 0]
    r = y - m
    gm = r / v
    gv = 0.5 * (r**2 / v**2 - 1.0 / v)
    return logz, backward_batch(model, tape, gm, gv)


def forward_moments(model: DgpModel, beliefs, x, policy=None) -> MomentBelief:
    tape = forward_batch(model, beliefs, np.atleast_2d(x), policy=policy)
    m, v = tape.outputs[-1]
    return MomentBelief(m[0], v[0])


def log_z(model: DgpModel, beliefs, x, y, policy=None) -> float:
    q = forward_moments(model, beliefs, x, policy)
    return float(gaussian_logpdf(float(y), q.mean[0], q.variance[0]))


def grad_log_z(model: DgpModel, beliefs, x, y, policy=None):
    """log Z of one datapoint and its gradients.

    Returns ``(value, grads)``; ``grads[l]`` has ``log_sf2``,
    ``log_lengthscales``, ``Z``, ``log_noise`` and the belief gradients
    ``mean`` (D, M) and ``cov`` (D, M, M) of layer ``l``.
    """
    logz, grads = logz_and_grads(model, beliefs, np.atleast_2d(x), [y],
                                 policy=policy)
    for g in grads:
        g["mean"] = g["mean"][0]
        g["cov"] = g["cov"][0]
    return float(logz[0]), grads


@dataclass
class Prediction:
    """Predictive moments; ``mean``/``variance`` are on the raw target scale."""

    mean: np.ndarray
    variance: np.ndarray
    std_mean: np.ndarray
    std_variance: np.ndarray


def predict(model: DgpModel, state: InferenceState, X_star, policy=None,
            standardized_inputs=False, batch_size=500) -> Prediction:
    """Predictive moments under the SEP posterior.

    ``X_star`` is on the raw scale unless ``standardized_inputs`` is set.
    """
    X = np.atleast_2d(np.asarray(X_star, dtype=np.float64))
    std = model.standardizer
    if std is not None and not standardized_inputs:
        X = std.transform_inputs(X)
    beliefs = state.posterior_beliefs()
    preps = prepare_all(model, beliefs, policy)
    means, variances = [], []
    for start in range(0, X.shape[0], batch_size):
        tape = forward_batch(model, beliefs, X[start:start + batch_size], preps)
        m, v = tape.outputs[-1]
        means.append(m[:, 0])
        variances.append(v[:, 0])
    mean = np.concatenate(means) if means else np.zeros(0)
    var = np.concatenate(variances) if variances else np.zeros(0)
    if std is not None:
        raw_mean, raw_var = std.inverse_target(mean, var)
    else:
        raw_mean, raw_var = mean.copy(), var.copy()
    return Prediction(raw_mean, raw_var, mean, var)
