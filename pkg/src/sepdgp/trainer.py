"""Initialization, Adam, and the interleaved SEP / hyperparameter loop."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial.distance import pdist

from .data import Standardizer, fit_standardizer, Dataset
from .kernel import KernelParams
from .layer import (GaussianSite, InducingBelief, NumericalVarianceError,
                    SparseGpLayer, kzz_vjp)
from .network import (DgpModel, InferenceState, flatten_param_grads,
                      logz_and_grads, prepare_all)
from .numerics import FactorizationFailed, NotPositiveDefinite, batch_is_pd
from .sep import (SepConfig, batch_site_estimates, compounded_damping,
                  rank1_site_estimates)

logger = logging.getLogger(__name__)

HIDDEN_SPREAD = 2.0
HIDDEN_NOISE = 0.01
OUTPUT_NOISE = 0.1
KMEANS_ITERS = 10
MEDIAN_SUBSAMPLE = 1000


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    pass


# -- architecture strings ----------------------------------------------------

_LAYER_RE = re.compile(r"^\s*(\d+|y)\s*@\s*(\d+)\s*$")


@dataclass(frozen=True)
class Architecture:
    """Hidden layers as ``(dim, M)`` pairs plus the final layer's ``M``."""

    hidden: Tuple[Tuple[int, int], ...]
    final_m: int

    @classmethod
    def parse(cls, text: str) -> "Architecture":
        parts = text.split(",")
        hidden = []
        for i, part in enumerate(parts):
            match = _LAYER_RE.match(part)
            if not match:
                raise ValueError(f"bad layer spec {part!r} in {text!r}")
            dim, M = match.groups()
            last = i == len(parts) - 1
            if (dim == "y") != last:
                raise ValueError(
                    f"{text!r}: only the final layer is written 'y@M'")
            if int(M) < 1 or (dim != "y" and int(dim) < 1):
                raise ValueError(f"{text!r}: sizes must be positive")
            if last:
                return cls(tuple(hidden), int(M))
            hidden.append((int(dim), int(M)))
        raise ValueError(f"empty architecture {text!r}")

    def __str__(self):
        return ",".join([f"{d}@{m}" for d, m in self.hidden]
                        + [f"y@{self.final_m}"])

    @property
    def layer_sizes(self):
        """``(output_dim, M)`` for every layer, first to last."""
        return list(self.hidden) + [(1, self.final_m)]


# -- configuration -----------------------------------------------------------

@dataclass
class TrainConfig:
    architecture: str = "y@50"
    minibatch_size: int = 50
    iterations: int = 4000
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    objective: str = "energy"
    sep: SepConfig = field(default_factory=SepConfig)

    def __post_init__(self):
        if isinstance(self.sep, dict):
            self.sep = SepConfig(**self.sep)
        Architecture.parse(self.architecture)
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be at least 1")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.objective not in ("energy", "logz"):
            raise ValueError("objective must be 'energy' or 'logz'")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def arch(self):
        return Architecture.parse(self.architecture)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam ascent step; returns ``(params, state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ValueError("shape mismatch between params, grads and state")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("non-finite gradient")
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.step_count + 1
    m = b1 * state.first_moment + (1 - b1) * grads
    v = b2 * state.second_moment + (1 - b2) * grads**2
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    step = config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return params + step, AdamState(m, v, t)


# -- initialization ----------------------------------------------------------

def median_lengthscales(X, rng):
    """Per-dimension median pairwise distance, falling back to 1 if zero."""
    if X.shape[0] > MEDIAN_SUBSAMPLE:
        X = X[rng.choice(X.shape[0], MEDIAN_SUBSAMPLE, replace=False)]
    ell = np.array([np.median(pdist(X[:, [d]])) if X.shape[0] > 1 else 0.0
                    for d in range(X.shape[1])])
    degenerate = ~(ell > 0)
    if np.any(degenerate):
        logger.info("lengthscale fallback 1.0 for dims %s",
                    np.flatnonzero(degenerate))
    return np.where(degenerate, 1.0, ell)


def kmeans_centers(X, M, rng):
    init = X[np.sort(rng.choice(X.shape[0], M, replace=False))]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        centers, _ = kmeans2(X, init.copy(), iter=KMEANS_ITERS, minit="matrix",
                             missing="warn")
    return centers


def init_model(X, y, arch, seed=0, standardizer: Optional[Standardizer] = None):
    """Heuristic initial model and a prior-only inference state.

    ``X`` and ``y`` are the (standardized) training data.
    """
    if isinstance(arch, str):
        arch = Architecture.parse(arch)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    N, D = X.shape
    sizes = arch.layer_sizes
    M1 = sizes[0][1]
    if M1 > N:
        raise ValueError(f"first layer wants {M1} inducing points, N={N}")
    rng = np.random.default_rng(seed)
    layers = []
    in_dim = D
    for i, (out_dim, M) in enumerate(sizes):
        last = i == len(sizes) - 1
        noise = OUTPUT_NOISE if last else HIDDEN_NOISE
        if i == 0:
            ell = median_lengthscales(X, rng)
            Z = kmeans_centers(X, M, rng)
        else:
            ell = np.full(in_dim, 10.0 * HIDDEN_SPREAD)
            Z = rng.uniform(-1.0, 1.0, size=(M, in_dim))
        layers.append(SparseGpLayer(Z, KernelParams(0.0, np.log(ell)),
                                    np.log(noise), out_dim))
        in_dim = out_dim
    model = DgpModel(layers, standardizer)
    return model, InferenceState.initial(model, N)


# -- training ----------------------------------------------------------------

@dataclass
class History:
    iteration: List[int] = field(default_factory=list)
    mean_logz: List[float] = field(default_factory=list)
    skips: List[int] = field(default_factory=list)
    jitter_events: List[int] = field(default_factory=list)

    def append(self, it, mean_logz, skips, jitter_events):
        self.iteration.append(int(it))
        self.mean_logz.append(float(mean_logz))
        self.skips.append(int(skips))
        self.jitter_events.append(int(jitter_events))

    @property
    def total_skips(self):
        return int(sum(self.skips))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "mean_logZ", "skips", "jitter_events"])
            for row in zip(self.iteration, self.mean_logz, self.skips,
                           self.jitter_events):
                w.writerow([row[0], "%.17g" % row[1], row[2], row[3]])


class MinibatchSampler:
    """Without replacement within an epoch, reshuffled every epoch."""

    def __init__(self, n, size, rng):
        self.n, self.size, self.rng = n, min(size, n), rng
        self._perm = np.empty(0, dtype=int)

    def next(self):
        out = []
        need = self.size
        while need:
            if self._perm.size == 0:
                self._perm = self.rng.permutation(self.n)
            take = self._perm[:need]
            self._perm = self._perm[need:]
            out.append(take)
            need -= take.size
        return np.concatenate(out)


def energy_extra_grads(model, state, cavities, scaled_grads):
    """Gradient of the SEP energy beyond the fixed-cavity log Z terms.

    Holds every averaged factor fixed and differentiates the log-partition
    terms ``phi(q) - phi(prior) + N (phi(cav) - phi(q))`` and the dependence
    of the cavity moments on the prior precision. ``scaled_grads`` are the
    minibatch-summed, ``N/|B|``-scaled log Z gradients.
    """
    N = state.n_train
    out = []
    for layer, prior, q, cav, g in zip(model.layers, state.priors,
                                       state.posteriors, cavities,
                                       scaled_grads):
        Kinv = prior.eta2[0]
        qb = q.moments()
        S_q = qb.cov + np.einsum("dm,dn->dmn", qb.mean, qb.mean)
        S_c = cav.cov + np.einsum("dm,dn->dmn", cav.mean, cav.mean)
        Kzz = np.linalg.inv(Kinv)
        D = layer.output_dim
        dKinv = (0.5 * D * Kzz + 0.5 * (N - 1) * S_q.sum(0)
                 - 0.5 * N * S_c.sum(0))
        dm = g["mean"].sum(axis=0) if g["mean"].ndim == 3 else g["mean"]
        dV = g["cov"].sum(axis=0) if g["cov"].ndim == 4 else g["cov"]
        V = cav.cov
        dKinv -= (V @ dV @ V).sum(axis=0)
        dKinv -= np.einsum("dmk,dk,dn->mn", V, dm, cav.mean)
        sf, ls, Z = kzz_vjp(layer, Kinv, dKinv)
        out.append({"log_sf2": sf, "log_lengthscales": ls, "Z": Z,
                    "log_noise": 0.0})
    return out


def _scale_grads(g, scale):
    """Scale parameter gradients; per-point belief grads are batch-summed."""
    out = {k: scale * v for k, v in g.items()
           if k not in ("rank1", "mean", "cov")}
    out["mean"] = scale * g["mean"].sum(axis=0)
    out["cov"] = scale * g["cov"].sum(axis=0)
    return out


def _sum_grads(a, b):
    return [{k: a[i][k] + b[i][k] for k in ("log_sf2", "log_lengthscales",
                                             "Z", "log_noise")}
            for i in range(len(a))]


def _batch_logz(model, beliefs, X, y, parallel):
    """log Z and gradients, dropping points with failed variances."""
    keep = np.ones(X.shape[0], dtype=bool)
    preps = prepare_all(model, beliefs)
    for _ in range(X.shape[0] + 1):
        idx = np.flatnonzero(keep)
        if idx.size == 0:
            return preps, idx, None, None
        try:
            if parallel and idx.size > 1:
                logz, grads = _parallel_logz(model, beliefs, X[idx], y[idx],
                                             preps)
            else:
                logz, grads = logz_and_grads(model, beliefs, X[idx], y[idx],
                                             preps)
            return preps, idx, logz, grads
        except NumericalVarianceError as exc:
            bad = exc.bad if exc.bad.shape == idx.shape else np.ones_like(idx, bool)
            keep[idx[bad]] = False
    raise AssertionError("unreachable")


def _parallel_logz(model, beliefs, X, y, preps, workers=4):
    chunks = np.array_split(np.arange(X.shape[0]), min(workers, X.shape[0]))
    with ThreadPoolExecutor(len(chunks)) as ex:
        results = list(ex.map(
            lambda c: logz_and_grads(model, beliefs, X[c], y[c], preps),
            chunks))
    logz = np.concatenate([r[0] for r in results])
    grads = []
    for i in range(model.num_layers):
        g = {}
        for k in results[0][1][i]:
            vals = [r[1][i][k] for r in results]
            if k in ("mean", "cov"):
                g[k] = np.concatenate(vals, axis=0)
            elif k == "rank1":
                g[k] = tuple(np.concatenate(parts, axis=0)
                             for parts in zip(*vals))
            else:
                g[k] = sum(vals[1:], vals[0])
        grads.append(g)
    return logz, grads


def _site_estimates(cav, g):
    if "rank1" in g:
        return rank1_site_estimates(cav, *g["rank1"])
    return batch_site_estimates(cav, g["mean"], g["cov"])


def _mean_site_estimate(cav, g, est, ok):
    """Average accepted site estimates; ``ok`` is the all-layer mask."""
    e1, e2, own_ok = est
    if "rank1" in g:
        if np.array_equal(ok, own_ok):
            return e1, e2
        c, gm, gv = g["rank1"]
        e1, e2, _ = rank1_site_estimates(cav, c[ok], gm[ok], gv[ok])
        return e1, e2
    return e1[ok].mean(0), e2[ok].mean(0)


class Trainer:
    """Holds the mutable training state; ``step`` runs one minibatch."""

    def __init__(self, model: DgpModel, state: InferenceState, X, y,
                 config: TrainConfig):
        self.model, self.state, self.config = model, state, config
        self.X, self.y = X, y
        self.N = X.shape[0]
        self.rng = np.random.default_rng(config.seed)
        self.sampler = MinibatchSampler(self.N, config.minibatch_size,
                                        self.rng)
        self.adam = AdamState.zeros(model.num_params())
        self.history = History()
        self.iteration = 0

    def step(self):
        idx = self.sampler.next()
        self.iteration += 1
        if self.config.sep.per_datapoint:
            out = self._step_per_datapoint(idx)
        else:
            out = self._step_minibatch(idx)
        mean_logz, skips, jitters, param_grads = out
        if param_grads is not None:
            jitters += self._hyper_step(param_grads)
        self.history.append(self.iteration, mean_logz, skips, jitters)

    def _sep_update(self, layer_i, eta1_hat, eta2_hat, eta):
        """Damped factor update for one layer.

        The step is halved while the new posterior is not PD; returns False
        if no admissible step was found, leaving the state untouched.
        """
        g = self.state.factors[layer_i]
        theta_hat = GaussianSite(eta1_hat, eta2_hat)
        for _ in range(self.config.sep.max_halvings + 1):
            new_g = g.scaled(1.0 - eta) + theta_hat.scaled(eta)
            new_q = self.state.priors[layer_i] + new_g.scaled(self.N)
            if np.all(batch_is_pd(new_q.eta2)):
                self.state.factors[layer_i] = new_g
                self.state.posteriors[layer_i] = new_q
                return True
            eta *= 0.5
        return False

    def _cavities(self):
        return [site.moments() for site in self.state.cavity_sites()]

    def _step_minibatch(self, idx):
        cfg = self.config
        try:
            cavities = self._cavities()
        except NotPositiveDefinite:
            logger.warning("iteration %d: cavity not PD, minibatch skipped",
                           self.iteration)
            return float("nan"), idx.size, 0, None
        try:
            preps, kept, logz, grads = _batch_logz(
                self.model, cavities, self.X[idx], self.y[idx],
                cfg.sep.parallel_within_minibatch)
        except FactorizationFailed:
            logger.warning("iteration %d: K_zz factorization failed",
                           self.iteration)
            return float("nan"), idx.size, 1, None
        jitters = sum(p.jitter > 0 for p in preps)
        skips = idx.size - kept.size
        if kept.size == 0:
            return float("nan"), skips, jitters, None

        scale = self.N / kept.size
        scaled = [_scale_grads(g, scale) for g in grads]
        if cfg.objective == "energy":
            scaled = _sum_grads(scaled, energy_extra_grads(
                self.model, self.state, cavities, scaled))

        eta = cfg.sep.eta(self.N)
        ests = [_site_estimates(cav, g) for cav, g in zip(cavities, grads)]
        ok = np.all([e[2] for e in ests], axis=0)
        skips += int(np.sum(~ok))
        if np.any(ok):
            step = compounded_damping(eta, int(np.sum(ok)))
            for i, (cav, g) in enumerate(zip(cavities, grads)):
                e1, e2 = _mean_site_estimate(cav, g, ests[i], ok)
                if not self._sep_update(i, e1, e2, step):
                    logger.debug("layer %d: SEP update reverted", i)
                    skips += int(np.sum(ok))
        return float(np.mean(logz)), skips, jitters, scaled

    def _step_per_datapoint(self, idx):
        cfg = self.config
        eta = cfg.sep.eta(self.N)
        total = None
        logzs, skips, jitters = [], 0, 0
        for n in idx:
            try:
                cavities = self._cavities()
                preps, kept, logz, grads = _batch_logz(
                    self.model, cavities, self.X[[n]], self.y[[n]], False)
            except (NotPositiveDefinite, FactorizationFailed):
                skips += 1
                continue
            jitters += sum(p.jitter > 0 for p in preps)
            if kept.size == 0:
                skips += 1
                continue
            logzs.append(logz[0])
            scaled = [_scale_grads(g, float(self.N)) for g in grads]
            if cfg.objective == "energy":
                scaled = _sum_grads(scaled, energy_extra_grads(
                    self.model, self.state, cavities, scaled))
            scaled = [{k: v / len(idx) for k, v in g.items()} for g in scaled]
            total = scaled if total is None else _sum_grads(total, scaled)
            ests = [batch_site_estimates(cav, g["mean"], g["cov"])
                    for cav, g in zip(cavities, grads)]
            if not all(e[2][0] for e in ests):
                skips += 1
                continue
            for i, (e1, e2, _) in enumerate(ests):
                if not self._sep_update(i, e1[0], e2[0], eta):
                    skips += 1
        mean_logz = float(np.mean(logzs)) if logzs else float("nan")
        return mean_logz, skips, jitters, total

    def _hyper_step(self, param_grads):
        """Adam step on hyperparameters; reverts if the state breaks."""
        if self.config.learning_rate == 0:
            # state priors are unchanged, nothing to rebuild
            self.adam = AdamState(self.adam.first_moment,
                                  self.adam.second_moment,
                                  self.adam.step_count + 1)
            return 0
        flat = flatten_param_grads(param_grads)
        theta = self.model.get_params()
        try:
            new_theta, new_adam = adam_step(theta, flat, self.adam,
                                            self.config)
        except NonFiniteGradient:
            logger.warning("iteration %d: non-finite gradient, step skipped",
                           self.iteration)
            return 0
        self.model.set_params(new_theta)
        try:
            self.state.rebuild(self.model)
        except (NotPositiveDefinite, FactorizationFailed):
            logger.warning("iteration %d: hyperparameter step reverted",
                           self.iteration)
            self.model.set_params(theta)
            self.state.rebuild(self.model)
            return 1
        self.adam = new_adam
        return sum(j > 0 for j in self.state.jitters)


def train(X, y, config: TrainConfig, callback=None):
    """Standardize, initialize and train a model.

    Returns:
        ``(model, state, history)``; ``model.standardizer`` holds the
        training-set statistics.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    std = fit_standardizer(Dataset("train", X, y))
    Xs, ys = std.transform_inputs(X), std.transform_target(y)
    model, state = init_model(Xs, ys, config.arch, config.seed, std)
    trainer = Trainer(model, state, Xs, ys, config)
    for _ in range(config.iterations):
        trainer.step()
        if callback is not None:
            callback(trainer)
    if all(s >= config.minibatch_size for s in trainer.history.skips):
        raise TrainingAborted("every datapoint update failed")
    return trainer.model, trainer.state, trainer.history
