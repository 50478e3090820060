"""One FITC sparse GP layer and Gaussian moment propagation through it.

A layer maps ``input_dim`` inputs to ``output_dim`` independent outputs that
share inducing inputs ``Z`` and kernel hyperparameters. Each output
dimension ``d`` has its own Gaussian belief over inducing outputs
``u_d ~ N(mean[d], cov[d])``. Propagation returns the moments of the
(projected) Gaussian over the layer's noisy outputs.

The heavy lifting is done by batched ``forward_*``/``backward_*`` functions
that act on a ``(B, input_dim)`` batch; ``propagate_point``,
``propagate_uncertain`` and ``layer_param_grads`` are thin single-input
wrappers around them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .kernel import (KernelParams, MomentBelief, gram, gram_vjp, psi_grads,
                     _psi1, _psi2, _psi2_spread)
from .numerics import (JitterPolicy, NotPositiveDefinite, chol_psd, inv_psd,
                       symmetrize)

# fixed diagonal added to every K_zz; part of the model definition, so it
# carries no gradient and oracles must add it as well
KZZ_JITTER = 1e-6
VARIANCE_FLOOR = 1e-12


class NumericalVarianceError(ArithmeticError):
    """A propagated variance fell below the floor.

    ``bad`` is a boolean mask over the batch marking offending datapoints.
    """

    def __init__(self, bad, message="propagated variance below floor"):
        super().__init__(message)
        self.bad = np.asarray(bad, dtype=bool)


@dataclass
class SparseGpLayer:
    Z: np.ndarray
    kernel: KernelParams
    log_noise: float
    output_dim: int = 1

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=np.float64)).copy()
        self.log_noise = float(self.log_noise)
        if self.Z.shape[0] < 1:
            raise ValueError("a layer needs at least one inducing point")
        if not np.all(np.isfinite(self.Z)):
            raise ValueError("inducing inputs must be finite")
        if self.output_dim < 1:
            raise ValueError("output_dim must be at least 1")
        if self.kernel.dim != self.Z.shape[1]:
            raise ValueError("kernel dimension does not match Z")

    @property
    def input_dim(self):
        return self.Z.shape[1]

    @property
    def num_inducing(self):
        return self.Z.shape[0]

    @property
    def noise(self):
        return float(np.exp(self.log_noise))

    def kzz(self):
        return gram(self.kernel, self.Z, self.Z) + KZZ_JITTER * np.eye(
            self.num_inducing)

    def copy(self):
        return SparseGpLayer(self.Z.copy(), self.kernel.copy(),
                             self.log_noise, self.output_dim)

    def num_params(self):
        return 2 + self.input_dim + self.Z.size


@dataclass
class GaussianSite:
    """Gaussian in natural parameters, one per output dimension.

    ``eta1`` is precision times mean, shape ``(D, M)``; ``eta2`` is the
    precision matrix itself, shape ``(D, M, M)``, so that the density is
    proportional to ``exp(-0.5 u' eta2 u + eta1' u)``.
    """

    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        self.eta1 = np.asarray(self.eta1, dtype=np.float64)
        self.eta2 = np.asarray(self.eta2, dtype=np.float64)

    @classmethod
    def zeros(cls, output_dim, M):
        return cls(np.zeros((output_dim, M)), np.zeros((output_dim, M, M)))

    def copy(self):
        return GaussianSite(self.eta1.copy(), self.eta2.copy())

    def __add__(self, other):
        return GaussianSite(self.eta1 + other.eta1, self.eta2 + other.eta2)

    def __sub__(self, other):
        return GaussianSite(self.eta1 - other.eta1, self.eta2 - other.eta2)

    def scaled(self, c):
        return GaussianSite(c * self.eta1, c * self.eta2)

    def moments(self):
        """Convert to ``InducingBelief``; raises if any precision is not PD."""
        D, M = self.eta1.shape
        mean = np.empty((D, M))
        cov = np.empty((D, M, M))
        for d in range(D):
            try:
                L = np.linalg.cholesky(self.eta2[d])
            except np.linalg.LinAlgError:
                raise NotPositiveDefinite(
                    f"precision of output dim {d} is not positive definite")
            cov[d] = inv_psd(L)
            mean[d] = cov[d] @ self.eta1[d]
        return InducingBelief(mean, cov)

    @classmethod
    def from_moments(cls, belief):
        prec = symmetrize(np.linalg.inv(belief.cov))
        return cls(np.einsum("dmn,dn->dm", prec, belief.mean), prec)


@dataclass
class InducingBelief:
    """Moments of the Gaussian over inducing outputs, per output dim."""

    mean: np.ndarray   # (D, M)
    cov: np.ndarray    # (D, M, M)

    def __post_init__(self):
        self.mean = np.atleast_2d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.ndim == 2:
            self.cov = self.cov[None]


def prior_belief(layer: SparseGpLayer, policy: Optional[JitterPolicy] = None):
    """The layer prior ``N(0, K_zz)`` replicated over output dims."""
    Kzz = layer.kzz()
    D, M = layer.output_dim, layer.num_inducing
    return InducingBelief(np.zeros((D, M)), np.broadcast_to(Kzz, (D, M, M)))


@dataclass
class Prepared:
    """Quantities shared by every datapoint for a fixed layer and belief."""

    Kinv: np.ndarray
    jitter: float
    mean: np.ndarray
    cov: np.ndarray
    a: np.ndarray        # Kinv @ mean_d, (D, M)
    B_det: np.ndarray    # Kinv cov Kinv - Kinv
    B_sto: np.ndarray    # Kinv (cov + mean mean') Kinv - Kinv
    chol: np.ndarray     # L with L L' = K_zz
    w_mean: np.ndarray   # L^-1 mean_d, (D, M)
    w_cov: np.ndarray    # L^-1 cov_d L^-T, (D, M, M)


def prepare(layer: SparseGpLayer, belief: InducingBelief,
            policy: Optional[JitterPolicy] = None) -> Prepared:
    L, jitter = chol_psd(layer.kzz(), policy)
    Kinv = inv_psd(L)
    mean, cov = belief.mean, belief.cov
    if mean.shape != (layer.output_dim, layer.num_inducing):
        raise ValueError(
            f"belief mean shape {mean.shape} does not match layer "
            f"({layer.output_dim}, {layer.num_inducing})")
    a = mean @ Kinv
    KcK = Kinv @ cov @ Kinv
    B_det = symmetrize(KcK - Kinv)
    B_sto = symmetrize(KcK + np.einsum("dm,dn->dmn", a, a) - Kinv)
    w_mean = sla.solve_triangular(L, mean.T, lower=True).T
    Lc = np.stack([sla.solve_triangular(L, c, lower=True) for c in cov])
    w_cov = symmetrize(np.stack([sla.solve_triangular(L, x.T, lower=True)
                                 for x in Lc]))
    return Prepared(Kinv, jitter, mean, cov, a, B_det, B_sto, L, w_mean, w_cov)


def _whitened_moments(prep: Prepared, k):
    """Mean and ``k' K^-1 V K^-1 k - k' K^-1 k`` for rows ``k`` of K_{x,z}.

    Works in the basis whitened by the Cholesky factor of K_zz, which needs
    a single triangular solve and avoids the cancellation of forming
    ``K^-1 cov K^-1 - K^-1`` explicitly.
    """
    w = sla.solve_triangular(prep.chol, k.T, lower=True).T     # (B, M)
    mean = w @ prep.w_mean.T
    quad = (np.einsum("bm,dmn,bn->bd", w, prep.w_cov, w, optimize=True)
            - np.sum(w * w, axis=1)[:, None])
    return mean, quad


def _check_variance(var):
    bad = ~(var > VARIANCE_FLOOR)
    if np.any(bad):
        raise NumericalVarianceError(np.any(bad, axis=1))


def forward_point(layer: SparseGpLayer, prep: Prepared, X):
    """Output moments for deterministic inputs ``X`` (B, input_dim)."""
    kfu = gram(layer.kernel, X, layer.Z)
    mean, quad = _whitened_moments(prep, kfu)
    var = layer.noise + layer.kernel.sf2 + quad
    _check_variance(var)
    return mean, var, kfu


def forward_uncertain(layer: SparseGpLayer, prep: Prepared, mx, vx):
    """Projected output moments for Gaussian inputs ``N(mx, diag(vx))``."""
    mx = np.atleast_2d(mx)
    vx = np.atleast_2d(vx)
    if mx.shape[1] != layer.input_dim:
        raise ValueError("input belief dimension does not match the layer")
    p1 = _psi1(layer.kernel, layer.Z, mx, vx)
    p2 = _psi2(layer.kernel, layer.Z, mx, vx)
    B, M = p1.shape
    # psi2 = psi1 psi1' + spread: the first part is handled exactly like a
    # point input, so the moments collapse to forward_point as vx -> 0
    mean, quad = _whitened_moments(prep, p1)
    spread = _psi2_spread(layer.kernel, layer.Z, mx, vx, p1, p2).reshape(B, M * M)
    trace = spread @ prep.B_sto.reshape(-1, M * M).T
    var = layer.noise + layer.kernel.sf2 + quad + trace
    _check_variance(var)
    return mean, var, (p1, p2)


def kzz_vjp(layer: SparseGpLayer, Kinv, dKinv):
    """Pull a cotangent of ``inv(K_zz)`` back to ``log_sf2``, lengthscales, Z."""
    dKzz = -Kinv @ dKinv @ Kinv
    K = gram(layer.kernel, layer.Z, layer.Z)
    g = gram_vjp(layer.kernel, layer.Z, layer.Z, K, dKzz)
    return g["log_sf2"], g["log_lengthscales"], g["X"] + g["X2"]


def _kzz_pullback(layer, prep, dKinv):
    return kzz_vjp(layer, prep.Kinv, dKinv)


def _dkinv(prep, G, S, da):
    """Cotangent of Kinv from B = Kinv S Kinv - Kinv and a = Kinv m."""
    Kinv = prep.Kinv
    KS = Kinv @ S
    term = ((G @ KS).sum(axis=0) + (np.swapaxes(KS, 1, 2) @ G).sum(axis=0)
            - G.sum(axis=0))
    return term + da.T @ prep.mean


def backward_point(layer: SparseGpLayer, prep: Prepared, X, kfu, gm, gv):
    """Pull output cotangents ``gm``, ``gv`` (B, D) back through a point layer.

    Cavity gradients (``mean`` (B, D, M) and ``cov`` (B, D, M, M)) are
    returned per datapoint; hyperparameter gradients are batch sums.
    """
    c = kfu @ prep.Kinv                                   # (B, M)
    dmean = gm[:, :, None] * c[:, None, :]
    dcov = gv[:, :, None, None] * np.einsum("bm,bn->bmn", c, c)[:, None]
    da = gm.T @ kfu
    G = np.einsum("bd,bm,bn->dmn", gv, kfu, kfu, optimize=True)
    dKinv = _dkinv(prep, G, prep.cov, da)
    cVK = (c @ prep.cov) @ prep.Kinv                      # (D, B, M)
    dkfu = gm @ prep.a + 2.0 * (np.einsum("bd,dbm->bm", gv, cVK)
                                - gv.sum(axis=1)[:, None] * c)
    gk = gram_vjp(layer.kernel, X, layer.Z, kfu, dkfu)
    s_sf, s_ls, s_Z = _kzz_pullback(layer, prep, dKinv)
    sum_gv = float(np.sum(gv))
    return {
        "log_sf2": gk["log_sf2"] + s_sf + layer.kernel.sf2 * sum_gv,
        "log_lengthscales": gk["log_lengthscales"] + s_ls,
        "Z": gk["X2"] + s_Z,
        "log_noise": layer.noise * sum_gv,
        "mean": dmean,
        "cov": dcov,
        # per-point cavity gradients are rank one: dmean = gm c, dcov = gv c c'
        "rank1": (c, gm, gv),
    }


def backward_uncertain(layer: SparseGpLayer, prep: Prepared, mx, vx, mean,
                       stats, gm, gv):
    """Pull cotangents back through an uncertain-input layer.

    Also returns ``in_mean``/``in_var`` cotangents for the layer inputs.
    """
    p1, p2 = stats
    gmt = gm - 2.0 * mean * gv
    c = p1 @ prep.Kinv                                    # (B, M)
    P = prep.Kinv @ p2 @ prep.Kinv
    Pm = np.einsum("bmn,dn->bdm", P, prep.mean)
    dmean = gmt[:, :, None] * c[:, None, :] + 2.0 * gv[:, :, None] * Pm
    dcov = gv[:, :, None, None] * P[:, None]
    da = gmt.T @ p1
    G = np.einsum("bd,bmn->dmn", gv, p2)
    S = prep.cov + np.einsum("dm,dn->dmn", prep.mean, prep.mean)
    dKinv = _dkinv(prep, G, S, da)
    dpsi1 = gmt @ prep.a
    dpsi2 = np.einsum("bd,dmn->bmn", gv, prep.B_sto)
    gp = psi_grads(layer.kernel, layer.Z, MomentBelief(mx, vx), dpsi1=dpsi1,
                   dpsi2=dpsi2, psi1_val=p1, psi2_val=p2)
    s_sf, s_ls, s_Z = _kzz_pullback(layer, prep, dKinv)
    sum_gv = float(np.sum(gv))
    return {
        "log_sf2": gp["log_sf2"] + s_sf + layer.kernel.sf2 * sum_gv,
        "log_lengthscales": gp["log_lengthscales"] + s_ls,
        "Z": gp["Z"] + s_Z,
        "log_noise": layer.noise * sum_gv,
        "mean": dmean,
        "cov": dcov,
        "in_mean": gp["mean"],
        "in_var": gp["variance"],
    }


def propagate_point(layer: SparseGpLayer, belief: InducingBelief, x,
                    policy: Optional[JitterPolicy] = None) -> MomentBelief:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != (layer.input_dim,):
        raise ValueError("input dimension does not match the layer")
    prep = prepare(layer, belief, policy)
    mean, var, _ = forward_point(layer, prep, x[None])
    return MomentBelief(mean[0], var[0])


def propagate_uncertain(layer: SparseGpLayer, belief: InducingBelief,
                        q_in: MomentBelief,
                        policy: Optional[JitterPolicy] = None) -> MomentBelief:
    prep = prepare(layer, belief, policy)
    mean, var, _ = forward_uncertain(
        layer, prep, np.atleast_2d(q_in.mean), np.atleast_2d(q_in.variance))
    return MomentBelief(mean[0], var[0])


def layer_param_grads(layer: SparseGpLayer, belief: InducingBelief, q_in,
                      upstream_mean, upstream_var,
                      policy: Optional[JitterPolicy] = None):
    """Gradients of ``<upstream_mean, mean> + <upstream_var, var>``.

    ``q_in`` is either a deterministic input vector or a ``MomentBelief``.
    """
    gm = np.atleast_2d(np.asarray(upstream_mean, dtype=np.float64))
    gv = np.atleast_2d(np.asarray(upstream_var, dtype=np.float64))
    prep = prepare(layer, belief, policy)
    if isinstance(q_in, MomentBelief):
        mx = np.atleast_2d(q_in.mean)
        vx = np.atleast_2d(q_in.variance)
        mean, _, stats = forward_uncertain(layer, prep, mx, vx)
        g = backward_uncertain(layer, prep, mx, vx, mean, stats, gm, gv)
        g["in_mean"] = g["in_mean"][0]
        g["in_var"] = g["in_var"][0]
    else:
        X = np.atleast_2d(np.asarray(q_in, dtype=np.float64))
        _, _, kfu = forward_point(layer, prep, X)
        g = backward_point(layer, prep, X, kfu, gm, gv)
    g["mean"] = g["mean"][0]
    g["cov"] = g["cov"][0]
    return g
