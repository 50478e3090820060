"""RBF-ARD kernel and its expectations under diagonal Gaussian inputs.

Convention used throughout::

    k(x, x') = sf2 * exp(-0.5 * sum_d (x_d - x'_d)**2 / ell_d**2)

Hyperparameters live in log space (``log_sf2`` and ``log_lengthscales``).
The psi-statistics accept either a single belief (mean of shape ``(D,)``) or
a batch of beliefs (mean of shape ``(B, D)``); outputs gain a leading batch
axis in the latter case.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KernelParams:
    log_sf2: float
    log_lengthscales: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        self.log_sf2 = float(self.log_sf2)
        self.log_lengthscales = np.atleast_1d(
            np.asarray(self.log_lengthscales, dtype=np.float64)).copy()
        if not (np.isfinite(self.log_sf2)
                and np.all(np.isfinite(self.log_lengthscales))):
            raise ValueError("kernel parameters must be finite")

    @classmethod
    def from_natural(cls, sf2, lengthscales):
        return cls(np.log(sf2), np.log(np.atleast_1d(lengthscales)))

    @property
    def sf2(self):
        return float(np.exp(self.log_sf2))

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscales)

    @property
    def dim(self):
        return self.log_lengthscales.shape[0]

    def copy(self):
        return KernelParams(self.log_sf2, self.log_lengthscales.copy())


@dataclass
class MomentBelief:
    """Diagonal Gaussian belief; ``mean``/``variance`` are ``(D,)`` or ``(B, D)``."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        if self.mean.shape != self.variance.shape:
            raise ValueError(
                f"mean shape {self.mean.shape} != variance shape "
                f"{self.variance.shape}")
        if np.any(self.variance < 0):
            raise ValueError("variances must be non-negative")

    @property
    def dim(self):
        return self.mean.shape[-1]


def _check_dim(p: KernelParams, *arrays):
    for a in arrays:
        if np.shape(a)[-1] != p.dim:
            raise ValueError(
                f"input dimension {np.shape(a)[-1]} does not match kernel "
                f"dimension {p.dim}")


def kernel_eval(p: KernelParams, x, x2):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    x2 = np.atleast_1d(np.asarray(x2, dtype=np.float64))
    _check_dim(p, x, x2)
    r = (x - x2) / p.lengthscales
    return p.sf2 * float(np.exp(-0.5 * np.dot(r, r)))


def gram(p: KernelParams, X, X2):
    """Kernel matrix between the rows of ``X`` (N, D) and ``X2`` (M, D)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    X2 = np.atleast_2d(np.asarray(X2, dtype=np.float64))
    _check_dim(p, X, X2)
    ell = p.lengthscales
    A = X / ell
    B = X2 / ell
    sq = (np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :]
          - 2.0 * A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return p.sf2 * np.exp(-0.5 * sq)


def gram_vjp(p: KernelParams, X, X2, K, dK):
    """Pull ``dK`` (cotangent of ``gram(p, X, X2)``) back to the inputs.

    Returns:
        dict with ``log_sf2``, ``log_lengthscales``, ``X`` and ``X2``.
    """
    ell2 = p.lengthscales**2
    G = dK * K
    R = X[:, None, :] - X2[None, :, :]
    GR = np.einsum("nm,nmd->nd", G, R) / ell2
    GRm = np.einsum("nm,nmd->md", G, R) / ell2
    return {
        "log_sf2": float(np.sum(G)),
        "log_lengthscales": np.einsum("nm,nmd->d", G, R**2) / ell2,
        "X": -GR,
        "X2": GRm,
    }


def psi0(p: KernelParams, q: MomentBelief):
    """E[k(h, h)] under ``q``; equals ``sf2`` for a stationary kernel."""
    if q.mean.ndim == 1:
        return p.sf2
    return np.full(q.mean.shape[0], p.sf2)


def psi1(p: KernelParams, Z, q: MomentBelief):
    """E[k(h, z_m)] under ``q`` for every row ``z_m`` of ``Z``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    _check_dim(p, Z, q.mean)
    single = q.mean.ndim == 1
    mx = np.atleast_2d(q.mean)
    vx = np.atleast_2d(q.variance)
    out = _psi1(p, Z, mx, vx)
    return out[0] if single else out


def psi2(p: KernelParams, Z, q: MomentBelief):
    """E[k(z_m, h) k(h, z_m')] under ``q``, an ``(M, M)`` matrix per belief."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    _check_dim(p, Z, q.mean)
    single = q.mean.ndim == 1
    mx = np.atleast_2d(q.mean)
    vx = np.atleast_2d(q.variance)
    out = _psi2(p, Z, mx, vx)
    return out[0] if single else out


def _psi1(p, Z, mx, vx):
    ell2 = p.lengthscales**2
    s = ell2 + vx                                   # (B, D)
    r = mx[:, None, :] - Z[None, :, :]              # (B, M, D)
    log_scale = 0.5 * np.sum(np.log(ell2) - np.log(s), axis=1)
    quad = np.sum(r**2 / s[:, None, :], axis=2)
    return p.sf2 * np.exp(log_scale[:, None] - 0.5 * quad)


def _psi2(p, Z, mx, vx):
    ell2 = p.lengthscales**2
    M = Z.shape[0]
    t = ell2 + 2.0 * vx                             # (B, D)
    d = Z[:, None, :] - Z[None, :, :]               # (M, M, D)
    zbar = (0.5 * (Z[:, None, :] + Z[None, :, :])).reshape(M * M, -1)
    log_scale = 0.5 * np.sum(np.log(ell2) - np.log(t), axis=1)
    dist_z = np.sum(d**2 / (4.0 * ell2), axis=2)
    # sum_d (m - zbar)^2 / t expanded so no (B, M, M, D) array is formed
    it = 1.0 / t
    quad = (np.sum(mx**2 * it, axis=1)[:, None]
            - 2.0 * (mx * it) @ zbar.T + it @ (zbar**2).T)
    return p.sf2**2 * np.exp(
        log_scale[:, None, None] - dist_z[None] - quad.reshape(-1, M, M))


def _psi2_spread(p, Z, mx, vx, p1, p2):
    """``psi2 - psi1 psi1'`` without subtracting the two where they are close.

    Per dimension, with ``t = ell^2``, ``a = m - z_m`` and ``b = m - z_m'``,
    the log of ``psi2 / (psi1 psi1')`` is
    ``log1p(v/t) - log1p(2v/t)/2 - v^2 (a^2 + b^2) / (2 t (t+v) (t+2v))
    + v a b / (t (t+2v))``, which has no cancellation as ``v -> 0``. Where
    the ratio exceeds e the plain difference is already accurate (and the
    product form could overflow), so it is used instead.
    """
    t = p.lengthscales**2
    s1 = t + vx
    s2 = t + 2.0 * vx
    A = mx[:, None, :] - Z[None, :, :]               # (B, M, D)
    log_det = np.sum(np.log1p(vx / t) - 0.5 * np.log1p(2.0 * vx / t), axis=1)
    w_sq = vx**2 / (2.0 * t * s1 * s2)                # (B, D)
    u = np.einsum("bmd,bd->bm", A**2, w_sq)
    cross = np.einsum("bmd,bnd->bmn", A * (vx / (t * s2))[:, None, :], A)
    log_ratio = log_det[:, None, None] - u[:, :, None] - u[:, None, :] + cross
    outer = p1[:, :, None] * p1[:, None, :]
    small = log_ratio <= 1.0
    return np.where(small, outer * np.expm1(np.minimum(log_ratio, 1.0)),
                    p2 - outer)


def psi_grads(p: KernelParams, Z, q: MomentBelief, dpsi1=None, dpsi2=None,
              dpsi0=None, psi1_val=None, psi2_val=None):
    """Reverse-mode pullback of the psi-statistics.

    Given cotangents ``dpsi0``, ``dpsi1``, ``dpsi2`` (any may be ``None``)
    with the shapes of the corresponding statistics, returns the gradient
    of ``sum(dpsi0*psi0) + sum(dpsi1*psi1) + sum(dpsi2*psi2)`` with respect
    to ``log_sf2``, ``log_lengthscales``, ``Z``, ``mean`` and ``variance``.
    Previously computed statistics can be passed in to avoid recomputation.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    single = q.mean.ndim == 1
    mx = np.atleast_2d(q.mean)
    vx = np.atleast_2d(q.variance)
    B, D = mx.shape
    ell2 = p.lengthscales**2

    g = {
        "log_sf2": 0.0,
        "log_lengthscales": np.zeros(D),
        "Z": np.zeros_like(Z),
        "mean": np.zeros((B, D)),
        "variance": np.zeros((B, D)),
    }
    if dpsi0 is not None:
        g["log_sf2"] += p.sf2 * float(np.sum(dpsi0))

    if dpsi1 is not None:
        dpsi1 = np.asarray(dpsi1).reshape(B, -1)
        P1 = (_psi1(p, Z, mx, vx) if psi1_val is None
              else np.asarray(psi1_val).reshape(B, -1))
        G1 = dpsi1 * P1                              # (B, M)
        s = ell2 + vx                                # (B, D)
        r = mx[:, None, :] - Z[None, :, :]           # (B, M, D)
        r_s = r / s[:, None, :]
        g["log_sf2"] += float(np.sum(G1))
        g["mean"] -= np.einsum("bm,bmd->bd", G1, r_s)
        g["Z"] += np.einsum("bm,bmd->md", G1, r_s)
        g["variance"] += 0.5 * np.einsum(
            "bm,bmd->bd", G1, r_s**2 - 1.0 / s[:, None, :])
        g["log_lengthscales"] += np.einsum(
            "bm,bmd->d", G1,
            1.0 - ell2 / s[:, None, :] + ell2 * r_s**2)

    if dpsi2 is not None:
        M = Z.shape[0]
        dpsi2 = np.asarray(dpsi2).reshape(B, M, M)
        P2 = (_psi2(p, Z, mx, vx) if psi2_val is None
              else np.asarray(psi2_val).reshape(dpsi2.shape))
        G2 = (dpsi2 * P2).reshape(B, M * M)
        t = ell2 + 2.0 * vx                          # (B, D)
        it = 1.0 / t
        d2 = ((Z[:, None, :] - Z[None, :, :])**2).reshape(M * M, D)
        zbar = (0.5 * (Z[:, None, :] + Z[None, :, :])).reshape(M * M, D)
        # moments of zbar under G2 per datapoint: sum_mn G2 zbar^k
        s0 = G2.sum(axis=1)[:, None]                 # (B, 1)
        s1 = G2 @ zbar                               # (B, D)
        s2 = G2 @ zbar**2
        # sum_mn G2 e_t and sum_mn G2 e_t^2 with e_t = (m - zbar) / t
        ge = (mx * s0 - s1) * it
        ge2 = (mx**2 * s0 - 2.0 * mx * s1 + s2) * it**2
        g["log_sf2"] += 2.0 * float(np.sum(s0))
        g["mean"] -= 2.0 * ge
        g["variance"] += 2.0 * ge2 - s0 * it
        Gs = G2.sum(axis=0)                          # (M*M,)
        g["log_lengthscales"] += (
            np.sum(s0 * (1.0 - ell2 * it) + 2.0 * ell2 * ge2, axis=0)
            + (Gs @ d2) / (2.0 * ell2))
        # Ge[mn, d] = sum_b G2[b, mn] e_t[b, mn, d]
        Ge = (G2.T @ (mx * it) - zbar * (G2.T @ it)).reshape(M, M, D)
        Gs = Gs.reshape(M, M)
        hd = (Z[:, None, :] - Z[None, :, :]) / (2.0 * ell2)
        g["Z"] += (np.einsum("mn,mnd->md", Gs, -hd) + Ge.sum(axis=1)
                   + np.einsum("mn,mnd->nd", Gs, hd) + Ge.sum(axis=0))

    if single:
        g["mean"] = g["mean"][0]
        g["variance"] = g["variance"][0]
    return g
