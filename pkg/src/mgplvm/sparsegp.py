"""Collapsed sparse variational GP bound and predictive posterior.

Both routines work through ``m x m`` Cholesky factors only, so the cost is
``O(M m^2)`` per GP. Leading axes broadcast. The ``*_columns`` variants take
observations of shape ``(..., M, R)`` whose ``R`` columns are outputs of one
GP (tied hyperparameters and inducing points share all factorizations).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .kernel import KernelParams, gram
from .manifold import Manifold, as_tensor

LOG_2PI = math.log(2.0 * math.pi)
# multiples of alpha^2 added to K_ZZ, tried in order until Cholesky succeeds
JITTER_LADDER = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


class NumericalError(RuntimeError):
    """Cholesky factorization failed even at the largest jitter."""


@dataclass
class GPHyper:
    kernel: KernelParams
    log_sigma: torch.Tensor

    def __post_init__(self):
        self.log_sigma = as_tensor(self.log_sigma)

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)


def _chol_with_jitter(K: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    eye = torch.eye(K.shape[-1], dtype=K.dtype)
    scale = scale.detach()[..., None, None]
    for j in JITTER_LADDER:
        L, info = torch.linalg.cholesky_ex(K + j * scale * eye)
        if not bool((info > 0).any()):
            return L
    Kd = K.detach()
    if bool(torch.isfinite(Kd).all()):
        eig = torch.linalg.eigvalsh(Kd)
        detail = f"min eigenvalue {eig.min().item():.3e}, max {eig.max().item():.3e}"
    else:
        detail = "matrix has non-finite entries"
    raise NumericalError(
        f"Cholesky failed at jitter {JITTER_LADDER[-1]:g}*alpha^2; {detail}, shape {tuple(K.shape)}"
    )


def _factors(X, Z, h: GPHyper, m: Manifold):
    kp = h.kernel
    alpha2 = torch.exp(2.0 * kp.log_alpha)
    L = _chol_with_jitter(gram(kp, m, Z, Z), alpha2)
    Kzx = gram(kp, m, Z, X)
    sigma = torch.exp(h.log_sigma)
    A = torch.linalg.solve_triangular(L, Kzx, upper=False) / sigma[..., None, None]
    B = A @ A.transpose(-1, -2) + torch.eye(A.shape[-2], dtype=A.dtype)
    LB = torch.linalg.cholesky(B)
    return L, A, LB, alpha2, sigma


def titsias_bound_columns(Y, X, Z, h: GPHyper, m: Manifold) -> torch.Tensor:
    """Bound for each column of ``Y (..., M, R)``; returns ``(..., R)``."""
    M = X.shape[-2]
    L, A, LB, alpha2, sigma = _factors(X, Z, h, m)
    c = torch.linalg.solve_triangular(LB, A @ Y / sigma[..., None, None], upper=False)
    logdet_B = torch.log(torch.diagonal(LB, 0, -2, -1)).sum(-1)
    trace_AAt = (A**2).sum((-1, -2))
    per_gp = (
        -0.5 * M * LOG_2PI
        - logdet_B
        - M * torch.log(sigma)
        - 0.5 * (M * alpha2 / sigma**2 - trace_AAt)
    )
    fit = -0.5 * (Y**2).sum(-2) / sigma[..., None] ** 2 + 0.5 * (c**2).sum(-2)
    return per_gp[..., None] + fit


def titsias_bound(y, X, Z, h: GPHyper, m: Manifold) -> torch.Tensor:
    """Lower bound on ``log p(y | X)`` using inducing points ``Z``.

    Parameters
    ----------
    y : (..., M)
    X : (..., M, c) latent locations
    Z : (..., m, c) inducing points
    """
    y, X, Z = as_tensor(y), as_tensor(X), as_tensor(Z)
    if y.shape[-1] != X.shape[-2]:
        raise ValueError(f"y has {y.shape[-1]} entries but there are {X.shape[-2]} latents")
    return titsias_bound_columns(y[..., None], X, Z, h, m)[..., 0]


def sparse_predict_columns(Y, X, Z, h: GPHyper, m: Manifold, queries):
    """Predictive mean ``(..., Q, R)`` and variance ``(..., Q)`` of the latent function."""
    L, A, LB, alpha2, sigma = _factors(X, Z, h, m)
    c = torch.linalg.solve_triangular(LB, A @ Y / sigma[..., None, None], upper=False)
    Kzq = gram(h.kernel, m, Z, queries)
    tmp1 = torch.linalg.solve_triangular(L, Kzq, upper=False)
    tmp2 = torch.linalg.solve_triangular(LB, tmp1, upper=False)
    mean = tmp2.transpose(-1, -2) @ c
    var = alpha2[..., None] + (tmp2**2).sum(-2) - (tmp1**2).sum(-2)
    return mean, torch.clamp(var, min=0.0)


def sparse_predict(y, X, Z, h: GPHyper, m: Manifold, queries) -> tuple[torch.Tensor, torch.Tensor]:
    """Sparse variational predictive mean and variance of ``f`` at ``queries``."""
    y, X, Z, queries = as_tensor(y), as_tensor(X), as_tensor(Z), as_tensor(queries)
    mean, var = sparse_predict_columns(y[..., None], X, Z, h, m, queries)
    return mean[..., 0], var


def dense_log_marginal(y, X, h: GPHyper, m: Manifold) -> torch.Tensor:
    """Exact ``log N(y; 0, K + sigma^2 I)`` by an ``O(M^3)`` Cholesky."""
    y, X = as_tensor(y), as_tensor(X)
    K = gram(h.kernel, m, X, X)
    C = K + torch.exp(2.0 * h.log_sigma)[..., None, None] * torch.eye(X.shape[-2], dtype=K.dtype)
    L = torch.linalg.cholesky(C)
    z = torch.linalg.solve_triangular(L, y[..., None], upper=False)[..., 0]
    M = X.shape[-2]
    return -0.5 * (z**2).sum(-1) - torch.log(torch.diagonal(L, 0, -2, -1)).sum(-1) - 0.5 * M * LOG_2PI
