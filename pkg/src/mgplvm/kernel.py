"""Squared-exponential-type covariance functions on manifolds.

The kernel is ``alpha^2 * exp(-sum_p d_p / (2 * l_p^2))`` where the ``d_p`` are
the pieces of the manifold's dot-product distance that share a lengthscale:
a single piece for isotropic kernels, one per torus dimension under ARD and
one per factor on product manifolds.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .manifold import Manifold, as_tensor


@dataclass
class KernelParams:
    """Log-space kernel hyperparameters.

    ``log_alpha`` has shape ``batch`` and ``log_lengthscales`` shape
    ``batch + (P,)``, so one object can hold per-neuron parameters.
    """

    log_alpha: torch.Tensor
    log_lengthscales: torch.Tensor
    ard: bool = False

    def __post_init__(self):
        self.log_alpha = as_tensor(self.log_alpha)
        self.log_lengthscales = as_tensor(self.log_lengthscales)
        if self.log_lengthscales.ndim == 0:
            self.log_lengthscales = self.log_lengthscales[None]

    @classmethod
    def create(cls, m: Manifold, alpha=1.0, lengthscale=1.0, ard=False) -> KernelParams:
        P = m.n_lengthscales(ard)
        ls = torch.as_tensor(lengthscale, dtype=torch.float64).expand(P).clone()
        return cls(torch.log(torch.as_tensor(float(alpha), dtype=torch.float64)), torch.log(ls), ard)

    @property
    def alpha(self) -> torch.Tensor:
        return torch.exp(self.log_alpha)

    @property
    def lengthscales(self) -> torch.Tensor:
        return torch.exp(self.log_lengthscales)


def _check(p: KernelParams, m: Manifold) -> None:
    P = m.n_lengthscales(p.ard)
    if p.log_lengthscales.shape[-1] != P:
        raise ValueError(
            f"{m.tag} kernel (ard={p.ard}) needs {P} lengthscales, got {p.log_lengthscales.shape[-1]}"
        )


def kernel_eval(p: KernelParams, m: Manifold, a, b) -> torch.Tensor:
    """Kernel value between (broadcast) elements ``a`` and ``b``."""
    _check(p, m)
    a, b = as_tensor(a), as_tensor(b)
    parts = m.distance_parts(a, b, p.ard)
    scaled = parts * (0.5 * torch.exp(-2.0 * p.log_lengthscales))
    return torch.exp(2.0 * p.log_alpha - scaled.sum(-1))


def gram(p: KernelParams, m: Manifold, A, B) -> torch.Tensor:
    """Gram matrix between point sets ``A (..., p, c)`` and ``B (..., q, c)``.

    Leading axes of ``A``, ``B`` and the parameter batch broadcast together.
    """
    _check(p, m)
    A, B = as_tensor(A), as_tensor(B)
    parts = m.distance_parts(A[..., :, None, :], B[..., None, :, :], p.ard)
    inv2l2 = 0.5 * torch.exp(-2.0 * p.log_lengthscales)
    scaled = (parts * inv2l2[..., None, None, :]).sum(-1)
    return torch.exp(2.0 * p.log_alpha[..., None, None] - scaled)
