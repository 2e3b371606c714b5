"""Reparameterized variational distributions over the latents of each condition.

On Lie groups a condition's distribution is the push-forward of a zero-mean
Gaussian in the tangent space through the exponential map, left-multiplied by
a mean element. Its density is a Jacobian-weighted sum over all tangent
preimages, truncated at ``|k| <= k_max``. On S2 a von Mises-Fisher
distribution is used instead, with inverse-transform sampling and a
closed-form entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .manifold import Euclidean, Manifold, Product, Sphere2, as_tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianBase:
    """Tangent-space Gaussian ``N(0, L L^T)``, batched over conditions.

    ``raw`` holds log standard deviations ``(..., d)`` when ``diagonal`` is
    set, otherwise a ``(..., d, d)`` matrix whose strict lower triangle is
    used as-is and whose diagonal is log-parameterized.
    """

    raw: torch.Tensor
    diagonal: bool = True

    def tril(self) -> torch.Tensor:
        if self.diagonal:
            return torch.diag_embed(torch.exp(self.raw))
        return torch.tril(self.raw, -1) + torch.diag_embed(torch.exp(torch.diagonal(self.raw, 0, -2, -1)))

    def log_diag(self) -> torch.Tensor:
        return self.raw if self.diagonal else torch.diagonal(self.raw, 0, -2, -1)

    @property
    def dim(self) -> int:
        return self.raw.shape[-1]


@dataclass
class VariationalState:
    """Per-condition variational parameters.

    Lie groups use ``means`` with a ``base``; S2 uses ``means`` as mean
    directions together with ``log_kappa``.
    """

    means: torch.Tensor
    base: GaussianBase | None = None
    log_kappa: torch.Tensor | None = None

    @property
    def n_conditions(self) -> int:
        return self.means.shape[0]

    def subset(self, idx) -> VariationalState:
        idx = torch.as_tensor(idx, dtype=torch.long)
        base = None if self.base is None else GaussianBase(self.base.raw[idx], self.base.diagonal)
        lk = None if self.log_kappa is None else self.log_kappa[idx]
        return VariationalState(self.means[idx], base, lk)


@dataclass
class SampleBatch:
    base_draws: torch.Tensor  # (K, M, d); S2: (K, M, 4) uniform + Gaussian noise
    elements: torch.Tensor  # (K, M, coord_dim)
    log_q: torch.Tensor  # (K, M)
    log_q_parts: torch.Tensor = field(repr=False, default=None)  # (K, M, n_factors)

    @property
    def K(self) -> int:
        return self.elements.shape[0]


def default_scale(m: Manifold) -> float:
    """Initial per-dimension tangent standard deviation: half the diameter over the dimension.

    Wider starts drift to the uniform distribution on 2-d and 3-d groups
    before the means have separated.
    """
    if not m.bounded:
        return 1.0
    # SO(3) tangent norms are half the rotation angle
    half = m.diameter / (4.0 if m.tag == "SO3" else 2.0)
    return half / m.dim


def init_state(
    m: Manifold,
    M: int,
    scale: float | torch.Tensor | None = None,
    diagonal: bool = True,
    kappa: float = 1.0,
    means: torch.Tensor | None = None,
) -> VariationalState:
    """Wide base distributions around ``means`` (default: the identity)."""
    if means is None:
        means = m.identity(M)
    elif means.shape != (M, m.coord_dim):
        raise ValueError(f"means must have shape {(M, m.coord_dim)}, got {tuple(means.shape)}")
    if isinstance(m, Sphere2):
        return VariationalState(means, log_kappa=torch.full((M,), math.log(kappa), dtype=torch.float64))
    if isinstance(m, Product) and not diagonal:
        raise ValueError("product manifolds require a diagonal (factorized) base covariance")
    if scale is None:
        if isinstance(m, Product):
            scale = torch.cat([torch.full((f.dim,), default_scale(f)) for f in m.factors])
        else:
            scale = default_scale(m)
    log_s = torch.log(torch.as_tensor(scale, dtype=torch.float64)).expand(M, m.dim).clone()
    raw = log_s if diagonal else torch.diag_embed(log_s)
    return VariationalState(means, GaussianBase(raw, diagonal))


def _k_max_for(f: Manifold, k_max: int | None) -> int:
    return f.default_k_max() if k_max is None else k_max


def _gaussian_log_density(L: torch.Tensor, y: torch.Tensor, diagonal: bool = False) -> torch.Tensor:
    """``log N(y; 0, L L^T)`` for ``y (..., S, d)`` and ``L (..., d, d)``.

    With ``diagonal`` set, ``L`` is given by its diagonal ``(..., d)``.
    """
    d = y.shape[-1]
    if diagonal:
        z = y / L[..., None, :]
        logdet = torch.log(L).sum(-1)
    else:
        z = torch.linalg.solve_triangular(L[..., None, :, :], y[..., None], upper=False)[..., 0]
        logdet = torch.log(torch.diagonal(L, 0, -2, -1)).sum(-1)
    return -0.5 * (z**2).sum(-1) - logdet[..., None] - 0.5 * d * LOG_2PI


def _single_log_density(f: Manifold, L: torch.Tensor, x: torch.Tensor, k_max: int | None, diagonal: bool):
    if isinstance(f, Euclidean):
        return _gaussian_log_density(L, x[..., None, :], diagonal)[..., 0]
    k = _k_max_for(f, k_max)
    if k < 1:
        raise ValueError(f"k_max must be >= 1, got {k}")
    ys = f.wrap_shifts(x, k)
    terms = _gaussian_log_density(L, ys, diagonal) + f.log_jac_inv(ys)
    return torch.logsumexp(terms, -1)


def wrapped_log_density_parts(
    m: Manifold, base: GaussianBase, x: torch.Tensor, k_max: int | None = None
) -> torch.Tensor:
    """Per-factor log densities ``(..., F)`` of ``exp(x)`` under the push-forward of ``base``."""
    m._require_group("wrapped_log_density")
    x = as_tensor(x)
    diag = base.diagonal
    L = torch.exp(base.raw) if diag else base.tril()
    if not isinstance(m, Product):
        return _single_log_density(m, L, x, k_max, diag)[..., None]
    if not diag:
        raise ValueError("product manifolds require a diagonal base covariance")
    out = [_single_log_density(f, L[..., s], x[..., s], k_max, True) for f, s in zip(m.factors, m.tangent_slices)]
    return torch.stack(out, -1)


def wrapped_log_density(m: Manifold, base: GaussianBase, x, k_max: int | None = None) -> torch.Tensor:
    """Log density on the group of ``exp(x)`` for ``x`` drawn from ``base``."""
    return wrapped_log_density_parts(m, base, x, k_max).sum(-1)


# -- von Mises-Fisher on S2 ---------------------------------------------------


def _log_2sinh_over(kappa: torch.Tensor) -> torch.Tensor:
    """``log(exp(kappa) - exp(-kappa))`` without overflow."""
    return kappa + torch.log(-torch.expm1(-2.0 * kappa))


def vmf_log_density(mean, kappa, g) -> torch.Tensor:
    mean, kappa, g = as_tensor(mean), as_tensor(kappa), as_tensor(g)
    dot = (mean * g).sum(-1)
    tiny = kappa < 1e-12
    k = torch.where(tiny, torch.ones_like(kappa), kappa)
    val = torch.log(k) - math.log(2.0 * math.pi) - _log_2sinh_over(k) + k * dot
    return torch.where(tiny, torch.full_like(val, -math.log(4.0 * math.pi)), val)


def vmf_entropy(kappa) -> torch.Tensor:
    kappa = as_tensor(kappa)
    small = kappa < 1e-4
    k = torch.where(small, torch.ones_like(kappa), kappa)
    # H = log 4pi + log(sinh k / k) - k coth k + 1
    log_sinh_over_k = _log_2sinh_over(k) - math.log(2.0) - torch.log(k)
    full = math.log(4.0 * math.pi) + log_sinh_over_k - k / torch.tanh(k) + 1.0
    k2 = kappa**2
    series = math.log(4.0 * math.pi) + k2 / 6.0 - k2**2 / 180.0 - (k2 / 3.0 - k2**2 / 45.0)
    return torch.where(small, series, full)


def vmf_sample_from_noise(mean: torch.Tensor, kappa: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Inverse-transform VMF sample on S2.

    ``noise[..., 0]`` is uniform on (0, 1) and ``noise[..., 1:]`` standard
    normal; the result is differentiable in ``mean`` and ``kappa``.
    """
    mu = mean / torch.linalg.norm(mean, dim=-1, keepdim=True)
    u = noise[..., 0]
    w = 1.0 + torch.log1p((1.0 - u) * torch.expm1(-2.0 * kappa)) / kappa
    w = torch.clamp(w, -1.0, 1.0)
    z = noise[..., 1:]
    v = z - (z * mu).sum(-1, keepdim=True) * mu
    v = v / torch.linalg.norm(v, dim=-1, keepdim=True)
    return w[..., None] * mu + torch.sqrt(torch.clamp(1.0 - w**2, min=0.0))[..., None] * v


# -- sampling and entropy -------------------------------------------------------


def draw_noise(state: VariationalState, m: Manifold, K: int, generator: torch.Generator | None = None):
    """Standardized base draws; the sample is a deterministic function of these."""
    if K < 1:
        raise ValueError("K must be >= 1")
    M = state.n_conditions
    if isinstance(m, Sphere2):
        u = torch.rand(K, M, 1, generator=generator, dtype=torch.float64)
        u = torch.clamp(u, 1e-300, 1.0)
        z = torch.randn(K, M, 3, generator=generator, dtype=torch.float64)
        return torch.cat([u, z], -1)
    return torch.randn(K, M, m.dim, generator=generator, dtype=torch.float64)


def effective_means(state: VariationalState, m: Manifold, mean_shift: torch.Tensor | None = None):
    if mean_shift is None:
        return state.means
    return m.mul(state.means, m.exp(mean_shift))


def sample_from_noise(
    state: VariationalState,
    m: Manifold,
    noise: torch.Tensor,
    k_max: int | None = None,
    mean_shift: torch.Tensor | None = None,
) -> SampleBatch:
    """Push fixed standardized noise through the reparameterization.

    ``mean_shift`` is an optional tangent increment composed onto the means
    (``mean * Exp(shift)``), used to differentiate with respect to the means.
    """
    if isinstance(m, Sphere2):
        kappa = torch.exp(state.log_kappa)
        mu = state.means
        if mean_shift is not None:
            mu = mu + mean_shift
        g = vmf_sample_from_noise(mu, kappa, noise)
        mu_n = mu / torch.linalg.norm(mu, dim=-1, keepdim=True)
        log_q = vmf_log_density(mu_n, kappa, g)
        return SampleBatch(noise, g, log_q, log_q[..., None])
    if state.base.diagonal:
        x = torch.exp(state.base.raw) * noise
    else:
        x = (state.base.tril() @ noise[..., None])[..., 0]
    means = effective_means(state, m, mean_shift)
    g = m.mul(means, m.exp(x))
    parts = wrapped_log_density_parts(m, state.base, x, k_max)
    return SampleBatch(x, g, parts.sum(-1), parts)


def sample(
    state: VariationalState,
    m: Manifold,
    K: int,
    generator: torch.Generator | None = None,
    k_max: int | None = None,
) -> SampleBatch:
    return sample_from_noise(state, m, draw_noise(state, m, K, generator), k_max)


def entropy_mc(state: VariationalState, m: Manifold, batch: SampleBatch) -> torch.Tensor:
    """Entropy of the variational distribution, summed over conditions.

    Bounded factors use the Monte Carlo estimate capped at the log volume of
    the factor (per condition); Euclidean factors and S2 are analytic.
    """
    if isinstance(m, Sphere2):
        return vmf_entropy(torch.exp(state.log_kappa)).sum()
    factors = m.factors
    log_diag = state.base.log_diag()
    slices = m.tangent_slices if isinstance(m, Product) else [slice(0, m.dim)]
    total = 0.0
    for i, (f, s) in enumerate(zip(factors, slices)):
        if isinstance(f, Euclidean):
            d = f.dim
            h = 0.5 * d * (1.0 + LOG_2PI) + log_diag[:, s].sum(-1)
        else:
            h = -batch.log_q_parts[..., i].mean(0)
            h = torch.clamp(h, max=f.log_volume)
        total = total + h.sum()
    return total
