"""Synthetic datasets with known latents and bump-shaped tuning curves."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .manifold import Euclidean, Manifold, Product, Sphere2, parse_manifold
from .model import Dataset


@dataclass
class SynthSpec:
    """Generation settings.

    Widths ``b`` are given for a manifold of diameter pi and rescaled by
    ``diameter / pi``. ``tuning="bump_gain"`` on a product with Euclidean
    factors multiplies the bump over the bounded factors by
    ``exp(gain_scale * x)`` where ``x`` sums the Euclidean coordinates.
    """

    manifold: str = "T1"
    N: int = 100
    M: int = 100
    latent_mode: str = "random_walk"
    walk_step: float = 0.2
    amplitude_range: tuple[float, float] = (0.5, 1.5)
    width_range: tuple[float, float] = (math.pi / 8, math.pi / 2)
    offset_range: tuple[float, float] = (0.0, 0.2)
    noise_range: tuple[float, float] = (0.1, 0.3)
    tuning: str = "bump"
    gain_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        parse_manifold(self.manifold)
        if self.N < 1 or self.M < 2:
            raise ValueError("need N >= 1 and M >= 2")
        if self.latent_mode not in ("random_walk", "uniform"):
            raise ValueError(f"latent_mode must be 'random_walk' or 'uniform', got {self.latent_mode!r}")
        if self.latent_mode == "random_walk" and not self.walk_step > 0:
            raise ValueError("walk_step must be positive for random walks")
        for name in ("amplitude_range", "width_range", "offset_range", "noise_range"):
            lo, hi = getattr(self, name)
            setattr(self, name, (float(lo), float(hi)))
            if lo > hi or lo < 0 or (name in ("amplitude_range", "width_range") and lo <= 0):
                raise ValueError(f"{name} must be an ordered pair of positive numbers, got {(lo, hi)}")
        if self.tuning not in ("bump", "bump_gain"):
            raise ValueError(f"tuning must be 'bump' or 'bump_gain', got {self.tuning!r}")

    @property
    def mfd(self) -> Manifold:
        return parse_manifold(self.manifold)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthDataset:
    data: Dataset
    true_latents: np.ndarray  # (M, coord_dim)
    true_params: dict = field(default_factory=dict)  # a, b, c, sigma, pref

    def truth_json(self, spec: SynthSpec) -> dict:
        return {
            "manifold": spec.manifold,
            "latents": self.true_latents.tolist(),
            **{k: np.asarray(v).tolist() for k, v in self.true_params.items()},
        }


def gen_latents(spec: SynthSpec, generator: torch.Generator | None = None) -> np.ndarray:
    m = spec.mfd
    gen = generator if generator is not None else torch.Generator().manual_seed(spec.seed)
    if spec.latent_mode == "uniform":
        return m.sample_uniform(spec.M, gen).numpy()
    g = m.sample_uniform(1, gen)[0]
    if isinstance(m, Euclidean) or (isinstance(m, Product) and not m.bounded):
        # start Euclidean coordinates at the origin rather than a prior draw
        g = _zero_euclidean(m, g)
    out = [g]
    steps = spec.walk_step * torch.randn(spec.M - 1, m.dim, generator=gen, dtype=torch.float64)
    for xi in steps:
        if isinstance(m, Sphere2):
            # step in the tangent plane, then back onto the sphere
            v = _tangent_basis(g) @ xi
            g = m.project(g + v)
        else:
            g = m.mul(g, m.exp(xi))
        out.append(g)
    return torch.stack(out).numpy()


def _zero_euclidean(m: Manifold, g: torch.Tensor) -> torch.Tensor:
    if isinstance(m, Euclidean):
        return torch.zeros_like(g)
    g = g.clone()
    for f, s in zip(m.factors, m.coord_slices):
        if isinstance(f, Euclidean):
            g[s] = 0.0
    return g


def _tangent_basis(g: torch.Tensor) -> torch.Tensor:
    """3x2 orthonormal basis of the tangent plane of S2 at ``g``."""
    a = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    if abs(float(g[0])) > 0.9:
        a = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    u = a - (a @ g) * g
    u = u / torch.linalg.norm(u)
    w = torch.linalg.cross(g, u)
    return torch.stack([u, w], -1)


def bump_tuning(m: Manifold, g, pref, a, b, c):
    """Gaussian bump in geodesic distance: ``a^2 exp(-d^2 / (2 b^2)) + c``."""
    g = torch.as_tensor(np.asarray(g, dtype=np.float64))
    pref = torch.as_tensor(np.asarray(pref, dtype=np.float64))
    d = m.geodesic_distance(g, pref)
    return a**2 * torch.exp(-(d**2) / (2 * b**2)) + c


def _bounded_part(m: Product):
    bounded = [(f, s) for f, s in zip(m.factors, m.coord_slices) if not isinstance(f, Euclidean)]
    euclid = [s for f, s in zip(m.factors, m.coord_slices) if isinstance(f, Euclidean)]
    return bounded, euclid


def tuning_matrix(spec: SynthSpec, latents: np.ndarray, params: dict) -> np.ndarray:
    """Noiseless responses ``(N, M)``."""
    m = spec.mfd
    G = torch.as_tensor(latents)
    pref = torch.as_tensor(params["pref"])
    a = torch.as_tensor(params["a"])[:, None]
    b = torch.as_tensor(params["b"])[:, None]
    c = torch.as_tensor(params["c"])[:, None]
    if spec.tuning == "bump_gain":
        if not isinstance(m, Product):
            raise ValueError("bump_gain tuning needs a product manifold")
        bounded, euclid = _bounded_part(m)
        if not bounded or not euclid:
            raise ValueError("bump_gain tuning needs both bounded and Euclidean factors")
        d2 = sum(f.geodesic_distance(G[None, :, s], pref[:, None, s]) ** 2 for f, s in bounded)
        x = sum(G[:, s].sum(-1) for s in euclid)
        F = a**2 * torch.exp(-d2 / (2 * b**2)) * torch.exp(spec.gain_scale * x)[None, :] + c
    else:
        d = m.geodesic_distance(G[None, :, :], pref[:, None, :])
        F = a**2 * torch.exp(-(d**2) / (2 * b**2)) + c
    return F.numpy()


def gen_dataset(spec: SynthSpec) -> SynthDataset:
    m = spec.mfd
    gen = torch.Generator().manual_seed(spec.seed)
    latents = gen_latents(spec, gen)
    rng = np.random.default_rng(spec.seed)
    N = spec.N
    width_scale = m.diameter / math.pi if math.isfinite(m.diameter) else 1.0
    if isinstance(m, Product) and spec.tuning == "bump_gain":
        bounded, _ = _bounded_part(m)
        width_scale = math.sqrt(sum(f.diameter**2 for f, _ in bounded)) / math.pi
    params = {
        "a": rng.uniform(*spec.amplitude_range, size=N),
        "b": rng.uniform(*spec.width_range, size=N) * width_scale,
        "c": rng.uniform(*spec.offset_range, size=N),
        "sigma": rng.uniform(*spec.noise_range, size=N),
        "pref": m.sample_uniform(N, gen).numpy(),
    }
    F = tuning_matrix(spec, latents, params)
    Y = F + params["sigma"][:, None] * rng.standard_normal(F.shape)
    return SynthDataset(Dataset(Y), latents, params)
