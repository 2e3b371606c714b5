"""Latent manifolds: parameterizations, exponential maps, group operations,
distances, uniform priors and uniform sampling.

Elements are stored as float64 tensors whose last axis holds the coordinates:

=========== ============== ==========================================
manifold    coords         notes
=========== ============== ==========================================
``Rn``      n              plain vector
``Tn``      n              angles in ``[0, 2*pi)``
``S2``      3              unit vector (not a Lie group)
``S3``      4              unit quaternion
``SO3``     4              unit quaternion, ``q`` and ``-q`` identified
product     sum of factors factor coordinates concatenated in order
=========== ============== ==========================================

All operations broadcast over leading axes.
"""

from __future__ import annotations

import math
import re
from typing import Sequence

import numpy as np
import torch

TWO_PI = 2.0 * math.pi

# below this squared tangent norm the closed forms switch to Taylor series
_SMALL_SQ = 1e-8


class UnsupportedOperation(ValueError):
    """Raised when an operation is not defined on a manifold (e.g. group ops on S2)."""


class DomainError(ValueError):
    """Raised when a formula is evaluated at one of its poles."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class Manifold:
    """Base class. Subclasses fill in the geometry."""

    tag: str = ""
    dim: int = 0
    coord_dim: int = 0
    is_group: bool = True
    bounded: bool = True
    # maximum geodesic distance; used for default variational widths
    diameter: float = math.inf

    def __repr__(self) -> str:
        return f"<Manifold {self.tag}>"

    def __eq__(self, other) -> bool:
        return isinstance(other, Manifold) and other.tag == self.tag

    def __hash__(self) -> int:
        return hash(self.tag)

    @property
    def factors(self) -> list[Manifold]:
        return [self]

    @property
    def log_volume(self) -> float:
        raise UnsupportedOperation(f"{self.tag} has no finite volume")

    def _require_group(self, op: str) -> None:
        if not self.is_group:
            raise UnsupportedOperation(f"{op} is not defined on {self.tag} (not a Lie group)")

    def identity(self, *batch: int) -> torch.Tensor:
        raise NotImplementedError

    def exp(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def mul(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def inverse(self, a: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def log_jac_inv(self, x: torch.Tensor) -> torch.Tensor:
        """Log of the inverse Jacobian determinant of ``exp`` at ``x``."""
        self._require_group("exp_jacobian_inv")
        return torch.zeros(x.shape[:-1], dtype=x.dtype)

    def project(self, g: torch.Tensor) -> torch.Tensor:
        """Map raw coordinates back onto the manifold."""
        return g

    def kernel_distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def distance_parts(self, a: torch.Tensor, b: torch.Tensor, ard: bool = False) -> torch.Tensor:
        """Kernel distance split into the pieces that get separate lengthscales.

        Returns shape ``(..., P)``; summing the last axis gives ``kernel_distance``.
        """
        if ard:
            raise ValueError(f"ARD lengthscales are not supported on {self.tag}")
        return self.kernel_distance(a, b)[..., None]

    def n_lengthscales(self, ard: bool = False) -> int:
        if ard:
            raise ValueError(f"ARD lengthscales are not supported on {self.tag}")
        return 1

    def geodesic_distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def log_prior(self, g: torch.Tensor) -> torch.Tensor:
        """Log prior density of latents (uniform, or standard normal on R^n)."""
        return torch.full(g.shape[:-1], -self.log_volume, dtype=torch.float64)

    def sample_uniform(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        raise NotImplementedError

    def wrap_shifts(self, x: torch.Tensor, k_max: int) -> torch.Tensor:
        """All tangent preimages ``x + shift`` of ``exp(x)`` with ``|k| <= k_max``.

        Returns shape ``(..., S, dim)``.
        """
        return x[..., None, :]

    def default_k_max(self) -> int:
        return 0


class Euclidean(Manifold):
    bounded = False

    def __init__(self, n: int):
        if n < 1:
            raise ValueError(f"Euclidean dimension must be >= 1, got {n}")
        self.dim = self.coord_dim = n
        self.tag = f"R{n}"

    @property
    def log_volume(self) -> float:
        raise UnsupportedOperation("Euclidean space is unbounded; use the Gaussian prior")

    def identity(self, *batch):
        return torch.zeros(*batch, self.dim, dtype=torch.float64)

    def exp(self, x):
        return x

    def mul(self, a, b):
        return a + b

    def inverse(self, a):
        return -a

    def kernel_distance(self, a, b):
        return ((a - b) ** 2).sum(-1)

    def geodesic_distance(self, a, b):
        return torch.sqrt(self.kernel_distance(a, b))

    def log_prior(self, g):
        return -0.5 * (g**2).sum(-1) - 0.5 * self.dim * math.log(TWO_PI)

    def sample_uniform(self, n, generator=None):
        return torch.randn(n, self.dim, generator=generator, dtype=torch.float64)


class Torus(Manifold):
    def __init__(self, n: int):
        if n < 1:
            raise ValueError(f"torus dimension must be >= 1, got {n}")
        self.dim = self.coord_dim = n
        self.tag = f"T{n}"
        self.diameter = math.pi * math.sqrt(n)

    @property
    def log_volume(self):
        return self.dim * math.log(TWO_PI)

    def identity(self, *batch):
        return torch.zeros(*batch, self.dim, dtype=torch.float64)

    def exp(self, x):
        return _wrap(x)

    def mul(self, a, b):
        return _wrap(a + b)

    def inverse(self, a):
        return _wrap(-a)

    def project(self, g):
        return _wrap(g)

    def kernel_distance(self, a, b):
        return 2.0 * (1.0 - torch.cos(a - b)).sum(-1)

    def distance_parts(self, a, b, ard=False):
        if ard:
            if self.dim < 2:
                raise ValueError("ARD on a torus needs at least two dimensions")
            return 2.0 * (1.0 - torch.cos(a - b))
        return self.kernel_distance(a, b)[..., None]

    def n_lengthscales(self, ard=False):
        if ard:
            if self.dim < 2:
                raise ValueError("ARD on a torus needs at least two dimensions")
            return self.dim
        return 1

    def geodesic_distance(self, a, b):
        return torch.sqrt((wrap_angle(a - b) ** 2).sum(-1))

    def sample_uniform(self, n, generator=None):
        return TWO_PI * torch.rand(n, self.dim, generator=generator, dtype=torch.float64)

    def wrap_shifts(self, x, k_max):
        ks = torch.arange(-k_max, k_max + 1, dtype=torch.float64)
        grid = torch.cartesian_prod(*([ks] * self.dim)).reshape(-1, self.dim)
        return x[..., None, :] + TWO_PI * grid

    def default_k_max(self):
        return 3


def wrap_angle(x: torch.Tensor) -> torch.Tensor:
    """Wrap angles into ``(-pi, pi]``."""
    return math.pi - torch.remainder(math.pi - x, TWO_PI)


def _wrap(x: torch.Tensor) -> torch.Tensor:
    # remainder of a tiny negative number rounds up to exactly 2 pi
    r = torch.remainder(x, TWO_PI)
    return torch.where(r >= TWO_PI, r - TWO_PI, r)


def _tangent_norm(x: torch.Tensor):
    """Return ``(r2, r, small)`` with a gradient-safe ``r`` (set to 1 where small)."""
    r2 = (x**2).sum(-1)
    small = r2 < _SMALL_SQ
    r = torch.sqrt(torch.where(small, torch.ones_like(r2), r2))
    return r2, r, small


def quat_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product of quaternions stored as ``(w, x, y, z)``."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        -1,
    )


class _Quaternion(Manifold):
    """Shared machinery for S3 and SO(3); they differ in distances and wrapping."""

    dim = 3
    coord_dim = 4
    # spacing of tangent-space preimages along x-hat
    _period: float = math.pi

    def identity(self, *batch):
        e = torch.zeros(*batch, 4, dtype=torch.float64)
        e[..., 0] = 1.0
        return e

    def exp(self, x):
        r2, r, small = _tangent_norm(x)
        cos_r = torch.where(small, 1.0 - r2 / 2.0 + r2**2 / 24.0, torch.cos(r))
        sinc_r = torch.where(small, 1.0 - r2 / 6.0 + r2**2 / 120.0, torch.sin(r) / r)
        return torch.cat([cos_r[..., None], x * sinc_r[..., None]], -1)

    def mul(self, a, b):
        q = quat_mul(a, b)
        return q / torch.linalg.norm(q, dim=-1, keepdim=True)

    def inverse(self, a):
        return a * torch.tensor([1.0, -1.0, -1.0, -1.0], dtype=torch.float64)

    def log_jac_inv(self, x):
        # 2|x|^2 / (1 - cos 2|x|) == (|x| / sin|x|)^2
        r2, r, small = _tangent_norm(x)
        series = 2.0 * torch.log1p(r2 / 6.0 + 7.0 * r2**2 / 360.0)
        full = 2.0 * (torch.log(r) - torch.log(torch.abs(torch.sin(r))))
        return torch.where(small, series, full)

    def project(self, g):
        return g / torch.linalg.norm(g, dim=-1, keepdim=True)

    def sample_uniform(self, n, generator=None):
        g = torch.randn(n, 4, generator=generator, dtype=torch.float64)
        return self.project(g)

    def wrap_shifts(self, x, k_max):
        r2, r, small = _tangent_norm(x)
        e1 = torch.zeros_like(x)
        e1[..., 0] = 1.0
        xhat = torch.where(small[..., None], e1, x / r[..., None])
        ks = torch.arange(-k_max, k_max + 1, dtype=torch.float64)
        return x[..., None, :] + self._period * ks[:, None] * xhat[..., None, :]


class Sphere3(_Quaternion):
    tag = "S3"
    _period = TWO_PI
    diameter = math.pi

    @property
    def log_volume(self):
        return math.log(2.0 * math.pi**2)

    def kernel_distance(self, a, b):
        return 2.0 * (1.0 - (a * b).sum(-1))

    def geodesic_distance(self, a, b):
        return torch.arccos(torch.clamp((a * b).sum(-1), -1.0, 1.0))

    def default_k_max(self):
        return 3


class SO3(_Quaternion):
    tag = "SO3"
    _period = math.pi
    diameter = math.pi

    @property
    def log_volume(self):
        return math.log(math.pi**2)

    def kernel_distance(self, a, b):
        return 4.0 * (1.0 - (a * b).sum(-1) ** 2)

    def geodesic_distance(self, a, b):
        return 2.0 * torch.arccos(torch.clamp(torch.abs((a * b).sum(-1)), 0.0, 1.0))

    def default_k_max(self):
        return 5


class Sphere2(Manifold):
    tag = "S2"
    dim = 2
    coord_dim = 3
    is_group = False
    diameter = math.pi

    @property
    def log_volume(self):
        return math.log(4.0 * math.pi)

    def identity(self, *batch):
        e = torch.zeros(*batch, 3, dtype=torch.float64)
        e[..., 2] = 1.0
        return e

    def exp(self, x):
        self._require_group("exp_map")

    def mul(self, a, b):
        self._require_group("group_mul")

    def inverse(self, a):
        self._require_group("inverse")

    def project(self, g):
        return g / torch.linalg.norm(g, dim=-1, keepdim=True)

    def kernel_distance(self, a, b):
        return 2.0 * (1.0 - (a * b).sum(-1))

    def geodesic_distance(self, a, b):
        return torch.arccos(torch.clamp((a * b).sum(-1), -1.0, 1.0))

    def sample_uniform(self, n, generator=None):
        return self.project(torch.randn(n, 3, generator=generator, dtype=torch.float64))


class Product(Manifold):
    """Direct product of Lie groups; coordinates are concatenated in order."""

    def __init__(self, factors: Sequence[Manifold]):
        factors = list(factors)
        if len(factors) < 2:
            raise ValueError("a product manifold needs at least two factors")
        for f in factors:
            if isinstance(f, Product):
                raise ValueError("product factors must not themselves be products")
            if not f.is_group:
                raise ValueError(f"product factors must be Lie groups, got {f.tag}")
        self._factors = factors
        self.tag = "x".join(f.tag for f in factors)
        self.dim = sum(f.dim for f in factors)
        self.coord_dim = sum(f.coord_dim for f in factors)
        self.bounded = all(f.bounded for f in factors)
        self.diameter = math.sqrt(sum(f.diameter**2 for f in factors))
        self.coord_slices: list[slice] = []
        self.tangent_slices: list[slice] = []
        c = t = 0
        for f in factors:
            self.coord_slices.append(slice(c, c + f.coord_dim))
            self.tangent_slices.append(slice(t, t + f.dim))
            c += f.coord_dim
            t += f.dim

    @property
    def factors(self):
        return list(self._factors)

    def _split(self, g, tangent=False):
        slices = self.tangent_slices if tangent else self.coord_slices
        return [g[..., s] for s in slices]

    @property
    def log_volume(self):
        return sum(f.log_volume for f in self._factors)

    def identity(self, *batch):
        return torch.cat([f.identity(*batch) for f in self._factors], -1)

    def exp(self, x):
        return torch.cat([f.exp(xf) for f, xf in zip(self._factors, self._split(x, True))], -1)

    def mul(self, a, b):
        return torch.cat(
            [f.mul(af, bf) for f, af, bf in zip(self._factors, self._split(a), self._split(b))], -1
        )

    def inverse(self, a):
        return torch.cat([f.inverse(af) for f, af in zip(self._factors, self._split(a))], -1)

    def log_jac_inv(self, x):
        return sum(f.log_jac_inv(xf) for f, xf in zip(self._factors, self._split(x, True)))

    def project(self, g):
        return torch.cat([f.project(gf) for f, gf in zip(self._factors, self._split(g))], -1)

    def kernel_distance(self, a, b):
        return self.distance_parts(a, b).sum(-1)

    def distance_parts(self, a, b, ard=False):
        # one lengthscale per factor regardless of the flag
        return torch.stack(
            [f.kernel_distance(af, bf) for f, af, bf in zip(self._factors, self._split(a), self._split(b))],
            -1,
        )

    def n_lengthscales(self, ard=False):
        return len(self._factors)

    def geodesic_distance(self, a, b):
        sq = sum(
            f.geodesic_distance(af, bf) ** 2
            for f, af, bf in zip(self._factors, self._split(a), self._split(b))
        )
        return torch.sqrt(sq)

    def log_prior(self, g):
        return sum(f.log_prior(gf) for f, gf in zip(self._factors, self._split(g)))

    def sample_uniform(self, n, generator=None):
        return torch.cat([f.sample_uniform(n, generator) for f in self._factors], -1)


_TAG_RE = re.compile(r"^(R|T)([1-9][0-9]*)$")


def parse_manifold(tag: str) -> Manifold:
    """Parse a descriptor such as ``"T2"``, ``"SO3"`` or ``"T1xR1"``."""
    if not isinstance(tag, str) or not tag:
        raise ValueError(f"invalid manifold tag {tag!r}")
    parts = tag.split("x")
    if len(parts) > 1:
        return Product([_parse_single(p, tag) for p in parts])
    return _parse_single(tag, tag)


def _parse_single(s: str, full: str) -> Manifold:
    if s == "S2":
        return Sphere2()
    if s == "S3":
        return Sphere3()
    if s == "SO3":
        return SO3()
    m = _TAG_RE.match(s)
    if m is None:
        raise ValueError(f"invalid manifold tag {full!r}: cannot parse {s!r}")
    kind, n = m.group(1), int(m.group(2))
    return Euclidean(n) if kind == "R" else Torus(n)


# -- functional API ---------------------------------------------------------


def _check_tangent(m: Manifold, x: torch.Tensor) -> None:
    if x.shape[-1] != m.dim:
        raise ValueError(f"tangent vector has length {x.shape[-1]}, expected {m.dim} for {m.tag}")


def _check_element(m: Manifold, g: torch.Tensor) -> None:
    if g.shape[-1] != m.coord_dim:
        raise ValueError(f"element has {g.shape[-1]} coordinates, expected {m.coord_dim} for {m.tag}")


def exp_map(m: Manifold, x) -> torch.Tensor:
    m._require_group("exp_map")
    x = as_tensor(x)
    _check_tangent(m, x)
    return m.exp(x)


def group_mul(m: Manifold, a, b) -> torch.Tensor:
    m._require_group("group_mul")
    a, b = as_tensor(a), as_tensor(b)
    _check_element(m, a)
    _check_element(m, b)
    return m.mul(a, b)


def exp_jacobian_inv(m: Manifold, x) -> torch.Tensor:
    m._require_group("exp_jacobian_inv")
    x = as_tensor(x)
    _check_tangent(m, x)
    for f, xf in zip(m.factors, m._split(x, True) if isinstance(m, Product) else [x]):
        if isinstance(f, _Quaternion):
            r = torch.linalg.norm(xf, dim=-1)
            if bool(((r >= 1e-4) & (torch.abs(torch.sin(r)) < 1e-12)).any()):
                raise DomainError("inverse Jacobian is singular at |x| = k*pi, k >= 1")
    return torch.exp(m.log_jac_inv(x))


def kernel_distance(m: Manifold, a, b) -> torch.Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_element(m, a)
    _check_element(m, b)
    return m.kernel_distance(a, b)


def geodesic_distance(m: Manifold, a, b) -> torch.Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_element(m, a)
    _check_element(m, b)
    return m.geodesic_distance(a, b)


def uniform_log_prior(m: Manifold) -> float:
    return -m.log_volume


def sample_uniform(m: Manifold, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    return m.sample_uniform(n, generator)
