"""The manifold GPLVM: objective, tuning-curve posterior and importance-weighted evidence."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import vardist
from .kernel import KernelParams
from .manifold import Manifold, Sphere2, parse_manifold
from .sparsegp import GPHyper, sparse_predict_columns, titsias_bound_columns


@dataclass
class Dataset:
    """Activity matrix ``Y`` of shape (neurons, conditions)."""

    Y: np.ndarray
    labels: Sequence[str] | None = None
    allow_nan: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Y.ndim != 2:
            raise ValueError(f"Y must be 2-d (neurons x conditions), got shape {self.Y.shape}")
        N, M = self.Y.shape
        if N < 1 or M < 2:
            raise ValueError(f"need at least 1 neuron and 2 conditions, got {N}x{M}")
        bad = ~np.isfinite(self.Y)
        if self.allow_nan:
            bad &= ~np.isnan(self.Y)
        if bad.any():
            raise ValueError("Y contains non-finite entries")
        if self.labels is not None and len(self.labels) != M:
            raise ValueError("need one label per condition")

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def M(self) -> int:
        return self.Y.shape[1]

    def tensor(self) -> torch.Tensor:
        Y = torch.as_tensor(self.Y)
        if torch.isnan(Y).any():
            raise ValueError("Y contains missing entries; slice them out first")
        return Y

    def subset(self, neurons=None, conditions=None) -> Dataset:
        Y = self.Y
        if neurons is not None:
            Y = Y[np.asarray(neurons)]
        if conditions is not None:
            Y = Y[:, np.asarray(conditions)]
        labels = None
        if self.labels is not None:
            labels = list(self.labels) if conditions is None else [self.labels[j] for j in conditions]
        return Dataset(Y, labels, self.allow_nan)


@dataclass
class LossTerms:
    entropy: torch.Tensor
    prior: torch.Tensor
    lik: torch.Tensor

    @property
    def loss(self) -> torch.Tensor:
        return -(self.entropy + self.prior + self.lik)


@dataclass
class TuningPosterior:
    queries: torch.Tensor
    mean: np.ndarray
    std: np.ndarray
    samples: np.ndarray | None = None


class MGplvmModel:
    """Manifold GPLVM with a collapsed sparse GP per neuron.

    With ``tie_params`` a single set of kernel hyperparameters, noise level
    and inducing points is shared by all neurons; otherwise each neuron owns
    its own. Variational means start at the identity (``init="identity"``)
    or at independent draws from the prior (``init="prior"``).
    """

    def __init__(
        self,
        manifold: Manifold | str,
        n_neurons: int,
        n_conditions: int,
        *,
        m_inducing: int | None = None,
        tie_params: bool = True,
        ard: bool = False,
        diagonal: bool = True,
        k_max: int | None = None,
        alpha: float = 1.0,
        lengthscale: float = 1.0,
        sigma: float = 1.0,
        init: str = "identity",
        generator: torch.Generator | None = None,
    ):
        if init not in ("identity", "prior"):
            raise ValueError(f"init must be 'identity' or 'prior', got {init!r}")
        if isinstance(manifold, str):
            manifold = parse_manifold(manifold)
        self.manifold = manifold
        self.n_neurons = n_neurons
        self.tie_params = tie_params
        self.k_max = k_max
        m = manifold
        if m_inducing is None:
            m_inducing = min(n_conditions, 20)
        H = 1 if tie_params else n_neurons
        kp = KernelParams.create(m, alpha, lengthscale, ard)
        self.hyper = GPHyper(
            KernelParams(
                kp.log_alpha.expand(H).clone(),
                kp.log_lengthscales.expand(H, -1).clone(),
                ard,
            ),
            torch.full((H,), math.log(sigma), dtype=torch.float64),
        )
        self.Z = m.sample_uniform(H * m_inducing, generator).reshape(H, m_inducing, m.coord_dim)
        means = m.sample_uniform(n_conditions, generator) if init == "prior" else None
        self.state = vardist.init_state(m, n_conditions, diagonal=diagonal, means=means)

    # -- parameters ---------------------------------------------------------

    @property
    def n_conditions(self) -> int:
        return self.state.n_conditions

    @property
    def n_hyper(self) -> int:
        return self.hyper.log_sigma.shape[0]

    def tensors(self) -> dict[str, torch.Tensor]:
        """Named free parameters (views, not copies)."""
        out = {"means": self.state.means}
        if isinstance(self.manifold, Sphere2):
            out["log_kappa"] = self.state.log_kappa
        else:
            out["scale"] = self.state.base.raw
        out["Z"] = self.Z
        out["log_alpha"] = self.hyper.kernel.log_alpha
        out["log_lengthscales"] = self.hyper.kernel.log_lengthscales
        out["log_sigma"] = self.hyper.log_sigma
        return out

    def set_tensors(self, values: dict[str, torch.Tensor]) -> None:
        for name, v in values.items():
            if name == "means":
                self.state.means = v
            elif name == "log_kappa":
                self.state.log_kappa = v
            elif name == "scale":
                self.state.base.raw = v
            elif name == "Z":
                self.Z = v
            elif name == "log_alpha":
                self.hyper.kernel.log_alpha = v
            elif name == "log_lengthscales":
                self.hyper.kernel.log_lengthscales = v
            elif name == "log_sigma":
                self.hyper.log_sigma = v
            else:
                raise KeyError(name)

    def copy(self) -> MGplvmModel:
        return MGplvmModel.from_dict(self.to_dict())

    # -- objective ----------------------------------------------------------

    def draw_noise(self, K: int, generator: torch.Generator | None = None) -> torch.Tensor:
        return vardist.draw_noise(self.state, self.manifold, K, generator)

    def sample_latents(self, noise: torch.Tensor, mean_shift=None) -> vardist.SampleBatch:
        return vardist.sample_from_noise(self.state, self.manifold, noise, self.k_max, mean_shift)

    def log_lik(self, Y: torch.Tensor, latents: torch.Tensor) -> torch.Tensor:
        """Sparse bound per (sample, neuron) for latents ``(K, M, c)``; returns ``(K, N)``."""
        X = latents[:, None]  # (K, 1, M, c)
        if self.tie_params:
            out = titsias_bound_columns(Y.T, X, self.Z, self.hyper, self.manifold)  # (K, 1, N)
            return out[:, 0]
        out = titsias_bound_columns(Y[:, :, None], X, self.Z, self.hyper, self.manifold)  # (K, N, 1)
        return out[..., 0]

    def loss_terms(
        self,
        Y: torch.Tensor,
        noise: torch.Tensor,
        mean_shift: torch.Tensor | None = None,
        entropy: bool = True,
    ) -> LossTerms:
        batch = self.sample_latents(noise, mean_shift)
        if entropy:
            H = vardist.entropy_mc(self.state, self.manifold, batch)
        else:
            H = torch.zeros((), dtype=torch.float64)
        prior = self.manifold.log_prior(batch.elements).sum(-1).mean()
        lik = self.log_lik(Y, batch.elements).sum(-1).mean()
        return LossTerms(H, prior, lik)

    # -- checkpointing --------------------------------------------------------

    def to_dict(self) -> dict:
        def arr(t):
            return t.detach().tolist()

        st = self.state
        d = {
            "manifold": self.manifold.tag,
            "n_neurons": self.n_neurons,
            "tie_params": self.tie_params,
            "ard": self.hyper.kernel.ard,
            "k_max": self.k_max,
            "means": arr(st.means),
            "Z": arr(self.Z),
            "log_alpha": arr(self.hyper.kernel.log_alpha),
            "log_lengthscales": arr(self.hyper.kernel.log_lengthscales),
            "log_sigma": arr(self.hyper.log_sigma),
        }
        if st.log_kappa is not None:
            d["log_kappa"] = arr(st.log_kappa)
        else:
            d["scale"] = arr(st.base.raw)
            d["diagonal"] = st.base.diagonal
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MGplvmModel:
        def t(x):
            return torch.tensor(x, dtype=torch.float64)

        m = parse_manifold(d["manifold"])
        means = t(d["means"])
        Z = t(d["Z"])
        model = cls.__new__(cls)
        model.manifold = m
        model.n_neurons = int(d["n_neurons"])
        model.tie_params = bool(d["tie_params"])
        model.k_max = d.get("k_max")
        model.Z = Z
        model.hyper = GPHyper(
            KernelParams(t(d["log_alpha"]), t(d["log_lengthscales"]), bool(d["ard"])),
            t(d["log_sigma"]),
        )
        if "log_kappa" in d:
            model.state = vardist.VariationalState(means, log_kappa=t(d["log_kappa"]))
        else:
            base = vardist.GaussianBase(t(d["scale"]), bool(d.get("diagonal", True)))
            model.state = vardist.VariationalState(means, base)
        return model


def _Y(data) -> torch.Tensor:
    return data.tensor() if isinstance(data, Dataset) else torch.as_tensor(np.asarray(data, dtype=np.float64))


def loss(model: MGplvmModel, data, K: int = 20, generator: torch.Generator | None = None) -> torch.Tensor:
    """Monte Carlo negative ELBO with ``K`` samples."""
    Y = _Y(data)
    return model.loss_terms(Y, model.draw_noise(K, generator)).loss


def posterior_tuning(
    model: MGplvmModel,
    data,
    neuron: int,
    queries,
    K: int = 1000,
    generator: torch.Generator | None = None,
    keep_samples: bool = False,
) -> TuningPosterior:
    """Posterior over one neuron's tuning curve at ``queries``.

    Each of the ``K`` draws samples a full set of latents from the
    variational posterior and then a function value from the sparse GP
    predictive conditioned on those latents.
    """
    Y = _Y(data)
    if not 0 <= neuron < Y.shape[0]:
        raise IndexError(f"neuron {neuron} out of range for {Y.shape[0]} neurons")
    queries = torch.as_tensor(np.asarray(queries, dtype=np.float64))
    h = 0 if model.tie_params else neuron
    hyper = GPHyper(
        KernelParams(
            model.hyper.kernel.log_alpha[h], model.hyper.kernel.log_lengthscales[h], model.hyper.kernel.ard
        ),
        model.hyper.log_sigma[h],
    )
    with torch.no_grad():
        batch = model.sample_latents(model.draw_noise(K, generator))
        mean, var = sparse_predict_columns(
            Y[neuron][:, None], batch.elements, model.Z[h], hyper, model.manifold, queries
        )
        mean = mean[..., 0]  # (K, Q)
        eps = torch.randn(mean.shape, generator=generator, dtype=torch.float64)
        draws = mean + torch.sqrt(var) * eps
    draws_np = draws.numpy()
    return TuningPosterior(
        queries,
        draws_np.mean(0),
        draws_np.std(0),
        draws_np if keep_samples else None,
    )


def iw_log_likelihood(
    model: MGplvmModel, data, K: int = 64, generator: torch.Generator | None = None
) -> float:
    """Importance-weighted estimate of ``log p(Y)`` using the variational posterior as proposal."""
    Y = _Y(data)
    with torch.no_grad():
        batch = model.sample_latents(model.draw_noise(K, generator))
        lik = model.log_lik(Y, batch.elements).sum(-1)
        prior = model.manifold.log_prior(batch.elements).sum(-1)
        w = lik + prior - batch.log_q.sum(-1)
        return float(torch.logsumexp(w, 0) - math.log(K))
