"""Gradients, Adam with manifold retractions, and the fit loop."""

from __future__ import annotations

import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from .manifold import Manifold, Sphere2
from .model import Dataset, MGplvmModel
from .sparsegp import NumericalError

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


class TrainingError(RuntimeError):
    """Non-finite loss or gradient. ``checkpoint`` holds the last good parameters."""

    def __init__(self, msg: str, checkpoint: dict | None = None, dump: dict | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.dump = dump


@dataclass
class FitConfig:
    """Optimizer and model settings.

    With ``restarts > 1``, that many independently initialized models are
    trained for ``restart_iters`` iterations each (default ``iters // 4``)
    and only the one with the lowest evaluated loss is trained further.
    ``init`` places the initial variational means at the identity, draws
    them from the prior, or ("mixed") uses the identity for the first start
    and prior draws for the remaining restarts.
    """

    iters: int = 2000
    warmup_iters: int = 200
    learning_rate: float = 0.02
    K: int = 20
    seed: int = 0
    k_max: int | None = None
    tie_params: bool = True
    m_inducing: int = 20
    ard: bool = False
    diagonal: bool = True
    log_every: int = 25
    verbose: bool = False
    init: str = "mixed"
    restarts: int = 1
    restart_iters: int | None = None

    def __post_init__(self):
        if self.warmup_iters < 0 or self.iters < self.warmup_iters:
            raise ValueError("need iters >= warmup_iters >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.m_inducing < 1:
            raise ValueError("m_inducing must be >= 1")
        if self.init not in ("identity", "prior", "mixed"):
            raise ValueError(f"init must be 'identity', 'prior' or 'mixed', got {self.init!r}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.restart_iters is not None and not self.warmup_iters <= self.restart_iters <= self.iters:
            raise ValueError("need warmup_iters <= restart_iters <= iters")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitReport:
    loss_trace: list[float]
    wall_time: float
    checkpoint: dict
    warmup_entropy: list[float] = field(default_factory=list)
    session: FitSession | None = None


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class FitSession:
    """Optimizer moments, noise stream and iteration count, for resuming a fit exactly."""

    adam: AdamState
    generator: torch.Generator
    iteration: int = 0


def gradient(objective: torch.Tensor, params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse-mode derivatives of a scalar objective w.r.t. each named tensor."""
    names = list(params)
    grads = torch.autograd.grad(objective, [params[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        g = torch.zeros_like(params[n]) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise TrainingError(
                f"non-finite gradient for {n!r}",
                dump={k: v.detach().clone() for k, v in params.items()},
            )
        out[n] = g
    return out


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    retractions: dict[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] | None = None,
) -> dict[str, torch.Tensor]:
    """One Adam update; returns new parameter tensors.

    ``retractions[name](param, step)`` applies a step to manifold-valued
    parameters; other parameters are updated by plain addition.
    """
    retractions = retractions or {}
    state.t += 1
    bc1 = 1.0 - BETA1**state.t
    bc2 = 1.0 - BETA2**state.t
    new = {}
    for name, p in params.items():
        g = grads[name].detach()
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - BETA1) * g if m is None else BETA1 * m + (1.0 - BETA1) * g
        v = (1.0 - BETA2) * g**2 if v is None else BETA2 * v + (1.0 - BETA2) * g**2
        state.m[name], state.v[name] = m, v
        step = -lr * (m / bc1) / (torch.sqrt(v / bc2) + EPS)
        p = p.detach()
        new[name] = retractions[name](p, step) if name in retractions else p + step
    return new


def initial_hypers(Y: np.ndarray) -> dict:
    sd = float(np.std(Y)) or 1.0
    return {"alpha": sd, "lengthscale": 1.0, "sigma": 0.5 * sd}


def _init_mode(init: str, restart: int) -> str:
    # "mixed": the first start sits at the identity, later restarts draw from the prior
    if init == "mixed":
        return "identity" if restart == 0 else "prior"
    return init


def build_model(manifold: Manifold | str, data: Dataset, cfg: FitConfig, restart: int = 0) -> MGplvmModel:
    """Model initialized as for a fresh fit: wide variances, inducing points from the prior."""
    gen = torch.Generator().manual_seed(cfg.seed + 7919 * restart)
    return MGplvmModel(
        manifold,
        data.N,
        data.M,
        m_inducing=min(cfg.m_inducing, data.M),
        tie_params=cfg.tie_params,
        ard=cfg.ard,
        diagonal=cfg.diagonal,
        k_max=cfg.k_max,
        init=_init_mode(cfg.init, restart),
        generator=gen,
        **initial_hypers(data.Y),
    )


def _retractions(m: Manifold) -> dict:
    if isinstance(m, Sphere2):
        mean_retract = lambda p, s: m.project(p + s)  # noqa: E731
    else:
        mean_retract = lambda p, s: m.mul(p, m.exp(s))  # noqa: E731
    return {"means": mean_retract, "Z": lambda p, s: m.project(p + s)}


def fit(
    model: MGplvmModel,
    data: Dataset,
    cfg: FitConfig,
    *,
    frozen: set[str] | frozenset[str] = frozenset(),
    trainable_conditions=None,
    session: FitSession | None = None,
    n_iters: int | None = None,
) -> FitReport:
    """Optimize the model in place with Adam on the Monte Carlo loss.

    During the first ``cfg.warmup_iters`` iterations the entropy term is
    dropped and the variational scales and kernel variance are held fixed.
    ``frozen`` names parameters that are never updated, and
    ``trainable_conditions`` restricts variational updates to a subset of
    conditions. Passing the ``session`` of an earlier report continues that
    run as if it had never stopped. ``n_iters`` overrides ``cfg.iters`` as
    the number of iterations to run now; the warm-up window always refers to
    the overall iteration count.
    """
    Y = data.tensor()
    m = model.manifold
    if session is None:
        session = FitSession(AdamState(), torch.Generator().manual_seed(cfg.seed))
    gen = session.generator
    start = session.iteration
    stop = start + (cfg.iters if n_iters is None else n_iters)
    adam = session.adam
    retract = _retractions(m)
    cond_mask = None
    if trainable_conditions is not None:
        cond_mask = torch.zeros(model.n_conditions, dtype=torch.float64)
        cond_mask[torch.as_tensor(np.asarray(trainable_conditions), dtype=torch.long)] = 1.0
    warm_frozen = {"scale", "log_kappa", "log_alpha"}

    trace: list[float] = []
    warm_entropy: list[float] = []
    last_good = model.to_dict()
    t0 = time.perf_counter()
    for it in range(start, stop):
        warm = it < cfg.warmup_iters
        params = {k: p.detach().requires_grad_(True) for k, p in model.tensors().items() if k != "means"}
        model.set_tensors(params)
        means = model.state.means.detach()
        shape = means.shape if isinstance(m, Sphere2) else (*means.shape[:-1], m.dim)
        shift = torch.zeros(shape, dtype=torch.float64, requires_grad=True)
        noise = model.draw_noise(cfg.K, gen)
        try:
            terms = model.loss_terms(Y, noise, mean_shift=shift, entropy=not warm)
        except NumericalError as err:
            model.set_tensors(MGplvmModel.from_dict(last_good).tensors())
            raise TrainingError(f"iteration {it}: {err}", checkpoint=last_good) from err
        loss_val = terms.loss
        if not bool(torch.isfinite(loss_val)):
            model.set_tensors(MGplvmModel.from_dict(last_good).tensors())
            raise TrainingError(f"non-finite loss at iteration {it}", checkpoint=last_good)
        try:
            grads = gradient(loss_val, {"means": shift, **params})
        except TrainingError as err:
            err.checkpoint = last_good
            raise
        model.set_tensors({k: v.detach() for k, v in params.items()})
        skip = set(frozen) | (warm_frozen if warm else set())
        current = model.tensors()
        update = {k: current[k] for k in grads if k not in skip}
        if cond_mask is not None:
            for k in ("means", "scale", "log_kappa"):
                if k in grads:
                    g = grads[k]
                    grads[k] = g * cond_mask.reshape(-1, *([1] * (g.ndim - 1)))
        model.set_tensors(adam_step(update, grads, adam, cfg.learning_rate, retract))
        trace.append(float(loss_val.detach()))
        if warm:
            warm_entropy.append(float(terms.entropy))
        if it % 5 == 0 or it == stop - 1:
            last_good = model.to_dict()
        session.iteration = it + 1
        if cfg.verbose and (it % cfg.log_every == 0 or it == stop - 1):
            print(
                f"iter={it} loss={trace[-1]:.6g} elapsed_s={time.perf_counter() - t0:.3f}",
                file=sys.stderr,
                flush=True,
            )
    return FitReport(trace, time.perf_counter() - t0, model.to_dict(), warm_entropy, session)


def fit_restarts(manifold: Manifold | str, data: Dataset, cfg: FitConfig) -> tuple[MGplvmModel, FitReport]:
    """Build and fit a model, keeping the best of ``cfg.restarts`` initializations.

    The selected run is resumed rather than restarted, so the result is
    identical to an uninterrupted fit from that initialization.
    """
    if cfg.restarts == 1:
        model = build_model(manifold, data, cfg)
        return model, fit(model, data, cfg)
    short = cfg.iters // 4 if cfg.restart_iters is None else cfg.restart_iters
    short = max(short, cfg.warmup_iters)
    best = None
    spent = 0.0
    for r in range(cfg.restarts):
        model = build_model(manifold, data, cfg, restart=r)
        run = replace(cfg, seed=cfg.seed + 7919 * r)
        rep = fit(model, data, run, n_iters=short)
        spent += rep.wall_time
        score = evaluate_loss(model, data, K=max(cfg.K, 50), seed=cfg.seed)
        if best is None or score < best[0]:
            best = (score, model, rep, run)
    _, model, rep, run = best
    rest = fit(model, data, run, session=rep.session, n_iters=cfg.iters - short)
    trace = rep.loss_trace + rest.loss_trace
    return model, FitReport(trace, spent + rest.wall_time, rest.checkpoint, rep.warmup_entropy, rest.session)


def evaluate_loss(model: MGplvmModel, data: Dataset, K: int = 20, seed: int = 0) -> float:
    """Loss at fixed parameters with a seeded draw."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        return float(model.loss_terms(data.tensor(), model.draw_noise(K, gen)).loss)


def moving_average(x, window: int = 50) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if len(x) < window:
        return np.array([x.mean()]) if len(x) else x
    return np.convolve(x, np.ones(window) / window, mode="valid")


def finite_difference_check(f: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor], eps: float = 1e-5):
    """Central differences of ``f`` w.r.t. each entry of the named tensors (modified in place)."""
    out = {}
    for name, t in tensors.items():
        g = torch.zeros_like(t)
        flat = t.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + eps
            fp = float(f())
            flat[i] = old - eps
            fm = float(f())
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * eps)
        out[name] = g
    return out


def max_relative_error(a: dict, b: dict, floor: float = 1e-6) -> float:
    worst = 0.0
    for k in a:
        num = torch.abs(a[k] - b[k])
        den = torch.clamp(torch.maximum(torch.abs(a[k]), torch.abs(b[k])), min=floor)
        worst = max(worst, float((num / den).max()))
    return worst if math.isfinite(worst) else math.inf
