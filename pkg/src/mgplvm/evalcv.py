"""Cross-validated model comparison and alignment of inferred latents to ground truth."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from itertools import permutations
from itertools import product as iproduct

import numpy as np
import torch
from scipy import optimize
from scipy.linalg import expm

from . import vardist
from .manifold import Euclidean, Manifold, Product, Torus, parse_manifold
from .model import Dataset, MGplvmModel, iw_log_likelihood
from .kernel import KernelParams
from .sparsegp import GPHyper, sparse_predict_columns
from .train import FitConfig, fit, fit_restarts

# -- splits -----------------------------------------------------------------


@dataclass
class CvSplit:
    train_conditions: np.ndarray
    test_conditions: np.ndarray
    train_neurons: np.ndarray
    test_neurons: np.ndarray
    seed: int = 0


def make_split(data: Dataset, seed: int = 0) -> CvSplit:
    """Random halves of both neurons and conditions."""
    N, M = data.Y.shape
    if N < 2 or M < 4:
        raise ValueError(f"cross-validation needs N >= 2 and M >= 4, got {N}x{M}")
    rng = np.random.default_rng(seed)
    neurons = rng.permutation(N)
    conds = rng.permutation(M)
    n_tr, m_tr = N - N // 2, M - M // 2
    return CvSplit(
        np.sort(conds[:m_tr]),
        np.sort(conds[m_tr:]),
        np.sort(neurons[:n_tr]),
        np.sort(neurons[n_tr:]),
        seed,
    )


@dataclass
class CompareRow:
    manifold: str
    seed: int
    mse: float
    nll: float
    iw_ll: float
    status: str = "ok"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CvResult:
    row: CompareRow
    stage1: MGplvmModel
    stage2: MGplvmModel
    pred_mean: np.ndarray  # (test_neurons, test_conditions)
    pred_var: np.ndarray


def _stage2_model(
    m1: MGplvmModel, split: CvSplit, M: int, cfg: FitConfig, Y_tn: np.ndarray | None = None
) -> MGplvmModel:
    """All conditions, train neurons; globals and train-condition posteriors copied from stage 1."""
    d = m1.to_dict()
    m = m1.manifold
    diagonal = m1.state.base is None or m1.state.base.diagonal
    means = None
    if cfg.init != "identity":
        means = m.sample_uniform(M, torch.Generator().manual_seed(cfg.seed + 3))
    fresh = vardist.init_state(m, M, diagonal=diagonal, means=means)
    tr = torch.as_tensor(split.train_conditions)
    if Y_tn is not None:
        # start each test condition at the training condition with the closest train-neuron response
        A, B = Y_tn[:, split.train_conditions], Y_tn[:, split.test_conditions]
        near = ((B.T[:, None, :] - A.T[None, :, :]) ** 2).sum(-1).argmin(1)
        fresh.means[torch.as_tensor(split.test_conditions)] = m1.state.means[torch.as_tensor(near)]
    fresh.means[tr] = m1.state.means
    if fresh.log_kappa is not None:
        fresh.log_kappa[tr] = m1.state.log_kappa
    else:
        fresh.base.raw[tr] = m1.state.base.raw
    d["means"] = fresh.means.tolist()
    if fresh.log_kappa is not None:
        d["log_kappa"] = fresh.log_kappa.tolist()
    else:
        d["scale"] = fresh.base.raw.tolist()
    if not m1.tie_params:
        keep = torch.as_tensor(split.train_neurons)
        for k in ("Z", "log_alpha", "log_lengthscales", "log_sigma"):
            d[k] = torch.tensor(d[k])[keep].tolist()
    d["n_neurons"] = len(split.train_neurons)
    return MGplvmModel.from_dict(d)


def crossval_score(
    data: Dataset,
    manifold: Manifold | str,
    split: CvSplit,
    cfg: FitConfig,
    *,
    stage2_cfg: FitConfig | None = None,
    K_pred: int = 100,
    K_iw: int = 64,
) -> CvResult:
    """Three-stage held-out prediction.

    1. Fit all neurons on the training conditions.
    2. With global parameters frozen, infer the test-condition latents from
       the training neurons only.
    3. Predict the test neurons at the test conditions from their stage-1
       GPs conditioned on the training conditions.

    Held-out cells (test neurons x test conditions) are never read before
    stage 3.
    """
    m = parse_manifold(manifold) if isinstance(manifold, str) else manifold
    tc, ec = split.train_conditions, split.test_conditions
    tn, en = split.train_neurons, split.test_neurons
    M = data.M

    d1 = Dataset(data.Y[:, tc])
    model1, _ = fit_restarts(m, d1, cfg)

    d2 = Dataset(data.Y[tn])
    model2 = _stage2_model(model1, split, M, stage2_cfg or cfg, data.Y[tn])
    fit(
        model2,
        d2,
        stage2_cfg or cfg,
        frozen={"Z", "log_alpha", "log_lengthscales", "log_sigma"},
        trainable_conditions=ec,
    )

    gen = torch.Generator().manual_seed(cfg.seed + 1)
    Y_fit = torch.as_tensor(data.Y[np.ix_(en, tc)])  # test neurons, train conditions
    Y_held = data.Y[np.ix_(en, ec)]
    with torch.no_grad():
        G = model2.sample_latents(model2.draw_noise(K_pred, gen)).elements  # (K, M, c)
        X = G[:, torch.as_tensor(tc)]
        Q = G[:, torch.as_tensor(ec)]
        if model1.tie_params:
            mean, var = sparse_predict_columns(Y_fit.T, X[:, None], model1.Z, model1.hyper, m, Q[:, None])
            mean = mean[:, 0].permute(0, 2, 1)  # (K, R, Q)
            var = var[:, 0][:, None, :].expand_as(mean)
            sig2 = torch.exp(2 * model1.hyper.log_sigma[0]).expand(len(en))
        else:
            idx = torch.as_tensor(en)
            h = GPHyper(
                KernelParams(
                    model1.hyper.kernel.log_alpha[idx],
                    model1.hyper.kernel.log_lengthscales[idx],
                    model1.hyper.kernel.ard,
                ),
                model1.hyper.log_sigma[idx],
            )
            mean, var = sparse_predict_columns(Y_fit[:, :, None], X[:, None], model1.Z[idx], h, m, Q[:, None])
            mean = mean[..., 0]  # (K, R, Q)
            sig2 = torch.exp(2 * h.log_sigma)
        pvar = var + sig2[None, :, None]
        yh = torch.as_tensor(Y_held)[None]
        logp = -0.5 * (math.log(2 * math.pi) + torch.log(pvar) + (yh - mean) ** 2 / pvar)
        mix = torch.logsumexp(logp, 0) - math.log(K_pred)
        pm = mean.mean(0)
        pv = pvar.mean(0) + mean.var(0, unbiased=False)
    mse = float(((pm.numpy() - Y_held) ** 2).mean())
    nll = float(-mix.mean())
    iw = iw_log_likelihood(model1, d1, K_iw, torch.Generator().manual_seed(cfg.seed + 2))
    row = CompareRow(m.tag, split.seed, mse, nll, iw)
    return CvResult(row, model1, model2, pm.numpy(), pv.numpy())


def compare_manifolds(
    data: Dataset, tags, seeds, cfg: FitConfig, jobs: int = 1, K_pred: int = 100, K_iw: int = 64
) -> list[CompareRow]:
    """Score every (manifold, seed) pair; failures become rows with a status message.

    The seed sets both the split and the fit, so all manifolds of one seed
    see the same split.
    """
    tasks = [(data.Y, t, s, cfg, K_pred, K_iw) for s in seeds for t in tags]
    if jobs > 1:
        # one torch thread per worker avoids oversubscription
        with ProcessPoolExecutor(jobs, initializer=torch.set_num_threads, initargs=(1,)) as ex:
            return list(ex.map(_score_task, tasks))
    return [_score_task(t) for t in tasks]


def _score_task(args) -> CompareRow:
    Y, tag, seed, cfg, K_pred, K_iw = args
    data = Dataset(Y)
    try:
        split = make_split(data, seed)
        return crossval_score(data, tag, split, replace(cfg, seed=seed), K_pred=K_pred, K_iw=K_iw).row
    except Exception as err:  # recorded per row; the comparison continues
        return CompareRow(tag, seed, math.nan, math.nan, math.nan, f"error: {type(err).__name__}: {err}")


# -- alignment ----------------------------------------------------------------


def _np(x) -> np.ndarray:
    return x.detach().numpy() if isinstance(x, torch.Tensor) else np.asarray(x, dtype=np.float64)


def _wrap(x):
    return np.pi - np.mod(np.pi - x, 2 * np.pi)


def _mean_geo(m: Manifold, a: np.ndarray, b: np.ndarray) -> float:
    return float(m.geodesic_distance(torch.as_tensor(a), torch.as_tensor(b)).mean())


def _align_torus(g: np.ndarray, t: np.ndarray):
    """Search axis orders and reflections exhaustively, offsets by grid plus refinement.

    Axis orders matter because the shared-lengthscale kernel is symmetric
    under swapping torus coordinates.
    """
    n = g.shape[1]
    best = None
    for perm in permutations(range(n)):
        val, signs, beta = _align_torus_fixed(g[:, list(perm)], t)
        if best is None or val < best[0] - 1e-12:
            best = (val, perm, signs, beta)
    _, perm, signs, beta = best
    return {"kind": "torus", "perm": list(perm), "signs": signs.tolist(), "offsets": beta.tolist()}


def _align_torus_fixed(g: np.ndarray, t: np.ndarray):
    n = g.shape[1]
    grid = np.linspace(0.0, 2 * np.pi, 256, endpoint=False)
    best = None

    def obj(signs, beta):
        d = _wrap(signs * g + beta - t)
        return float(np.sqrt((d**2).sum(1)).mean())

    for signs in iproduct((1.0, -1.0), repeat=n):
        signs = np.array(signs)
        beta = np.zeros(n)
        for _sweep in range(2 if n > 1 else 1):
            for k in range(n):

                def f1(b, k=k):
                    bb = beta.copy()
                    bb[k] = b
                    return obj(signs, bb)

                vals = [f1(b) for b in grid]
                i = int(np.argmin(vals))
                h = grid[1] - grid[0]
                # flat or tied grid minima break golden bracketing; bounded Brent does not
                res = optimize.minimize_scalar(
                    f1, bounds=(grid[i] - h, grid[i] + h), method="bounded", options={"xatol": 1e-12}
                )
                beta[k] = np.mod(res.x if res.fun <= vals[i] else grid[i], 2 * np.pi)
        val = obj(signs, beta)
        if best is None or val < best[0]:
            best = (val, signs, beta)
    return best


def _procrustes(g: np.ndarray, t: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(t.T @ g)
    return U @ Vt


def _flip_refine(g: np.ndarray, t: np.ndarray, R: np.ndarray) -> np.ndarray:
    # quaternion signs are arbitrary; flip to agree with the current fit
    gg = g.copy()
    for _ in range(20):
        flip = np.sign(((gg @ R.T) * t).sum(1))
        flip[flip == 0] = 1.0
        if np.all(flip > 0):
            break
        gg = gg * flip[:, None]
        R = _procrustes(gg, t)
    return R


def _moment_candidates(g: np.ndarray, t: np.ndarray) -> list[np.ndarray]:
    """Rotations matching the sign-invariant second moments sum(q q^T) of both clouds."""
    _, Vg = np.linalg.eigh(g.T @ g)
    _, Vt = np.linalg.eigh(t.T @ t)
    n = g.shape[1]
    return [Vt @ np.diag(s) @ Vg.T for s in iproduct((1.0, -1.0), repeat=n)]


def _align_orthogonal(m: Manifold, g: np.ndarray, t: np.ndarray):
    starts = [_procrustes(g, t)]
    if m.tag == "SO3":
        starts += _moment_candidates(g, t)
        starts = [_flip_refine(g, t, R) for R in starts]
    scored = [(_mean_geo(m, g @ R.T, t), k) for k, R in enumerate(starts)]
    best, k = min(scored)
    R = starts[k]
    if best > 1e-10:
        n = R.shape[0]
        iu = np.triu_indices(n, 1)

        def rot(w):
            A = np.zeros((n, n))
            A[iu] = w
            return R @ expm(A - A.T)

        res = optimize.minimize(
            lambda w: _mean_geo(m, g @ rot(w).T, t), np.zeros(len(iu[0])), method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000},
        )
        if res.fun < best:
            R, best = rot(res.x), res.fun
    return {"kind": "orthogonal", "R": R.tolist()}


def _align_euclidean(g: np.ndarray, t: np.ndarray):
    mg, mt = g.mean(0), t.mean(0)
    R = _procrustes(g - mg, t - mt)
    return {"kind": "euclidean", "R": R.tolist(), "shift": (mt - mg @ R.T).tolist()}


def apply_transform(m: Manifold, transform: dict, points) -> np.ndarray:
    g = _np(points)
    kind = transform["kind"]
    if kind == "torus":
        g = g[:, transform.get("perm", list(range(g.shape[1])))]
        return np.mod(np.asarray(transform["signs"]) * g + np.asarray(transform["offsets"]), 2 * np.pi)
    if kind == "orthogonal":
        return g @ np.asarray(transform["R"]).T
    if kind == "euclidean":
        return g @ np.asarray(transform["R"]).T + np.asarray(transform["shift"])
    if kind == "product":
        return np.concatenate(
            [apply_transform(f, tr, g[:, s]) for f, tr, s in zip(m.factors, transform["factors"], m.coord_slices)],
            1,
        )
    raise ValueError(f"unknown transform kind {kind!r}")


def _align_single(m: Manifold, g, t):
    if isinstance(m, Torus):
        return _align_torus(g, t)
    if isinstance(m, Euclidean):
        return _align_euclidean(g, t)
    return _align_orthogonal(m, g, t)


def align_latents(m: Manifold, means, targets):
    """Best distance-preserving transform of ``means`` onto ``targets``.

    Returns ``(transform, aligned_means, mean_geodesic_error)``.
    """
    g, t = _np(means), _np(targets)
    if g.shape != t.shape:
        raise ValueError(f"shape mismatch: {g.shape} vs {t.shape}")
    if isinstance(m, Product):
        tr = {
            "kind": "product",
            "factors": [_align_single(f, g[:, s], t[:, s]) for f, s in zip(m.factors, m.coord_slices)],
        }
    else:
        tr = _align_single(m, g, t)
    aligned = apply_transform(m, tr, g)
    return tr, aligned, _mean_geo(m, aligned, t)


# -- summary statistics ---------------------------------------------------------


def circular_correlation(a, b) -> float:
    """Jammalamadaka-SenGupta circular correlation between two angle samples."""
    a, b = _np(a).ravel(), _np(b).ravel()
    ma = np.angle(np.exp(1j * a).mean())
    mb = np.angle(np.exp(1j * b).mean())
    sa, sb = np.sin(a - ma), np.sin(b - mb)
    return float((sa * sb).sum() / np.sqrt((sa**2).sum() * (sb**2).sum()))


def rms_geodesic_error(m: Manifold, a, b) -> float:
    d = m.geodesic_distance(torch.as_tensor(_np(a)), torch.as_tensor(_np(b)))
    return float(torch.sqrt((d**2).mean()))
