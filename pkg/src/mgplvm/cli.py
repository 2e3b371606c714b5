"""Command-line front end.

Subcommands::

    mgplvm generate --config run.json --out data/
    mgplvm fit data/Y.csv T1 --config run.json --out fit/
    mgplvm compare data/Y.csv --manifolds T2,R2 --config run.json --out cmp/ --jobs 4
    mgplvm tuning fit/model.json data/Y.csv --neurons 0,5 --grid 64 --out tc/

The JSON config has optional sections ``synth``, ``fit``, ``compare`` and
``tuning``. Unknown keys are rejected. Every command writes the effective
configuration to ``config.echo.json``; rerunning from the echo gives
identical outputs.

Exit codes: 0 success, 2 configuration or validation error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np
import torch
from scipy.stats import qmc

from . import evalcv
from .manifold import Euclidean, Manifold, Product, Sphere2, Sphere3, SO3, Torus, parse_manifold
from .model import Dataset, MGplvmModel, posterior_tuning
from .sparsegp import NumericalError
from .synthgen import SynthSpec, gen_dataset
from .train import FitConfig, TrainingError, build_model, evaluate_loss, fit

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class CompareSection:
    seeds: list[int] = dataclasses.field(default_factory=lambda: [0])
    K_pred: int = 100
    K_iw: int = 64

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be a non-empty list")
        if self.K_pred < 1 or self.K_iw < 1:
            raise ValueError("K_pred and K_iw must be >= 1")


@dataclasses.dataclass
class TuningSection:
    K: int = 200
    chunk: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.chunk < 1:
            raise ValueError("K and chunk must be >= 1")


SECTIONS = {"synth": SynthSpec, "fit": FitConfig, "compare": CompareSection, "tuning": TuningSection}


# -- config -------------------------------------------------------------------


def _build_section(name: str, cls, raw) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key (allowed: {', '.join(sorted(known))})")
    kwargs = {k: tuple(v) if isinstance(v, list) and k.endswith("_range") else v for k, v in raw.items()}
    if name == "synth" and "manifold" in kwargs:
        try:
            parse_manifold(kwargs["manifold"])
        except (ValueError, TypeError) as err:
            raise ConfigError(f"synth.manifold: {err}") from None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as err:
        raise ConfigError(f"{name}: {err}") from None


def load_config(path: str | Path | None) -> dict:
    """Parse and validate a run config into section objects, filling defaults."""
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: line {err.lineno} column {err.colno}: {err.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"{key}: unknown section (allowed: {', '.join(SECTIONS)})")
    return {name: _build_section(name, cls, raw.get(name)) for name, cls in SECTIONS.items()}


def config_echo(cfg: dict) -> dict:
    return {name: dataclasses.asdict(section) for name, section in cfg.items()}


def _with_seed(cfg: dict, seed: int | None) -> dict:
    if seed is None:
        return cfg
    return {
        **cfg,
        "synth": dataclasses.replace(cfg["synth"], seed=seed),
        "fit": dataclasses.replace(cfg["fit"], seed=seed),
        "compare": dataclasses.replace(cfg["compare"], seeds=[seed]),
        "tuning": dataclasses.replace(cfg["tuning"], seed=seed),
    }


# -- file formats -------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def write_y_csv(path: Path, Y: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["neuron_id"] + [f"c{j}" for j in range(Y.shape[1])])
        for i, row in enumerate(Y):
            w.writerow([i] + [_fmt(v) for v in row])


def read_y_csv(path: str | Path) -> Dataset:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as err:
        raise ConfigError(f"cannot read data {path}: {err}") from None
    if len(rows) < 2 or not rows[0] or rows[0][0] != "neuron_id":
        raise ConfigError(f"{path}: expected header 'neuron_id,c0,...'")
    width = len(rows[0])
    try:
        vals = []
        for k, r in enumerate(rows[1:], start=2):
            if len(r) != width:
                raise ConfigError(f"{path}: line {k} has {len(r)} fields, expected {width}")
            vals.append([float(v) for v in r[1:]])
        return Dataset(np.array(vals, dtype=np.float64), labels=rows[0][1:])
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from None


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, (int, str)) else _fmt(v) for v in r])


# -- query grids -----------------------------------------------------------------


def _qmc_uniform(n: int, d: int, seed: int) -> np.ndarray:
    return qmc.Halton(d, scramble=True, seed=seed).random(n)


def _factor_grid(f: Manifold, n: int, center: np.ndarray, spread: np.ndarray) -> np.ndarray:
    if isinstance(f, Torus):
        ax = np.linspace(-math.pi, math.pi, n, endpoint=False)
        mesh = np.meshgrid(*([ax] * f.dim), indexing="ij")
        return np.stack([g.ravel() for g in mesh], -1)
    if isinstance(f, Euclidean):
        lo, hi = center - 2 * spread, center + 2 * spread
        axes = [np.linspace(lo[k], hi[k], n) for k in range(f.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], -1)
    if isinstance(f, Sphere2):
        # Fibonacci lattice
        k = np.arange(n) + 0.5
        z = 1.0 - 2.0 * k / n
        phi = math.pi * (1.0 + math.sqrt(5.0)) * k
        r = np.sqrt(1.0 - z**2)
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], -1)
    if isinstance(f, (Sphere3, SO3)):
        # low-discrepancy points pushed through the uniform-quaternion map
        u = _qmc_uniform(n, 3, 0)
        a, b = np.sqrt(1 - u[:, 0]), np.sqrt(u[:, 0])
        t1, t2 = 2 * math.pi * u[:, 1], 2 * math.pi * u[:, 2]
        q = np.stack([b * np.cos(t2), a * np.sin(t1), a * np.cos(t1), b * np.sin(t2)], -1)
        if isinstance(f, SO3):
            q = q * np.where(q[:, :1] < 0, -1.0, 1.0)
        return q
    raise ConfigError(f"no query grid for manifold {f.tag}")


def query_grid(m: Manifold, n: int, means: np.ndarray) -> np.ndarray:
    """Query points: ``n`` per axis for tori and Euclidean factors, ``n`` in total on spheres and SO(3)."""
    factors = m.factors
    slices = m.coord_slices if isinstance(m, Product) else [slice(0, m.coord_dim)]
    parts = []
    for f, s in zip(factors, slices):
        sub = means[:, s]
        parts.append(_factor_grid(f, n, sub.mean(0), sub.std(0) + 1e-9))
    out = parts[0]
    for p in parts[1:]:
        out = np.concatenate([np.repeat(out, len(p), 0), np.tile(p, (len(out), 1))], -1)
    return out


# -- svg ------------------------------------------------------------------------


def _svg_line(q: np.ndarray, mean: np.ndarray, std: np.ndarray, title: str) -> str:
    W, H, pad = 480, 320, 40
    x = q[:, 0]
    lo, hi = float((mean - 2 * std).min()), float((mean + 2 * std).max())
    hi = hi if hi > lo else lo + 1.0

    def px(v):
        return pad + (v - x.min()) / max(x.max() - x.min(), 1e-12) * (W - 2 * pad)

    def py(v):
        return H - pad - (v - lo) / (hi - lo) * (H - 2 * pad)

    upper = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, mean + 2 * std)]
    lower = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[::-1], (mean - 2 * std)[::-1])]
    line = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, mean)]
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">\n'
        f'<rect width="{W}" height="{H}" fill="white"/>\n'
        f'<polygon points="{" ".join(upper + lower)}" fill="#9ecae1" stroke="none"/>\n'
        f'<polyline points="{" ".join(line)}" fill="none" stroke="#08519c" stroke-width="2"/>\n'
        f'<text x="{pad}" y="20" font-size="14">{title}</text>\n'
        f'<text x="{pad}" y="{H - 10}" font-size="11">{x.min():.3g}</text>\n'
        f'<text x="{W - pad}" y="{H - 10}" font-size="11" text-anchor="end">{x.max():.3g}</text>\n'
        "</svg>\n"
    )


def _svg_heat(q: np.ndarray, mean: np.ndarray, title: str) -> str:
    W, H, pad = 400, 420, 40
    xs, ys = np.unique(q[:, 0]), np.unique(q[:, 1])
    cw, ch = (W - 2 * pad) / len(xs), (H - 2 * pad - 20) / len(ys)
    lo, hi = float(mean.min()), float(mean.max())
    span = hi - lo if hi > lo else 1.0
    rects = []
    for (a, b), v in zip(q[:, :2], mean):
        i, j = int(np.searchsorted(xs, a)), int(np.searchsorted(ys, b))
        t = (v - lo) / span
        r, g, bl = int(255 * t), int(64 + 96 * (1 - abs(2 * t - 1))), int(255 * (1 - t))
        rects.append(
            f'<rect x="{pad + i * cw:.2f}" y="{H - pad - (j + 1) * ch:.2f}" width="{cw + 0.1:.2f}" '
            f'height="{ch + 0.1:.2f}" fill="rgb({r},{g},{bl})"/>'
        )
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">\n'
        f'<rect width="{W}" height="{H}" fill="white"/>\n'
        + "\n".join(rects)
        + f'\n<text x="{pad}" y="20" font-size="14">{title} (range {lo:.3g} to {hi:.3g})</text>\n</svg>\n'
    )


# -- commands --------------------------------------------------------------------


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = _with_seed(load_config(args.config), args.seed)
    out = _out_dir(args.out)
    spec = cfg["synth"]
    ds = gen_dataset(spec)
    write_y_csv(out / "Y.csv", ds.data.Y)
    write_json(out / "truth.json", ds.truth_json(spec))
    write_json(out / "config.echo.json", config_echo(cfg))
    return EXIT_OK


def _latent_rows(model: MGplvmModel):
    means = model.state.means.detach().numpy()
    if model.state.log_kappa is not None:
        spread = torch.exp(model.state.log_kappa).detach().numpy()[:, None]
        names = ["kappa"]
    else:
        base = model.state.base
        L = base.tril().detach()
        spread = torch.sqrt((L**2).sum(-1)).numpy()
        names = [f"std{k}" for k in range(spread.shape[1])]
    header = ["condition"] + [f"mean{k}" for k in range(means.shape[1])] + names
    rows = [[j, *means[j], *spread[j]] for j in range(len(means))]
    return header, rows


def _save_fit(out: Path, model: MGplvmModel, data: Dataset, fcfg: FitConfig, trace, extra=None) -> None:
    state = model.to_dict()
    state["eval_loss"] = evaluate_loss(model, data, fcfg.K, fcfg.seed)
    state.update(extra or {})
    write_json(out / "model.json", state)
    _write_rows(out / "trace.csv", ["iter", "loss"], [[i, v] for i, v in enumerate(trace)])
    header, rows = _latent_rows(model)
    _write_rows(out / "latents.csv", header, rows)


def load_model(path: str | Path) -> MGplvmModel:
    try:
        d = json.loads(Path(path).read_text())
        return MGplvmModel.from_dict(d)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as err:
        raise ConfigError(f"cannot load checkpoint {path}: {err}") from None


def cmd_fit(args) -> int:
    cfg = _with_seed(load_config(args.config), args.seed)
    fcfg = dataclasses.replace(cfg["fit"], verbose=cfg["fit"].verbose or args.verbose)
    cfg["fit"] = fcfg
    out = _out_dir(args.out)
    data = read_y_csv(args.data)
    try:
        m = parse_manifold(args.manifold)
    except ValueError as err:
        raise ConfigError(f"manifold: {err}") from None
    if args.init:
        model = load_model(args.init)
        if model.manifold.tag != m.tag or model.n_conditions != data.M or model.n_neurons != data.N:
            raise ConfigError("--init checkpoint does not match the data shape or manifold")
    else:
        model = build_model(m, data, fcfg)
    write_json(out / "config.echo.json", {**config_echo(cfg), "manifold": m.tag})
    try:
        rep = fit(model, data, fcfg)
    except TrainingError as err:
        if err.checkpoint is not None:
            write_json(out / "model.json", {**err.checkpoint, "error": str(err)})
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    _save_fit(out, model, data, fcfg, rep.loss_trace, {"wall_time_s": rep.wall_time})
    return EXIT_OK


def _parse_tags(text: str | None) -> list[str]:
    if not text:
        raise ConfigError("--manifolds: need a comma-separated list of at least two tags")
    tags = [t.strip() for t in text.split(",") if t.strip()]
    if len(tags) < 2:
        raise ConfigError("--manifolds: need at least two tags")
    for t in tags:
        try:
            parse_manifold(t)
        except ValueError as err:
            raise ConfigError(f"--manifolds: {err}") from None
    return tags


def compare_markdown(rows: list[evalcv.CompareRow]) -> str:
    lines = ["| manifold | seed | mse | nll | iw_ll | status |", "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r.manifold} | {r.seed} | {r.mse:.6g} | {r.nll:.6g} | {r.iw_ll:.6g} | {r.status} |")
    wins: dict[str, int] = {}
    seeds = sorted({r.seed for r in rows})
    lines += ["", "| seed | winner (lowest held-out nll) |", "|---|---|"]
    for s in seeds:
        ok = [r for r in rows if r.seed == s and r.status == "ok" and math.isfinite(r.nll)]
        if not ok:
            lines.append(f"| {s} | none |")
            continue
        w = min(ok, key=lambda r: r.nll).manifold
        wins[w] = wins.get(w, 0) + 1
        lines.append(f"| {s} | {w} |")
    if wins:
        best = max(wins, key=wins.get)
        lines += ["", f"Winning manifold: **{best}** ({wins[best]}/{len(seeds)} seeds)"]
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    cfg = _with_seed(load_config(args.config), args.seed)
    tags = _parse_tags(args.manifolds)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    out = _out_dir(args.out)
    data = read_y_csv(args.data)
    cc = cfg["compare"]
    write_json(out / "config.echo.json", {**config_echo(cfg), "manifolds": tags})
    rows = evalcv.compare_manifolds(
        data, tags, cc.seeds, cfg["fit"], jobs=args.jobs, K_pred=cc.K_pred, K_iw=cc.K_iw
    )
    _write_rows(
        out / "compare.csv",
        ["manifold", "seed", "mse", "nll", "iw_ll", "status"],
        [[r.manifold, r.seed, r.mse, r.nll, r.iw_ll, r.status] for r in rows],
    )
    (out / "compare.md").write_text(compare_markdown(rows))
    return EXIT_OK if any(r.status == "ok" for r in rows) else EXIT_NUMERIC


def _parse_neurons(text: str | None, N: int) -> list[int]:
    if not text:
        return list(range(N))
    try:
        idx = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--neurons: expected comma-separated integers, got {text!r}") from None
    bad = [i for i in idx if not 0 <= i < N]
    if bad:
        raise ConfigError(f"--neurons: index {bad[0]} out of range for {N} neurons")
    return idx


def cmd_tuning(args) -> int:
    cfg = _with_seed(load_config(args.config), args.seed)
    tc = cfg["tuning"]
    if args.grid < 2:
        raise ConfigError("--grid must be >= 2")
    model = load_model(args.model)
    data = read_y_csv(args.data)
    if data.M != model.n_conditions or data.N != model.n_neurons:
        raise ConfigError("data shape does not match the checkpoint")
    neurons = _parse_neurons(args.neurons, data.N)
    out = _out_dir(args.out)
    write_json(out / "config.echo.json", {**config_echo(cfg), "grid": args.grid, "neurons": neurons})
    m = model.manifold
    q = query_grid(m, args.grid, model.state.means.detach().numpy())
    for i in neurons:
        means, stds = [], []
        for start in range(0, len(q), tc.chunk):
            # reseeding per chunk reuses the same latent draws for every chunk
            gen = torch.Generator().manual_seed(tc.seed)
            post = posterior_tuning(model, data, i, q[start : start + tc.chunk], K=tc.K, generator=gen)
            means.append(post.mean)
            stds.append(post.std)
        mean, std = np.concatenate(means), np.concatenate(stds)
        header = [f"q{k}" for k in range(q.shape[1])] + ["mean", "std"]
        _write_rows(out / f"tuning_{i}.csv", header, [[*a, b, c] for a, b, c in zip(q, mean, std)])
        if m.dim == 1:
            (out / f"tuning_{i}.svg").write_text(_svg_line(q, mean, std, f"neuron {i}"))
        elif m.dim == 2 and q.shape[1] == 2:
            (out / f"tuning_{i}.svg").write_text(_svg_heat(q, mean, f"neuron {i}"))
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgplvm", description="Manifold GPLVM toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override every seed in the config")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit one manifold model")
    f.add_argument("data", help="Y.csv")
    f.add_argument("manifold", help="manifold tag, e.g. T1, SO3, T1xR1")
    f.add_argument("--init", help="start from a model.json checkpoint")
    f.add_argument("--verbose", action="store_true", help="progress lines on stderr")
    common(f)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("compare", help="cross-validated comparison of manifolds")
    c.add_argument("data", help="Y.csv")
    c.add_argument("--manifolds", required=True, help="comma-separated tags")
    c.add_argument("--jobs", type=int, default=1, help="worker processes")
    common(c)
    c.set_defaults(func=cmd_compare)

    t = sub.add_parser("tuning", help="posterior tuning curves on a query grid")
    t.add_argument("model", help="model.json")
    t.add_argument("data", help="Y.csv used for the fit")
    t.add_argument("--neurons", help="comma-separated neuron indices (default all)")
    t.add_argument("--grid", type=int, default=64, help="grid points per axis")
    common(t)
    t.set_defaults(func=cmd_tuning)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_CONFIG if err.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, NumericalError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
