import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation
from scipy.stats import ortho_group

from mgplvm.evalcv import (
    align_latents,
    apply_transform,
    circular_correlation,
    compare_manifolds,
    crossval_score,
    make_split,
    rms_geodesic_error,
)
from mgplvm.manifold import SO3, Torus, parse_manifold
from mgplvm.model import Dataset
from mgplvm.synthgen import SynthSpec, gen_dataset
from mgplvm.train import FitConfig


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


QUICK = FitConfig(iters=30, warmup_iters=5, learning_rate=0.05, K=4, m_inducing=6)


class TestSplit:
    def test_halves(self):
        s = make_split(Dataset(np.zeros((4, 4))), 0)
        assert len(s.train_neurons) == len(s.test_neurons) == 2
        assert len(s.train_conditions) == len(s.test_conditions) == 2

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 40), st.integers(4, 40), st.integers(0, 10_000))
    def test_partition(self, N, M, seed):
        s = make_split(Dataset(np.zeros((N, M))), seed)
        for a, b, n in ((s.train_neurons, s.test_neurons, N), (s.train_conditions, s.test_conditions, M)):
            assert not set(a) & set(b)
            assert sorted(set(a) | set(b)) == list(range(n))

    def test_deterministic(self):
        d = Dataset(np.zeros((10, 12)))
        a, b = make_split(d, 7), make_split(d, 7)
        assert all(np.array_equal(x, y) for x, y in zip(
            (a.train_neurons, a.train_conditions), (b.train_neurons, b.train_conditions)))
        c = make_split(d, 8)
        assert not np.array_equal(a.train_conditions, c.train_conditions)

    @pytest.mark.parametrize("shape", [(1, 10), (5, 3)])
    def test_too_small(self, shape):
        with pytest.raises(ValueError):
            make_split(Dataset(np.zeros(shape)), 0)


class TestCrossval:
    def test_held_out_cells_are_never_read(self):
        ds = gen_dataset(SynthSpec("T1", N=8, M=10, seed=0))
        split = make_split(ds.data, 3)
        Y = ds.data.Y.copy()
        Y[np.ix_(split.test_neurons, split.test_conditions)] = np.nan
        poisoned = Dataset(Y, allow_nan=True)
        clean = crossval_score(ds.data, "T1", split, QUICK)
        dirty = crossval_score(poisoned, "T1", split, QUICK)
        assert clean.stage1.to_dict() == dirty.stage1.to_dict()
        assert clean.stage2.to_dict() == dirty.stage2.to_dict()
        np.testing.assert_array_equal(clean.pred_mean, dirty.pred_mean)
        assert math.isfinite(clean.row.mse) and math.isnan(dirty.row.mse)

    def test_row_shapes_and_finiteness(self):
        ds = gen_dataset(SynthSpec("SO3", N=6, M=8, seed=1))
        split = make_split(ds.data, 0)
        res = crossval_score(ds.data, "SO3", split, QUICK)
        assert res.pred_mean.shape == (3, 4) and res.pred_var.shape == (3, 4)
        assert bool((res.pred_var > 0).all())
        r = res.row
        assert r.manifold == "SO3" and all(math.isfinite(v) for v in (r.mse, r.nll, r.iw_ll))

    def test_untied_parameters(self):
        ds = gen_dataset(SynthSpec("T1", N=6, M=8, seed=2))
        cfg = FitConfig(iters=20, warmup_iters=5, learning_rate=0.05, K=4, m_inducing=4, tie_params=False)
        res = crossval_score(ds.data, "T1", make_split(ds.data, 0), cfg)
        assert math.isfinite(res.row.nll)

    def test_constant_data_reaches_noise_floor(self):
        rng = np.random.default_rng(0)
        noise = 0.1
        Y = 0.5 + noise * rng.normal(size=(20, 30))
        data = Dataset(Y)
        split = make_split(data, 0)
        cfg = FitConfig(iters=300, warmup_iters=30, learning_rate=0.05, K=8, m_inducing=8)
        mse = [crossval_score(data, t, split, cfg).row.mse for t in ("T2", "R2")]
        assert abs(mse[0] - mse[1]) < 2 * noise**2
        assert max(mse) < 3 * noise**2

    def test_compare_rows_and_failures(self):
        ds = gen_dataset(SynthSpec("T1", N=6, M=8, seed=3))
        rows = compare_manifolds(ds.data, ["T1", "R1"], [0], QUICK)
        assert [r.manifold for r in rows] == ["T1", "R1"]
        assert all(r.status == "ok" for r in rows)
        bad = compare_manifolds(ds.data, ["T1", "Q7"], [0], QUICK)
        assert bad[0].status == "ok" and bad[1].status.startswith("error")


def planted(tag, n=40, seed=0):
    m = parse_manifold(tag)
    g = m.sample_uniform(n, gen(seed)).numpy()
    rng = np.random.default_rng(seed)
    if tag.startswith("T"):
        d = m.dim
        perm = list(rng.permutation(d))
        tr = {"kind": "torus", "perm": perm, "signs": list(rng.choice([-1.0, 1.0], d)),
              "offsets": list(rng.uniform(0, 2 * np.pi, d))}
    elif tag.startswith("R"):
        tr = {"kind": "euclidean", "R": ortho_group.rvs(m.dim, random_state=seed).tolist(),
              "shift": rng.normal(size=m.dim).tolist()}
    else:
        tr = {"kind": "orthogonal", "R": ortho_group.rvs(g.shape[1], random_state=seed).tolist()}
    return m, g, apply_transform(m, tr, g)


class TestAlignment:
    @pytest.mark.parametrize("tag", ["T1", "T2", "T3", "S2", "S3", "SO3", "R2", "R3"])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_recovers_planted_transform(self, tag, seed):
        m, g, t = planted(tag, seed=seed)
        _, aligned, err = align_latents(m, g, t)
        assert err < 1e-6
        assert rms_geodesic_error(m, aligned, t) < 1e-6

    def test_product(self):
        m = parse_manifold("T1xR1")
        g = m.sample_uniform(30, gen(4)).numpy()
        tr = {"kind": "product", "factors": [
            {"kind": "torus", "signs": [-1.0], "offsets": [2.0]},
            {"kind": "euclidean", "R": [[-1.0]], "shift": [0.7]}]}
        _, _, err = align_latents(m, g, apply_transform(m, tr, g))
        assert err < 1e-6

    def test_pure_circle_offset(self):
        t = np.random.default_rng(0).uniform(0, 2 * np.pi, (25, 1))
        g = np.mod(t + np.pi, 2 * np.pi)
        tr, _, err = align_latents(Torus(1), g, t)
        assert err < 1e-9
        assert tr["signs"] == [1.0]
        assert abs(math.remainder(tr["offsets"][0] - math.pi, 2 * math.pi)) < 1e-6

    def test_so3_rotation_oracle(self):
        # left multiplication by a quaternion is a 4x4 orthogonal map of coordinates
        m = SO3()
        g = m.sample_uniform(50, gen(5))
        h = m.sample_uniform(1, gen(6))
        t = m.mul(h, g).numpy()
        _, aligned, err = align_latents(m, g.numpy(), t)
        assert err < 1e-4
        # scipy rotations of aligned and target agree
        ra = Rotation.from_quat(np.roll(aligned, -1, 1))
        rt = Rotation.from_quat(np.roll(t, -1, 1))
        assert float((ra.inv() * rt).magnitude().max()) < 1e-4

    def test_so3_random_signs(self):
        m, g, t = planted("SO3", seed=3)
        flips = np.where(np.random.default_rng(1).random(len(g)) < 0.5, -1.0, 1.0)
        _, _, err = align_latents(m, g * flips[:, None], t)
        assert err < 1e-6

    @pytest.mark.parametrize("tag", ["T2", "S3", "SO3"])
    def test_residual_invariant_to_common_action(self, tag):
        m = parse_manifold(tag)
        g = m.sample_uniform(30, gen(7))
        t = m.sample_uniform(30, gen(8))
        h = m.sample_uniform(1, gen(9))
        e1 = align_latents(m, g, t)[2]
        e2 = align_latents(m, m.mul(h, g), m.mul(h, t))[2]
        assert e1 == pytest.approx(e2, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            align_latents(Torus(1), np.zeros((3, 1)), np.zeros((4, 1)))


class TestStatistics:
    def test_circular_correlation_identity_and_shift(self):
        a = np.random.default_rng(0).uniform(0, 2 * np.pi, 200)
        assert circular_correlation(a, a) == pytest.approx(1.0)
        assert circular_correlation(a, -a) == pytest.approx(-1.0)
        assert circular_correlation(a, a + 1.3) == pytest.approx(1.0)

    def test_circular_correlation_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.vonmises(0.5, 2.0, 300)
        b = a + rng.vonmises(0.0, 4.0, 300)
        # direct evaluation of the defining formula
        ma = math.atan2(np.sin(a).sum(), np.cos(a).sum())
        mb = math.atan2(np.sin(b).sum(), np.cos(b).sum())
        num = np.sum(np.sin(a - ma) * np.sin(b - mb))
        den = math.sqrt(np.sum(np.sin(a - ma) ** 2) * np.sum(np.sin(b - mb) ** 2))
        assert circular_correlation(a, b) == pytest.approx(num / den, rel=1e-12)

    def test_independent_angles_near_zero(self):
        rng = np.random.default_rng(2)
        assert abs(circular_correlation(rng.uniform(0, 7, 5000), rng.uniform(0, 7, 5000))) < 0.05

    def test_rms_geodesic_error_on_circle(self):
        a = np.array([[0.1], [6.2], [3.0]])
        b = np.array([[6.2], [0.1], [3.5]])
        d = np.array([0.1 + 2 * np.pi - 6.2, 0.1 + 2 * np.pi - 6.2, 0.5])
        assert rms_geodesic_error(Torus(1), a, b) == pytest.approx(math.sqrt((d**2).mean()), rel=1e-12)
