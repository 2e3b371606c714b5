import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from mgplvm.kernel import KernelParams, gram, kernel_eval
from mgplvm.manifold import Torus, parse_manifold

TAGS = ["R2", "T1", "T2", "S2", "S3", "SO3", "T1xR1", "T2xSO3"]


def f64(x):
    return torch.tensor(x, dtype=torch.float64)


def elements(m, n, seed):
    return m.sample_uniform(n, torch.Generator().manual_seed(seed))


def rotation(q):
    q = q.numpy()
    return Rotation.from_quat(np.concatenate([q[:, 1:], q[:, :1]], 1)).as_matrix()


class TestKernelEval:
    def test_self_is_alpha_squared(self):
        for tag in TAGS:
            m = parse_manifold(tag)
            p = KernelParams.create(m, alpha=1.7, lengthscale=0.6)
            g = elements(m, 5, 0)
            np.testing.assert_allclose(kernel_eval(p, m, g, g).numpy(), 1.7**2, rtol=1e-14)

    def test_torus_antipode(self):
        p = KernelParams.create(Torus(1))
        assert kernel_eval(p, Torus(1), [0.0], [math.pi]).item() == pytest.approx(math.exp(-2.0), rel=1e-14)

    def test_ard_torus_infinite_lengthscale(self):
        m2, m1 = Torus(2), Torus(1)
        p2 = KernelParams(f64(0.3), torch.log(f64([0.8, 1e8])), ard=True)
        p1 = KernelParams(f64(0.3), f64([math.log(0.8)]))
        a, b = elements(m2, 20, 1), elements(m2, 20, 2)
        np.testing.assert_allclose(
            kernel_eval(p2, m2, a, b).numpy(), kernel_eval(p1, m1, a[:, :1], b[:, :1]).numpy(), rtol=1e-12
        )

    def test_ard_formula(self):
        m = Torus(3)
        ls = np.array([0.5, 1.0, 2.0])
        p = KernelParams(f64(math.log(2.0)), torch.log(f64(ls)), ard=True)
        a, b = elements(m, 10, 3), elements(m, 10, 4)
        d = (a - b).numpy()
        ref = 4.0 * np.exp(((np.cos(d) - 1) / ls**2).sum(1))
        np.testing.assert_allclose(kernel_eval(p, m, a, b).numpy(), ref, rtol=1e-13)

    def test_so3_rotation_matrix_oracle(self):
        # 4 (1 - (a.b)^2) = ||R_a - R_b||_F^2 / 2
        m = parse_manifold("SO3")
        p = KernelParams.create(m, alpha=1.0, lengthscale=0.9)
        a, b = elements(m, 10, 5), elements(m, 10, 6)
        d = 0.5 * ((rotation(a) - rotation(b)) ** 2).sum((1, 2))
        np.testing.assert_allclose(kernel_eval(p, m, a, b).numpy(), np.exp(-d / (2 * 0.81)), rtol=1e-12)

    def test_product_kernel_multiplies(self):
        m = parse_manifold("T1xR1")
        p = KernelParams(f64(0.2), torch.log(f64([0.7, 1.9])))
        a, b = elements(m, 10, 7), elements(m, 10, 8)
        an, bn = a.numpy(), b.numpy()
        ref = math.exp(0.4) * np.exp(-(2 - 2 * np.cos(an[:, 0] - bn[:, 0])) / (2 * 0.49))
        ref = ref * np.exp(-((an[:, 1] - bn[:, 1]) ** 2) / (2 * 1.9**2))
        np.testing.assert_allclose(kernel_eval(p, m, a, b).numpy(), ref, rtol=1e-13)

    def test_lengthscale_count_mismatch(self):
        m = Torus(2)
        with pytest.raises(ValueError):
            kernel_eval(KernelParams(f64(0.0), torch.zeros(3), ard=True), m, [0.0, 0.0], [1.0, 1.0])
        with pytest.raises(ValueError):
            KernelParams.create(Torus(1), ard=True)
        with pytest.raises(ValueError):
            KernelParams.create(parse_manifold("SO3"), ard=True)

    def test_monotone_decay(self):
        m = Torus(1)
        p = KernelParams.create(m)
        x = torch.linspace(0, math.pi, 50, dtype=torch.float64)[:, None]
        k = kernel_eval(p, m, torch.zeros_like(x), x).numpy()
        assert np.all(np.diff(k) < 0)


class TestGram:
    def test_singleton(self):
        m = parse_manifold("S3")
        p = KernelParams.create(m, alpha=0.5)
        np.testing.assert_allclose(gram(p, m, m.identity(1), m.identity(1)).numpy(), [[0.25]])

    @pytest.mark.parametrize("tag", TAGS)
    def test_entries_and_transpose(self, tag):
        m = parse_manifold(tag)
        p = KernelParams.create(m, alpha=1.3, lengthscale=0.8)
        A, B = elements(m, 7, 9), elements(m, 5, 10)
        G = gram(p, m, A, B)
        for i in range(7):
            np.testing.assert_allclose(G[i].numpy(), kernel_eval(p, m, A[i], B).numpy(), rtol=1e-14)
        np.testing.assert_allclose(gram(p, m, B, A).numpy(), G.T.numpy(), rtol=1e-14)

    @pytest.mark.parametrize("tag", TAGS)
    def test_psd(self, tag):
        m = parse_manifold(tag)
        rng = np.random.default_rng(0)
        for trial in range(50):
            n = int(rng.integers(2, 41))
            alpha, ls = float(rng.uniform(0.3, 3)), float(rng.uniform(0.1, 3))
            p = KernelParams.create(m, alpha=alpha, lengthscale=ls)
            A = elements(m, n, 100 + trial)
            assert np.linalg.eigvalsh(gram(p, m, A, A).numpy()).min() >= -1e-8 * alpha**2

    @pytest.mark.parametrize("tag", ["R2", "T2", "S3", "SO3", "T2xSO3"])
    def test_stationary(self, tag):
        m = parse_manifold(tag)
        p = KernelParams.create(m, lengthscale=0.7)
        A, h = elements(m, 15, 11), elements(m, 1, 12)
        np.testing.assert_allclose(
            gram(p, m, m.mul(h, A), m.mul(h, A)).numpy(), gram(p, m, A, A).numpy(), atol=1e-9
        )

    def test_batched_parameters(self):
        m = Torus(2)
        p = KernelParams(f64([0.0, 0.5]), torch.log(f64([[1.0], [0.3]])))
        A = elements(m, 6, 13)
        G = gram(p, m, A, A)
        assert G.shape == (2, 6, 6)
        for i in range(2):
            pi = KernelParams(p.log_alpha[i], p.log_lengthscales[i])
            np.testing.assert_allclose(G[i].numpy(), gram(pi, m, A, A).numpy(), rtol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(0.1, 4.0), st.integers(0, 10_000))
def test_bounded_by_alpha_squared(ls, alpha, seed):
    m = parse_manifold("T1xSO3")
    p = KernelParams.create(m, alpha=alpha, lengthscale=ls)
    a, b = elements(m, 10, seed), elements(m, 10, seed + 1)
    k = kernel_eval(p, m, a, b).numpy()
    assert np.all(k >= 0) and np.all(k <= alpha**2 * (1 + 1e-14))
