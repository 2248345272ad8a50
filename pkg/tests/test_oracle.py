"""Estimator tests: adaptation law invariants, projection safety, replay
buffer policies, hidden-stack training, and the kernel baseline, with
gradients and Jacobians checked against central finite differences.
"""

import numpy as np
import pytest

from lbmpc import oracle as om
from lbmpc.oracle import (InsufficientData, L2nwEstimator, NetworkArch,
                          ReplayBuffer, ShapeMismatch, adapt, batch_gradients,
                          batch_loss, buffer_push, features, hidden_from_text,
                          hidden_to_text, init_hidden, l2nw_jacobian,
                          l2nw_predict, lyapunov_Va, new_oracle, predict,
                          predict_and_jacobian, project_columns, swap_hidden,
                          train_hidden)


class FakeModel:
    """Minimal linear model stub for adapt()."""

    def __init__(self, d, m, rng):
        self.A = 0.5 * np.eye(d) + 0.05 * rng.normal(size=(d, d))
        self.B = rng.normal(size=(d, m))


@pytest.fixture
def arch():
    return NetworkArch(n_in=5, hidden=(8, 6), n_out=4)


@pytest.fixture
def state(arch):
    return new_oracle(arch, W_bar=np.full(4, 0.5), gamma=0.5, seed=7)


class TestNetwork:
    def test_init_deterministic_per_seed(self, arch):
        a = init_hidden(arch, seed=3)
        b = init_hidden(arch, seed=3)
        c = init_hidden(arch, seed=4)
        for (Wa, _), (Wb, _), (Wc, _) in zip(a, b, c):
            assert np.array_equal(Wa, Wb)
            assert not np.array_equal(Wa, Wc)

    def test_features_bounded_with_leading_one(self, state):
        rng = np.random.default_rng(0)
        for _ in range(50):
            phi = features(state, rng.normal(size=4) * 10, rng.normal(size=1))
            assert phi[0] == 1.0
            assert np.all(np.abs(phi) <= 1.0 + 1e-12)
            assert np.linalg.norm(phi) <= state.arch.sigma + 1e-12

    def test_prediction_uniformly_bounded(self, state):
        rng = np.random.default_rng(1)
        st = state
        bound = st.arch.sigma * np.sum(st.W_bar)
        model = FakeModel(4, 1, rng)
        for _ in range(30):
            st = adapt(st, rng.normal(size=4), rng.normal(size=1),
                       rng.normal(size=4), model)
            h = predict(st, rng.normal(size=4) * 5, rng.normal(size=1))
            assert np.linalg.norm(h) <= bound + 1e-9

    def test_jacobians_match_finite_differences(self, state):
        rng = np.random.default_rng(2)
        # nonzero output layer so the Jacobian is informative
        K = rng.normal(size=state.K.shape) * 0.1
        st = om.OracleState(arch=state.arch, hidden=state.hidden, K=K,
                            W_bar=np.full(4, 10.0), gamma=0.5)
        eps = 1e-6
        for _ in range(10):
            x = rng.normal(size=4)
            u = rng.normal(size=1)
            h, Jx, Ju = predict_and_jacobian(st, x, u)
            assert np.allclose(h, predict(st, x, u))
            for j in range(4):
                dx = np.zeros(4)
                dx[j] = eps
                fd = (predict(st, x + dx, u) - predict(st, x - dx, u)) / (2 * eps)
                assert np.allclose(Jx[:, j], fd, atol=1e-7)
            fd = (predict(st, x, u + eps) - predict(st, x, u - eps)) / (2 * eps)
            assert np.allclose(Ju[:, 0], fd, atol=1e-7)

    def test_swap_increments_generation_keeps_K(self, state):
        new = init_hidden(state.arch, seed=99)
        swapped = swap_hidden(state, new)
        assert swapped.generation == state.generation + 1
        assert np.array_equal(swapped.K, state.K)
        with pytest.raises(ShapeMismatch):
            swap_hidden(state, new[:1])

    def test_snapshot_text_round_trip(self, state):
        text = hidden_to_text(state.hidden)
        back = hidden_from_text(text)
        for (W, b), (W2, b2) in zip(state.hidden, back):
            assert np.array_equal(W, W2)
            assert np.array_equal(b, b2)


class TestProjection:
    def test_norms_respect_bounds(self):
        rng = np.random.default_rng(3)
        W_bar = np.array([0.3, 1.0, 0.05])
        for _ in range(500):
            K = project_columns(rng.normal(size=(7, 3)) * 2.0, W_bar)
            assert np.all(np.linalg.norm(K, axis=0) <= W_bar + 1e-12)

    def test_projection_inequality(self):
        # (W*_i - K_i)'(Kbar_i - K_i) <= 0 whenever ||W*_i|| <= bound
        rng = np.random.default_rng(4)
        W_bar = np.array([0.5, 0.8])
        for _ in range(500):
            K_bar = rng.normal(size=(5, 2)) * 2.0
            K = project_columns(K_bar, W_bar)
            W_star = rng.normal(size=(5, 2))
            norms = np.linalg.norm(W_star, axis=0)
            W_star = W_star / np.maximum(norms / W_bar, 1.0)
            for i in range(2):
                ip = (W_star[:, i] - K[:, i]) @ (K_bar[:, i] - K[:, i])
                assert ip <= 1e-10

    def test_interior_points_untouched(self):
        K = np.array([[0.1], [0.1]])
        assert np.array_equal(project_columns(K, np.array([1.0])), K)


class TestAdaptation:
    def test_drift_bound_on_realizable_truth(self, arch):
        # truth exactly representable: h = W*' phi, so the dissipation
        # bound V(K+) - V(K) <= -((1-gamma)/sigma^2) ||xtilde||^2 must hold
        rng = np.random.default_rng(5)
        gamma = 0.5
        st = new_oracle(arch, W_bar=np.full(4, 0.5), gamma=gamma, seed=11)
        W_star = rng.normal(size=st.K.shape)
        W_star /= np.maximum(np.linalg.norm(W_star, axis=0) / st.W_bar, 1.0)
        model = FakeModel(4, 1, rng)
        sigma2 = st.arch.sigma ** 2
        V = lyapunov_Va(st, W_star)
        for _ in range(2000):
            x = rng.normal(size=4)
            u = rng.normal(size=1)
            phi = features(st, x, u)
            x_next = model.A @ x + model.B @ u + phi @ W_star
            x_tilde = (model.A @ x + model.B @ u + phi @ st.K) - x_next
            st = adapt(st, x, u, x_next, model)
            V_new = lyapunov_Va(st, W_star)
            drift = V_new - V
            assert drift <= -((1 - gamma) / sigma2) * (x_tilde @ x_tilde) + 1e-10
            V = V_new

    def test_Va_never_exceeds_worst_case(self, arch):
        rng = np.random.default_rng(6)
        gamma = 0.5
        st = new_oracle(arch, W_bar=np.full(4, 0.25), gamma=gamma, seed=2)
        W_star = np.zeros(st.K.shape)
        bound = (4.0 / gamma) * np.sum(st.W_bar ** 2)
        model = FakeModel(4, 1, rng)
        for _ in range(1000):
            st = adapt(st, rng.normal(size=4), rng.normal(size=1),
                       rng.normal(size=4) * 0.1, model)
            assert lyapunov_Va(st, W_star) <= bound + 1e-12

    def test_cached_phi_matches_recompute(self, arch):
        rng = np.random.default_rng(7)
        st = new_oracle(arch, W_bar=np.full(4, 0.5), gamma=0.5, seed=1)
        model = FakeModel(4, 1, rng)
        x, u, x_next = rng.normal(size=4), rng.normal(size=1), rng.normal(size=4)
        phi = features(st, x, u)
        a = adapt(st, x, u, x_next, model, phi=phi)
        b = adapt(st, x, u, x_next, model)
        assert np.array_equal(a.K, b.K)


class TestReplayBuffer:
    def test_capacity_never_exceeded(self):
        rng = np.random.default_rng(8)
        for policy in ("fifo", "diversity"):
            buf = ReplayBuffer(capacity=32, policy=policy)
            for _ in range(500):
                buf = buffer_push(buf, rng.normal(size=5), rng.normal(size=4))
                assert len(buf) <= 32

    def test_fifo_overwrites_oldest(self):
        buf = ReplayBuffer(capacity=3)
        for i in range(5):
            buf.push(np.full(2, float(i)), np.zeros(1))
        stored = sorted(v[0] for v in buf.inputs)
        assert stored == [2.0, 3.0, 4.0]

    def test_diversity_keeps_spread(self):
        buf = ReplayBuffer(capacity=4, policy="diversity")
        for v in (0.0, 1.0, 2.0, 3.0):
            buf.push(np.array([v]), np.zeros(1))
        # a near-duplicate of 0.0 must not evict a far point
        buf.push(np.array([0.01]), np.zeros(1))
        vals = sorted(v[0] for v in buf.inputs)
        assert 3.0 in vals

    def test_sample_and_insufficient(self):
        buf = ReplayBuffer(capacity=10)
        for i in range(4):
            buf.push(np.array([float(i), 0.0]), np.array([1.0]))
        X, H = buf.sample(3, np.random.default_rng(0))
        assert X.shape == (3, 2) and H.shape == (3, 1)
        with pytest.raises(InsufficientData):
            buf.sample(5, np.random.default_rng(0))

    def test_non_finite_rejected(self):
        buf = ReplayBuffer(capacity=4)
        with pytest.raises(ValueError):
            buf.push(np.array([np.nan]), np.zeros(1))


class TestTraining:
    def _filled_buffer(self, arch, rng, n=64):
        buf = ReplayBuffer(capacity=n)
        for _ in range(n):
            xu = rng.normal(size=arch.n_in)
            buf.push(xu, np.sin(xu[:4]))
        return buf

    def test_loss_never_increases(self, arch, state):
        rng = np.random.default_rng(9)
        buf = self._filled_buffer(arch, rng)
        st = om.OracleState(arch=arch, hidden=state.hidden,
                            K=rng.normal(size=state.K.shape) * 0.1,
                            W_bar=np.full(4, 10.0), gamma=0.5)
        X, H = buf.sample(32, np.random.default_rng(5))
        loss0 = batch_loss(st.hidden, st.K, X, H)
        _, loss = train_hidden(st, buf, 32, epochs=25, lr=0.01, seed=5)
        assert loss <= loss0 + 1e-15

    def test_training_is_seeded(self, arch, state):
        rng = np.random.default_rng(10)
        buf = self._filled_buffer(arch, rng)
        h1, l1 = train_hidden(state, buf, 16, epochs=5, seed=3)
        h2, l2 = train_hidden(state, buf, 16, epochs=5, seed=3)
        assert l1 == l2
        for (Wa, _), (Wb, _) in zip(h1, h2):
            assert np.array_equal(Wa, Wb)

    def test_gradients_match_finite_differences(self, arch):
        rng = np.random.default_rng(11)
        hidden = init_hidden(arch, seed=0)
        K = rng.normal(size=(arch.feature_dim, arch.n_out)) * 0.3
        X = rng.normal(size=(12, arch.n_in))
        H = rng.normal(size=(12, arch.n_out))
        grads, _ = batch_gradients(hidden, K, X, H)
        eps = 1e-6
        for layer in range(len(hidden)):
            W, b = hidden[layer]
            for idx in [(0, 0), (W.shape[0] - 1, W.shape[1] - 1)]:
                Wp = [(w.copy(), bb.copy()) for w, bb in hidden]
                Wm = [(w.copy(), bb.copy()) for w, bb in hidden]
                Wp[layer][0][idx] += eps
                Wm[layer][0][idx] -= eps
                fd = (batch_loss(Wp, K, X, H) - batch_loss(Wm, K, X, H)) / (2 * eps)
                rel = abs(grads[layer][0][idx] - fd) / max(abs(fd), 1e-8)
                assert rel < 1e-5


class TestL2nw:
    def test_empty_buffer_predicts_zero(self):
        est = L2nwEstimator(capacity=8, n_in=5, n_out=4, bandwidth=1.0)
        assert np.array_equal(l2nw_predict(est, np.zeros(4), np.zeros(1)),
                              np.zeros(4))

    def test_two_point_hand_computation(self):
        est = L2nwEstimator(capacity=4, n_in=2, n_out=1, bandwidth=1.0,
                            lam=0.5)
        est.push(np.array([0.0, 0.0]), np.array([1.0]))
        est.push(np.array([1.0, 0.0]), np.array([3.0]))
        q = np.array([0.0, 0.0])
        k = np.array([1.0, np.exp(-0.5)])
        expected = (k @ np.array([1.0, 3.0])) / (0.5 + k.sum())
        got = l2nw_predict(est, q[:1], q[1:])
        assert got[0] == pytest.approx(expected, abs=1e-12)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        est = L2nwEstimator(capacity=32, n_in=3, n_out=2, bandwidth=0.8)
        for _ in range(20):
            est.push(rng.normal(size=3), rng.normal(size=2))
        eps = 1e-6
        x = rng.normal(size=2)
        u = rng.normal(size=1)
        Jx, Ju = l2nw_jacobian(est, x, u)
        for j in range(2):
            dx = np.zeros(2)
            dx[j] = eps
            fd = (l2nw_predict(est, x + dx, u) - l2nw_predict(est, x - dx, u)) / (2 * eps)
            assert np.allclose(Jx[:, j], fd, atol=1e-7)
        fd = (l2nw_predict(est, x, u + eps) - l2nw_predict(est, x, u - eps)) / (2 * eps)
        assert np.allclose(Ju[:, 0], fd, atol=1e-7)

    def test_ring_overwrite(self):
        est = L2nwEstimator(capacity=2, n_in=1, n_out=1, bandwidth=1.0)
        for v in (1.0, 2.0, 3.0):
            est.push(np.array([v]), np.array([v]))
        assert est.count == 2
        assert 1.0 not in est.X[est.valid]
