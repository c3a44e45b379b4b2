import json

import numpy as np
import pytest

from gaitforge import nets


def rel_err(a, b, eps=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(eps, np.maximum(np.abs(a), np.abs(b)))
    return np.max(np.abs(a - b) / denom)


def finite_diff_grads(params, x, loss_fn, h=1e-5):
    """Central finite differences of loss_fn(mlp output) wrt every parameter."""
    gw = [np.zeros_like(w) for w in params.weights]
    gb = [np.zeros_like(b) for b in params.biases]
    for arr, out in list(zip(params.weights, gw)) + list(zip(params.biases, gb)):
        flat = arr.ravel()
        oflat = out.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            yp, _ = nets.mlp_forward(params, x)
            flat[i] = orig - h
            ym, _ = nets.mlp_forward(params, x)
            flat[i] = orig
            oflat[i] = (loss_fn(yp) - loss_fn(ym)) / (2 * h)
    return gw, gb


class TestInit:
    def test_seed_determinism(self):
        a = nets.mlp_init((4, 8, 2), seed=7)
        b = nets.mlp_init((4, 8, 2), seed=7)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_seeds_differ(self):
        a = nets.mlp_init((4, 8, 2), seed=7)
        b = nets.mlp_init((4, 8, 2), seed=8)
        assert not np.array_equal(a.weights[0], b.weights[0])

    def test_zero_biases_and_scale(self):
        p = nets.mlp_init((64, 64, 64, 4), seed=0)
        for b in p.biases:
            assert np.all(b == 0.0)
        # std of each weight matrix should be near 1/sqrt(fan_in)
        for w, fan_in in zip(p.weights, (64, 64, 64)):
            assert abs(w.std() - 1 / np.sqrt(fan_in)) < 0.2 / np.sqrt(fan_in) + 0.05

    def test_policy_head_log_std(self):
        p = nets.mlp_init((4, 8, 3), seed=0, policy_head=True)
        assert p.log_std.shape == (3,)
        assert np.all(p.log_std == nets.LOG_STD_INIT)
        assert nets.mlp_init((4, 8, 3), seed=0).log_std is None


class TestForward:
    def test_linear_single_layer_exact(self):
        p = nets.mlp_init((3, 2), seed=0)
        p.weights[0][...] = [[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]]
        p.biases[0][...] = [0.5, -0.5]
        y, _ = nets.mlp_forward(p, np.array([1.0, 2.0, 3.0]))
        assert np.allclose(y, [1 + 6 + 0.5, 2 - 3 - 0.5], atol=1e-15)

    def test_hidden_tanh(self):
        p = nets.mlp_init((1, 1, 1), seed=0)
        p.weights[0][...] = [[2.0]]
        p.weights[1][...] = [[1.0]]
        y, _ = nets.mlp_forward(p, np.array([0.3]))
        assert abs(y[0] - np.tanh(0.6)) < 1e-15

    def test_batch_matches_loop(self):
        p = nets.mlp_init((5, 16, 3), seed=3)
        rng = np.random.default_rng(0)
        X = rng.standard_normal((11, 5))
        Y, _ = nets.mlp_forward(p, X)
        for i in range(len(X)):
            yi, _ = nets.mlp_forward(p, X[i])
            assert np.allclose(yi, Y[i], atol=1e-13, rtol=0)

    def test_finite_on_large_inputs(self):
        p = nets.mlp_init((4, 32, 32, 2), seed=1)
        y, _ = nets.mlp_forward(p, np.full(4, 1e6))
        assert np.all(np.isfinite(y))

    def test_width_mismatch_raises(self):
        p = nets.mlp_init((4, 8, 2), seed=0)
        with pytest.raises(ValueError):
            nets.mlp_forward(p, np.zeros(5))


class TestBackprop:
    def test_zero_grad_out(self):
        p = nets.mlp_init((4, 8, 2), seed=2)
        y, cache = nets.mlp_forward(p, np.ones(4))
        g = nets.mlp_backprop(p, cache, np.zeros_like(y))
        for arr in g.weights + g.biases:
            assert np.all(arr == 0.0)

    def test_finite_difference_oracle(self):
        # ten random small nets, random input, loss = 0.5 * sum(y^2)
        rng = np.random.default_rng(42)
        for k in range(10):
            sizes = (int(rng.integers(2, 6)), int(rng.integers(3, 9)), int(rng.integers(1, 4)))
            p = nets.mlp_init(sizes, seed=int(rng.integers(1 << 30)))
            x = rng.standard_normal(sizes[0])
            y, cache = nets.mlp_forward(p, x)
            g = nets.mlp_backprop(p, cache, y)  # dL/dy = y for L = 0.5*sum(y^2)
            fw, fb = finite_diff_grads(p, x, lambda out: 0.5 * np.sum(out**2))
            for ga, gn in zip(g.weights + g.biases, fw + fb):
                assert rel_err(ga, gn) < 1e-4

    def test_batch_grads_sum_rows(self):
        p = nets.mlp_init((3, 6, 2), seed=9)
        rng = np.random.default_rng(1)
        X = rng.standard_normal((4, 3))
        G = rng.standard_normal((4, 2))
        _, cache = nets.mlp_forward(p, X)
        batch = nets.mlp_backprop(p, cache, G)
        acc = [np.zeros_like(w) for w in p.weights]
        for i in range(4):
            _, ci = nets.mlp_forward(p, X[i])
            gi = nets.mlp_backprop(p, ci, G[i])
            for a, g in zip(acc, gi.weights):
                a += g
        for a, b in zip(acc, batch.weights):
            assert np.allclose(a, b, atol=1e-12)

    def test_linearity(self):
        p = nets.mlp_init((3, 5, 2), seed=4)
        x = np.array([0.1, -0.2, 0.4])
        _, cache = nets.mlp_forward(p, x)
        g1 = np.array([1.0, -2.0])
        g2 = np.array([0.3, 0.7])
        a = nets.mlp_backprop(p, cache, g1)
        b = nets.mlp_backprop(p, cache, g2)
        _, cache2 = nets.mlp_forward(p, x)
        c = nets.mlp_backprop(p, cache2, g1 + g2)
        for wa, wb, wc in zip(a.weights, b.weights, c.weights):
            assert np.allclose(wa + wb, wc, atol=1e-12)

    def test_mismatched_cache_raises(self):
        p = nets.mlp_init((4, 8, 2), seed=0)
        q = nets.mlp_init((4, 6, 2), seed=0)
        _, cache = nets.mlp_forward(q, np.zeros(4))
        with pytest.raises(ValueError):
            nets.mlp_backprop(p, cache, np.zeros(2))


class TestAdam:
    def test_zero_grad_is_noop(self):
        p = nets.mlp_init((3, 4, 2), seed=5)
        st = nets.adam_init(p)
        before = [w.copy() for w in p.weights]
        g = nets.NetGrads([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases])
        nets.adam_step(p, g, st, lr=1e-3)
        for w0, w1 in zip(before, p.weights):
            assert np.array_equal(w0, w1)

    def test_first_step_is_signed_lr(self):
        p = nets.mlp_init((2, 3), seed=0)
        st = nets.adam_init(p)
        before = p.weights[0].copy()
        g = nets.NetGrads([np.full_like(p.weights[0], 2.5)], [np.zeros(3)])
        nets.adam_step(p, g, st, lr=1e-3)
        delta = p.weights[0] - before
        assert np.allclose(delta, -1e-3, atol=1e-8)

    def test_determinism(self):
        runs = []
        for _ in range(2):
            p = nets.mlp_init((3, 4, 1), seed=11)
            st = nets.adam_init(p)
            rng = np.random.default_rng(0)
            for _ in range(20):
                x = rng.standard_normal(3)
                y, cache = nets.mlp_forward(p, x)
                nets.adam_step(p, nets.mlp_backprop(p, cache, y), st, lr=1e-2)
            runs.append([w.copy() for w in p.weights])
        for a, b in zip(*runs):
            assert np.array_equal(a, b)

    def test_log_std_stays_bounded(self):
        p = nets.mlp_init((2, 2), seed=0, policy_head=True)
        st = nets.adam_init(p)
        zero = nets.NetGrads([np.zeros_like(p.weights[0])], [np.zeros(2)], np.full(2, -1.0))
        for _ in range(5000):
            nets.adam_step(p, zero, st, lr=0.5)
        assert np.all(p.log_std <= nets.LOG_STD_MAX + 1e-12)
        zero.log_std[...] = 1.0
        for _ in range(10000):
            nets.adam_step(p, zero, st, lr=0.5)
        assert np.all(p.log_std >= nets.LOG_STD_MIN - 1e-12)


class TestPolicyHead:
    def test_mean_bounded(self):
        p = nets.mlp_init((4, 16, 3), seed=1, policy_head=True)
        rng = np.random.default_rng(0)
        for _ in range(200):
            m = nets.policy_mean(p, rng.standard_normal(4) * 100)
            assert np.all(np.abs(m) < 1.0)

    def test_sample_rng_determinism(self):
        p = nets.mlp_init((4, 8, 2), seed=1, policy_head=True)
        obs = np.array([0.1, 0.2, 0.3, 0.4])
        a1, r1, l1 = nets.policy_sample(p, obs, np.random.default_rng(9))
        a2, r2, l2 = nets.policy_sample(p, obs, np.random.default_rng(9))
        assert np.array_equal(a1, a2) and np.array_equal(r1, r2) and l1 == l2

    def test_vanishing_noise_at_floor(self):
        p = nets.mlp_init((4, 8, 2), seed=1, policy_head=True)
        p.log_std[...] = nets.LOG_STD_MIN
        obs = np.array([0.5, -0.5, 1.0, 0.0])
        mean = nets.policy_mean(p, obs)
        action, _, _ = nets.policy_sample(p, obs, np.random.default_rng(7))
        assert np.max(np.abs(action - mean)) < 1e-2

    def test_sample_mean_monte_carlo(self):
        p = nets.mlp_init((3, 8, 2), seed=6, policy_head=True)
        obs = np.array([0.2, -0.1, 0.3])
        mean = nets.policy_mean(p, obs)
        rng = np.random.default_rng(0)
        n = 10_000
        raws = np.array([nets.policy_sample(p, obs, rng)[1] for _ in range(n)])
        se = np.exp(p.log_std) / np.sqrt(n)
        assert np.all(np.abs(raws.mean(axis=0) - mean) < 3 * se)

    def test_logprob_at_mode(self):
        p = nets.mlp_init((3, 8, 4), seed=2, policy_head=True)
        obs = np.array([0.1, 0.2, 0.3])
        mean = nets.policy_mean(p, obs)
        lp = nets.policy_logprob(p, obs, mean)
        expect = -np.sum(p.log_std) - 2.0 * np.log(2 * np.pi)
        assert abs(lp - expect) < 1e-12

    def test_logprob_matches_sample(self):
        p = nets.mlp_init((5, 8, 3), seed=3, policy_head=True)
        rng = np.random.default_rng(1)
        for _ in range(50):
            obs = rng.standard_normal(5)
            _, raw, lp = nets.policy_sample(p, obs, rng)
            assert abs(nets.policy_logprob(p, obs, raw) - lp) < 1e-12

    def test_doubling_std_drops_mode_logprob(self):
        p = nets.mlp_init((3, 8, 4), seed=2, policy_head=True)
        obs = np.array([0.4, 0.0, -0.2])
        mean = nets.policy_mean(p, obs)
        lp1 = nets.policy_logprob(p, obs, mean)
        p.log_std += np.log(2.0)
        lp2 = nets.policy_logprob(p, obs, mean)
        assert abs((lp1 - lp2) - 4 * np.log(2.0)) < 1e-12

    def test_logprob_batch(self):
        p = nets.mlp_init((3, 8, 2), seed=4, policy_head=True)
        rng = np.random.default_rng(2)
        obs = rng.standard_normal((7, 3))
        raw = rng.standard_normal((7, 2))
        batch = nets.policy_logprob(p, obs, raw)
        for i in range(7):
            assert abs(batch[i] - nets.policy_logprob(p, obs[i], raw[i])) < 1e-12


class TestSerialization:
    def test_round_trip_bit_exact(self):
        p = nets.mlp_init((5, 16, 16, 3), seed=8, policy_head=True)
        st = nets.adam_init(p)
        # push the state off zero
        rng = np.random.default_rng(0)
        for _ in range(3):
            x = rng.standard_normal(5)
            y, cache = nets.mlp_forward(p, x)
            g = nets.mlp_backprop(p, cache, y)
            g.log_std = rng.standard_normal(3)
            nets.adam_step(p, g, st, lr=1e-3)
        doc = json.loads(json.dumps(nets.save_net(p, st)))
        q, st2 = nets.load_net(doc)
        assert q.layer_sizes == p.layer_sizes
        for a, b in zip(p.weights + p.biases, q.weights + q.biases):
            assert np.array_equal(a, b)
        assert np.array_equal(p.log_std, q.log_std)
        assert st2.step == st.step
        for a, b in zip(st.m_w + st.v_w, st2.m_w + st2.v_w):
            assert np.array_equal(a, b)

    def test_version_mismatch_raises(self):
        doc = nets.save_net(nets.mlp_init((2, 2), seed=0))
        doc["version"] = 99
        with pytest.raises(ValueError):
            nets.load_net(doc)


class TestNoGlobalState:
    def test_interleaved_nets_independent(self):
        p1 = nets.mlp_init((3, 4, 1), seed=1)
        p2 = nets.mlp_init((3, 4, 1), seed=2)
        x = np.array([0.1, 0.2, 0.3])
        seq1, _ = nets.mlp_forward(p1, x)
        seq2, _ = nets.mlp_forward(p2, x)
        inter1, _ = nets.mlp_forward(p1, x)
        inter2, _ = nets.mlp_forward(p2, x)
        assert np.array_equal(seq1, inter1) and np.array_equal(seq2, inter2)
