"""MLPs, Gaussian heads, NLL gradients, and Adam."""

import numpy as np
import pytest
from scipy import stats

from romilab.nets import (Adam, GaussianHead, LOG_SIGMA_BOUNDS, Mlp,
                          flat_grads, flat_params, gaussian_nll,
                          gaussian_nll_grads, gaussian_nll_loss, load_mlp,
                          save_mlp, set_flat_params)

from helpers import analytic_flat_grad, fd_flat_grad, max_rel_err


def linear_net(W, b=None):
    d_in, d_out = W.shape
    net = Mlp([d_in, d_out], activations=["linear"])
    net.W[0][:] = W
    net.b[0][:] = 0.0 if b is None else b
    return net


class TestMlpForward:
    def test_zero_weights_give_zero_output(self):
        net = linear_net(np.zeros((3, 2)))
        assert np.array_equal(net.forward(np.ones((4, 3))), np.zeros((4, 2)))

    def test_identity_linear_layer(self):
        net = linear_net(np.eye(3))
        x = np.random.default_rng(0).normal(size=(5, 3))
        assert np.allclose(net.forward(x), x)

    def test_one_two_one_relu_hand_value(self):
        net = Mlp([1, 2, 1], activations=["relu", "linear"])
        net.W[0][:] = [[1.0, -1.0]]
        net.b[0][:] = [0.0, 0.5]
        net.W[1][:] = [[1.0], [2.0]]
        net.b[1][:] = [0.25]
        # x=1: hidden relu([1, -0.5]) = [1, 0]; out = 1 + 0.25
        assert net.forward([[1.0]])[0, 0] == pytest.approx(1.25)
        # x=-1: hidden relu([-1, 1.5]) = [0, 1.5]; out = 3 + 0.25
        assert net.forward([[-1.0]])[0, 0] == pytest.approx(3.25)

    def test_backward_before_forward_raises(self):
        net = Mlp([2, 2])
        with pytest.raises(RuntimeError, match="before forward"):
            net.backward(np.zeros((1, 2)))

    def test_activation_validation(self):
        with pytest.raises(ValueError, match="one activation per layer"):
            Mlp([2, 2, 2], activations=["relu"])
        net = Mlp([2, 2], activations=["tanh"])
        with pytest.raises(ValueError, match="unknown activation"):
            net.forward(np.zeros((1, 2)))

    def test_init_scale_tracks_fan_in(self):
        net = Mlp([100, 50], rng=np.random.default_rng(1))
        assert np.std(net.W[0]) == pytest.approx(0.1, rel=0.1)
        assert np.all(net.b[0] == 0.0)


class TestBackprop:
    def test_linear_squared_loss_gradient_closed_form(self):
        rng = np.random.default_rng(2)
        W = rng.normal(size=(3, 2))
        net = linear_net(W)
        x = rng.normal(size=(1, 3))
        y = rng.normal(size=(1, 2))
        out = net.forward(x)
        net.backward(2.0 * (out - y))
        assert np.allclose(net.gW[0], 2.0 * x.T @ (x @ W - y))
        assert np.allclose(net.gb[0], 2.0 * (x @ W - y)[0])

    def test_grads_accumulate_until_zeroed(self):
        net = linear_net(np.ones((2, 1)))
        x = np.ones((1, 2))
        net.forward(x)
        net.backward(np.ones((1, 1)))
        once = net.gW[0].copy()
        net.forward(x)
        net.backward(np.ones((1, 1)))
        assert np.allclose(net.gW[0], 2.0 * once)
        net.zero_grads()
        assert np.all(net.gW[0] == 0.0)

    @pytest.mark.parametrize("hidden_act", ["relu", "swish"])
    def test_nll_loss_gradient_matches_finite_differences(self, hidden_act):
        rng = np.random.default_rng(3)
        net = Mlp([3, 8, 4], activations=[hidden_act, "linear"], rng=rng)
        x = rng.normal(size=(6, 3))
        y = rng.normal(size=(6, 2))
        loss = lambda: gaussian_nll_loss(net, x, y)
        err = max_rel_err(analytic_flat_grad([net], loss),
                          fd_flat_grad([net], loss))
        assert err < 1e-4, err


class TestFlatVectors:
    def test_round_trip_and_length_check(self):
        rng = np.random.default_rng(4)
        nets = [Mlp([2, 3], rng=rng), Mlp([3, 2, 1], rng=rng)]
        vec = flat_params(nets)
        set_flat_params(nets, vec * 2.0)
        assert np.allclose(flat_params(nets), vec * 2.0)
        with pytest.raises(ValueError, match="length mismatch"):
            set_flat_params(nets, np.append(vec, 0.0))
        with pytest.raises(ValueError):
            set_flat_params(nets, vec[:-1])

    def test_flat_grads_order_matches_params(self):
        net = linear_net(np.ones((2, 2)))
        net.forward(np.ones((1, 2)))
        net.backward(np.ones((1, 2)))
        g = flat_grads([net])
        assert g.shape == flat_params([net]).shape
        assert np.allclose(g[:4], 1.0)  # gW entries come first


class TestGaussianHead:
    def test_odd_width_rejected(self):
        with pytest.raises(ValueError, match="even output width"):
            GaussianHead(np.zeros((1, 3)))

    def test_nll_at_mean_unit_sigma(self):
        for d in (1, 2, 5):
            head = GaussianHead(np.zeros((1, 2 * d)))
            nll = gaussian_nll(head, np.zeros((1, d)))
            assert nll[0] == pytest.approx(d * 0.5 * np.log(2 * np.pi))

    def test_nll_off_by_one(self):
        head = GaussianHead(np.zeros((1, 2)))
        nll = gaussian_nll(head, np.array([[1.0]]))
        assert nll[0] == pytest.approx(0.5 + 0.5 * np.log(2 * np.pi))

    def test_nll_matches_scipy_product_density(self):
        rng = np.random.default_rng(5)
        raw = rng.normal(size=(4, 6))
        target = rng.normal(size=(4, 3))
        head = GaussianHead(raw)
        expect = -stats.norm.logpdf(target, loc=head.mu,
                                    scale=head.sigma).sum(axis=1)
        assert np.allclose(gaussian_nll(head, target), expect, atol=1e-10)

    def test_clipping_blocks_log_sigma_gradients(self):
        lo, hi = LOG_SIGMA_BOUNDS
        raw = np.array([[0.0, 0.0, lo - 1.0, hi + 1.0]])
        head = GaussianHead(raw)
        assert np.allclose(head.log_sigma, [lo, hi])
        g = head.raw_grad(np.zeros((1, 2)), np.ones((1, 2)))
        assert np.array_equal(g[0, 2:], [0.0, 0.0])
        inside = GaussianHead(np.zeros((1, 4)))
        g2 = inside.raw_grad(np.zeros((1, 2)), np.ones((1, 2)))
        assert np.array_equal(g2[0, 2:], [1.0, 1.0])

    def test_analytic_nll_grads_match_finite_differences(self):
        rng = np.random.default_rng(6)
        raw = rng.normal(size=(3, 4))
        target = rng.normal(size=(3, 2))
        d_mu, d_ls = gaussian_nll_grads(GaussianHead(raw), target)
        h = 1e-6
        for i in range(3):
            for j in range(2):
                for block, grad in ((0, d_mu), (2, d_ls)):
                    up, dn = raw.copy(), raw.copy()
                    up[i, block + j] += h
                    dn[i, block + j] -= h
                    fd = (gaussian_nll(GaussianHead(up), target)[i]
                          - gaussian_nll(GaussianHead(dn), target)[i]) / (2 * h)
                    assert grad[i, j] == pytest.approx(fd, abs=1e-6)

    def test_reparameterized_sample_statistics(self):
        mu, var = 0.02, 0.05
        raw = np.tile([mu, 0.5 * np.log(var)], (100_000, 1))
        head = GaussianHead(raw)
        sample, eps = head.sample(np.random.default_rng(7))
        assert sample.mean() == pytest.approx(mu, abs=3 * np.sqrt(var / 1e5))
        assert sample.var() == pytest.approx(var, rel=0.02)
        assert np.allclose(sample, head.mu + head.sigma * eps)

    def test_sample_with_fixed_eps_is_deterministic(self):
        head = GaussianHead(np.array([[1.0, 0.0]]))
        eps = np.array([[2.0]])
        s, _ = head.sample(None, eps=eps)
        assert s[0, 0] == pytest.approx(3.0)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = np.ones(3)
        opt = Adam([p], lr=0.1)
        opt.step([np.zeros(3)])
        assert np.array_equal(p, np.ones(3))

    def test_first_step_is_signed_lr(self):
        p = np.zeros(3)
        opt = Adam([p], lr=0.1)
        opt.step([np.array([5.0, -0.3, 4e-8])])
        # bias correction makes the first update -lr * sign(g) (up to eps)
        assert np.allclose(p[:2], [-0.1, 0.1], atol=1e-6)

    def test_converges_on_quadratic(self):
        p = np.array([5.0, -3.0])
        opt = Adam([p], lr=0.05)
        for _ in range(2000):
            opt.step([2.0 * p])
        assert np.allclose(p, 0.0, atol=1e-3)


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        net = Mlp([3, 5, 4], rng=rng)
        x = rng.normal(size=(2, 3))
        path = tmp_path / "net.bin"
        save_mlp(net, path, extra_header={"direction": "reverse"})
        back = load_mlp(path)
        assert back.layer_dims == net.layer_dims
        assert back.activations == net.activations
        assert np.allclose(back.forward(x), net.forward(x), atol=1e-6)

    def test_wrong_format_rejected(self, tmp_path):
        from romilab.blobio import write_blob
        path = tmp_path / "bad.bin"
        write_blob(path, {"format": "romilab-buffer-v1"}, [np.zeros(1)])
        with pytest.raises(ValueError, match="mlp checkpoint"):
            load_mlp(path)
