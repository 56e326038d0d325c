import numpy as np
import pytest

from kdep import nn
from kdep.container import decode, encode
from kdep.distill import kdep_loss, logits_kd_loss
from kdep.errors import ShapeError, SpecError


def squared_loss(target):
    def fn(features, logits):
        loss, g = kdep_loss(features, target)
        return loss, g, None
    return fn


def kd_loss(teacher_logits, tau=4.0):
    def fn(features, logits):
        loss, g = logits_kd_loss(logits, teacher_logits, tau)
        return loss, None, g
    return fn


def naive_conv3x3(x, w, b):
    bsz, h, wd, _ = x.shape
    out = np.zeros((bsz, h, wd, w.shape[3]))
    for n in range(bsz):
        for i in range(h):
            for j in range(wd):
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < h and 0 <= jj < wd:
                            out[n, i, j] += x[n, ii, jj] @ w[di, dj]
    return out + b


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestSpecAndInit:
    def test_same_seed_bit_identical(self):
        a, b = nn.init_network([nn.dense(4, 4)], 7), nn.init_network([nn.dense(4, 4)], 7)
        assert a.params.tobytes() == b.params.tobytes()

    def test_biases_zero(self):
        net = nn.init_network(nn.conv_spec(3, 8, classes=5), 1)
        for views in net.layer_params():
            if views:
                assert np.all(views[1] == 0.0)

    def test_he_variance(self):
        net = nn.init_network([nn.dense(4, 25_000)], 3)
        w = net.layer_params()[0][0]
        assert w.size == 100_000
        assert abs(np.mean(w ** 2) / 0.5 - 1.0) < 0.05

    @pytest.mark.parametrize("spec", [
        [],
        [nn.relu()],
        [nn.dense(4, 3), nn.dense(2, 2)],
        [nn.linear_head(3, 2), nn.dense(2, 2)],
        [nn.dense(3, 2), nn.gap()],
        [nn.conv3x3(3, 4), nn.relu()],
        [nn.dense(0, 2)],
    ])
    def test_invalid_specs(self, spec):
        with pytest.raises(SpecError):
            nn.init_network(spec, 0)

    def test_tap_is_before_last_relu(self):
        net = nn.init_network(nn.mlp_spec(8, 6, 4, classes=3), 0)
        assert net.tap == 2 and net.feature_dim == 4
        conv = nn.init_network(nn.conv_spec(2, 5), 0)
        assert conv.spec[conv.tap].kind == nn.DENSE and conv.feature_dim == 5

    def test_sections_round_trip(self):
        net = nn.init_network(nn.mlp_spec(3, 4, 2, classes=2), 2**64 - 1)
        back = nn.Network.from_sections(decode(encode(net.to_sections())))
        assert back.digest() == net.digest() and back.rng_seed == 2**64 - 1


class TestForward:
    def test_identity_dense(self):
        net = nn.Network([nn.dense(2, 2)], np.array([1.0, 0, 0, 1, 0, 0]))
        feats, logits, _ = nn.forward(net, [[3.0, -1.0]])
        np.testing.assert_array_equal(feats, [[3.0, -1.0]])
        assert logits is None

    def test_pre_relu_tap(self):
        net = nn.Network([nn.dense(2, 2), nn.relu()], np.array([1.0, 0, 0, 1, 0, 0]))
        feats, _, _ = nn.forward(net, [[-1.0, 2.0]])
        np.testing.assert_array_equal(feats, [[-1.0, 2.0]])
        np.testing.assert_array_equal(nn.downstream_features(net, [[-1.0, 2.0]]), [[0.0, 2.0]])

    def test_gap(self):
        net = nn.Network([nn.conv3x3(1, 1), nn.gap()], np.array([0, 0, 0, 0, 1.0, 0, 0, 0, 0, 0]))
        feats, _, _ = nn.forward(net, np.array([[[[1.0], [2.0]], [[3.0], [6.0]]]]))
        np.testing.assert_array_equal(feats, [[3.0]])

    def test_conv_matches_naive_loop(self, rng):
        net = nn.init_network([nn.conv3x3(3, 4), nn.gap()], 5)
        net.params[-4:] = rng.normal(size=4)
        x = rng.normal(size=(2, 5, 4, 3))
        w, b = net.layer_params()[0]
        feats, _, _ = nn.forward(net, x)
        np.testing.assert_allclose(feats, naive_conv3x3(x, w, b).mean(axis=(1, 2)), atol=1e-12)

    def test_deterministic(self, rng):
        net = nn.init_network(nn.mlp_spec(5, 7, 3, classes=4), 1)
        x = rng.normal(size=(9, 5))
        a, b = nn.forward(net, x), nn.forward(net, x)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    def test_shape_errors(self):
        net = nn.init_network(nn.mlp_spec(5, 7, 3), 1)
        with pytest.raises(ShapeError):
            nn.forward(net, np.ones((2, 4)))
        _, _, cache = nn.forward(net, np.ones((2, 5)))
        with pytest.raises(ShapeError):
            nn.backward(net, cache, feature_grad=np.ones((2, 4)))
        with pytest.raises(ShapeError):
            nn.backward(net, cache, logit_grad=np.ones((2, 3)))


class TestBackward:
    def test_zero_grads(self, rng):
        net = nn.init_network(nn.mlp_spec(4, 5, 3, classes=2), 0)
        _, _, cache = nn.forward(net, rng.normal(size=(3, 4)))
        g = nn.backward(net, cache, np.zeros((3, 3)), np.zeros((3, 2)))
        assert np.all(g == 0.0)

    def test_input_grad(self, rng):
        net = nn.init_network([nn.dense(3, 2)], 0)
        x = rng.normal(size=(1, 3))
        _, _, cache = nn.forward(net, x)
        _, dx = nn.backward(net, cache, np.ones((1, 2)), return_input_grad=True)
        np.testing.assert_allclose(dx, net.layer_params()[0][0].sum(axis=1)[None], atol=1e-15)


class TestGradCheck:
    def test_linear_quadratic_is_exact(self, rng):
        net = nn.init_network([nn.dense(3, 2)], 0)
        rep = nn.grad_check(net, squared_loss(rng.normal(size=(4, 2))), rng.normal(size=(4, 3)), tol=1e-10)
        assert rep.passed, str(rep)

    @pytest.mark.parametrize("spec, shape", [
        ([nn.dense(4, 6), nn.relu(), nn.dense(6, 3)], (5, 4)),
        ([nn.conv3x3(2, 3), nn.relu(), nn.conv3x3(3, 2), nn.gap(), nn.dense(2, 3)], (2, 4, 4, 2)),
    ])
    def test_feature_loss(self, rng, spec, shape):
        net = nn.init_network(spec, 1)
        net.params += 0.01 * rng.normal(size=net.params.shape)
        rep = nn.grad_check(net, squared_loss(rng.normal(size=(shape[0], 3))), rng.normal(size=shape))
        assert rep.passed, str(rep)

    def test_logits_loss_through_head(self, rng):
        net = nn.init_network(nn.mlp_spec(4, 6, 3, classes=5), 2)
        net.params += 0.01 * rng.normal(size=net.params.shape)
        rep = nn.grad_check(net, kd_loss(rng.normal(size=(6, 5)), tau=2.0), rng.normal(size=(6, 4)))
        assert rep.passed, str(rep)

    def test_impossible_tolerance_locates_parameter(self, rng):
        net = nn.init_network(nn.mlp_spec(3, 4, 2), 0)
        rep = nn.grad_check(net, squared_loss(rng.normal(size=(3, 2))), rng.normal(size=(3, 3)), tol=0.0)
        assert not rep.passed
        assert 0 <= rep.worst_index < rep.n_params and rep.worst_layer in (0, 2)
        assert "FAIL" in str(rep)

    def test_kink_inputs_are_nudged(self):
        net = nn.Network([nn.relu(), nn.dense(2, 1)], np.array([1.0, 1.0, 0.0]))
        rep = nn.grad_check(net, squared_loss(np.ones((1, 1))), np.zeros((1, 2)))
        assert rep.nudged == 2 and rep.passed

    def test_params_restored(self, rng):
        net = nn.init_network(nn.mlp_spec(3, 4, 2), 0)
        before = net.params.copy()
        nn.grad_check(net, squared_loss(np.zeros((2, 2))), rng.normal(size=(2, 3)))
        assert net.params.tobytes() == before.tobytes()


class TestParametricHeadGradients:
    @pytest.mark.parametrize("position", ["pre_relu", "post_relu"])
    @pytest.mark.parametrize("train", [True, False])
    def test_head_backward(self, rng, position, train):
        head = nn.ParametricHead(3, 4, position, seed=1)
        head.params += 0.1 * rng.normal(size=head.params.shape)
        head.running_mean, head.running_var = rng.normal(size=4), rng.uniform(0.5, 2, size=4)
        x, target = rng.normal(size=(6, 3)), rng.normal(size=(6, 4))
        saved = (head.running_mean.copy(), head.running_var.copy())

        def loss_of(params, inp):
            head.params[...] = params
            head.running_mean, head.running_var = saved[0].copy(), saved[1].copy()
            return kdep_loss(head.forward(inp, train)[0], target)[0]

        p0 = head.params.copy()
        head.running_mean, head.running_var = saved[0].copy(), saved[1].copy()
        y, cache = head.forward(x, train)
        grads, dx = head.backward(cache, kdep_loss(y, target)[1])
        h = 1e-6
        num_p = np.array([(loss_of(p0 + h * e, x) - loss_of(p0 - h * e, x)) / (2 * h) for e in np.eye(p0.size)])
        num_x = np.array([(loss_of(p0, x + h * e.reshape(x.shape)) - loss_of(p0, x - h * e.reshape(x.shape))) / (2 * h)
                          for e in np.eye(x.size)]).reshape(x.shape)
        np.testing.assert_allclose(grads, num_p, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(dx, num_x, rtol=1e-5, atol=1e-7)

    def test_running_stats_momentum(self):
        head = nn.ParametricHead(1, 1, seed=0)
        head.views()[0][...] = 1.0
        head.forward(np.array([[1.0], [3.0]]), train=True)
        np.testing.assert_allclose(head.running_mean, [0.2])
        np.testing.assert_allclose(head.running_var, [0.9 + 0.1 * 1.0])

    def test_decay_mask_excludes_bn_affine(self):
        head = nn.ParametricHead(2, 3)
        w, b, s, t = head.views(head.decay_mask())
        assert np.all(w == 1) and np.all(b == 1) and np.all(s == 0) and np.all(t == 0)

    def test_bad_position(self):
        with pytest.raises(SpecError):
            nn.ParametricHead(2, 3, position="mid")
