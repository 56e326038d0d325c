import numpy as np
import pytest

from kdep import align as al
from kdep.container import decode, encode
from kdep.errors import DimensionError, KindError
from kdep.nn import ParametricHead


@pytest.fixture
def low_rank_feats():
    def make(seed, n=200, d=16, rank=4):
        rng = np.random.default_rng(seed)
        base = rng.normal(size=(n, rank)) @ rng.normal(size=(rank, d)) * rng.uniform(0.2, 3.0, size=d)
        return base + 0.1 * rng.normal(size=(n, d)) + rng.normal(size=d)
    return make


class TestSvdProjector:
    def test_example(self):
        x = np.array([[1.0, 1], [3, 1], [5, 1]])
        art = al.fit_svd_projector(x, 1)
        np.testing.assert_allclose(art.mean, [3.0, 1.0])
        # centred Gram is diag(8, 0): top eigenvector e1, so projections are the centred first column
        centred = x - x.mean(axis=0)
        gram = centred.T @ centred
        assert gram[0, 1] == 0 and gram[1, 1] == 0 and gram[0, 0] == 8
        np.testing.assert_allclose(al.apply_alignment(art, x)[:, 0], [-2.0, 0.0, 2.0], atol=1e-14)
        np.testing.assert_allclose(al.apply_alignment(art, [[3.0, 1.0]]), [[0.0]], atol=1e-14)

    def test_orthonormal_columns_are_isometric(self):
        q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(30, 5)))
        x = q - q.mean(axis=0)
        out = al.apply_alignment(al.fit_svd_projector(x, 5), x)
        d_in = np.linalg.norm(x[:, None] - x[None], axis=2)
        d_out = np.linalg.norm(out[:, None] - out[None], axis=2)
        np.testing.assert_allclose(d_out, d_in, atol=1e-12)

    def test_constant_features(self):
        x = np.full((10, 4), 2.5)
        art = al.fit_svd_projector(x, 2)
        np.testing.assert_array_equal(art.factors.singular_values, [0.0, 0.0])
        np.testing.assert_array_equal(al.apply_alignment(art, x), np.zeros((10, 2)))

    def test_zero_mean_channels(self, low_rank_feats):
        x = low_rank_feats(0)
        out = al.apply_alignment(al.fit_svd_projector(x, 6), x)
        assert np.max(np.abs(out.mean(axis=0))) < 1e-10

    def test_affine(self, low_rank_feats):
        x = low_rank_feats(1)
        art = al.fit_svd_projector(x, 4)
        a, b = 0.7, -1.3
        r, s, zero = x[:1], x[1:2], np.zeros((1, 16))
        f = lambda row: al.apply_alignment(art, row)
        np.testing.assert_allclose(f(a * r + b * s), a * f(r) + b * f(s) - (a + b - 1) * f(zero), atol=1e-10)

    def test_bit_identical_refit(self, low_rank_feats):
        x = low_rank_feats(2)
        assert encode(al.fit_svd_projector(x, 5).to_sections()) == encode(al.fit_svd_projector(x, 5).to_sections())

    @pytest.mark.parametrize("n, d_s", [(10, 5), (3, 2)])
    def test_width_errors(self, n, d_s):
        with pytest.raises(DimensionError):
            al.fit_svd_projector(np.ones((n, 4)), 5 if n == 10 else 4)


class TestChannelSelect:
    def test_var_example(self):
        x = np.array([[0.0, 0.0, 0.0]]) + np.array([[-1.0], [1.0]]) * np.sqrt([0.5, 3.0, 1.0])
        art = al.fit_channel_select(x, 2, "var")
        assert art.indices.tolist() == [1, 2]
        np.testing.assert_array_equal(al.apply_alignment(art, [[9.0, 8.0, 7.0]]), [[8.0, 7.0]])

    def test_var_tie_goes_low(self):
        x = np.array([[-1.0], [1.0]]) * np.sqrt([2.0, 2.0, 1.0])
        assert al.fit_channel_select(x, 2, "var").indices.tolist() == [0, 1]

    def test_rand_exhaustive(self):
        x = np.random.default_rng(0).normal(size=(5, 8))
        for seed in (0, 17, 2**40):
            assert al.fit_channel_select(x, 8, "rand", seed).indices.tolist() == list(range(8))

    def test_rand_deterministic_and_sorted(self):
        x = np.random.default_rng(0).normal(size=(5, 32))
        a = al.fit_channel_select(x, 6, "rand", 9).indices
        assert a.tolist() == al.fit_channel_select(x, 6, "rand", 9).indices.tolist()
        assert np.all(np.diff(a) > 0) and a.min() >= 0 and a.max() < 32

    def test_bad_mode(self):
        with pytest.raises(KindError):
            al.fit_channel_select(np.ones((3, 3)), 1, "max")


class TestInterpolation:
    def test_example(self):
        row = np.array([[10.0, 20.0, 30.0, 40.0]])
        np.testing.assert_array_equal(al.apply_alignment(al.make_interpolation(4, 2), row), [[20.0, 40.0]])

    def test_indices_formula(self):
        for dt, ds in [(64, 16), (10, 3), (7, 7)]:
            expected = [int(np.floor((j + 0.5) * dt / ds)) for j in range(ds)]
            assert al.interpolation_indices(dt, ds).tolist() == expected

    def test_wrong_width(self):
        with pytest.raises(DimensionError):
            al.apply_alignment(al.make_interpolation(4, 2), np.ones((1, 5)))


class TestReconstructionOrdering:
    def test_svd_le_var_le_mean_rand(self, low_rank_feats):
        for seed in range(5):
            x = low_rank_feats(seed)
            for k in (2, 6):
                e_svd = al.reconstruction_error(al.fit_svd_projector(x, k), x)
                e_var = al.reconstruction_error(al.fit_channel_select(x, k, "var"), x)
                e_rand = np.mean([al.reconstruction_error(al.fit_channel_select(x, k, "rand", s), x)
                                  for s in range(20)])
                assert e_svd <= e_var + 1e-12
                assert e_var <= e_rand + 1e-12


class TestParametricHead:
    def test_shapes(self):
        art = al.make_parametric_head(16, 64)
        assert art.kind == al.PARAMETRIC
        assert art.head.shapes == {"weight": (16, 64), "bias": (64,), "scale": (64,), "shift": (64,)}

    def test_identity_head(self):
        head = ParametricHead(3, 3, bn_eps=0.0)
        w, b, scale, shift = head.views()
        w[...] = np.eye(3)
        x = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]])
        y, _ = head.forward(x, train=False)
        np.testing.assert_array_equal(y, x)

    def test_identity_head_default_eps(self):
        head = ParametricHead(2, 2)
        head.views()[0][...] = np.eye(2)
        x = np.array([[1.0, -2.0]])
        np.testing.assert_allclose(head.forward(x, train=False)[0], x, rtol=1e-5)

    def test_post_relu_sees_rectified_input(self):
        pre, post = ParametricHead(2, 2, "pre_relu"), ParametricHead(2, 2, "post_relu")
        x = np.array([[-1.0, 2.0]])
        _, (_, inp_pre, *_) = pre.forward(x, train=False)
        _, (_, inp_post, *_) = post.forward(x, train=False)
        np.testing.assert_array_equal(inp_pre, [[-1.0, 2.0]])
        np.testing.assert_array_equal(inp_post, [[0.0, 2.0]])

    def test_not_applicable_as_fixed_aligner(self):
        art = al.make_parametric_head(2, 4)
        with pytest.raises(KindError):
            al.apply_alignment(art, np.ones((1, 4)))
        with pytest.raises(KindError):
            art.to_sections()


class TestSerialization:
    @pytest.mark.parametrize("kind", [al.SVD, al.CS_VAR, al.CS_RAND, al.INTERP])
    def test_round_trip(self, kind, low_rank_feats):
        x = low_rank_feats(4)
        art = al.fit_alignment(kind, x, 5, seed=2**63 + 11)
        back = al.AlignmentArtifact.from_sections(decode(encode(art.to_sections())))
        np.testing.assert_array_equal(al.apply_alignment(back, x), al.apply_alignment(art, x))
        assert encode(back.to_sections()) == encode(art.to_sections())

    def test_unknown_kind(self):
        with pytest.raises(KindError):
            al.fit_alignment("pca", np.ones((3, 3)), 1)
