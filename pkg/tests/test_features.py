import numpy as np
import pytest

from foresight.errors import DataError, DimensionError, ParameterError
from foresight.features import (
    FeatureSequence,
    concat_layers,
    fit_pca,
    pca_decode,
    pca_encode,
)

from reference_impl import ref_pca_curve


def seq(rng, n=3, h=2, w=4, c=6, ids=None):
    return FeatureSequence(
        rng.standard_normal((n, h, w, c)), ids or tuple(range(n))
    )


class TestFeatureSequence:
    def test_basic_properties(self):
        f = seq(np.random.default_rng(0))
        assert f.n_frames == 3
        assert f.grid == (2, 4)
        assert f.channels == 6
        assert f.tokens().shape == (24, 6)

    def test_rejects_wrong_rank(self):
        with pytest.raises(DimensionError):
            FeatureSequence(np.zeros((2, 3, 4)), (0, 1))

    def test_rejects_frame_id_mismatch(self):
        with pytest.raises(DimensionError):
            FeatureSequence(np.zeros((2, 2, 2, 2)), (0, 1, 2))

    def test_rejects_non_increasing_ids(self):
        with pytest.raises(DataError):
            FeatureSequence(np.zeros((2, 2, 2, 2)), (3, 3))

    def test_rejects_nan(self):
        data = np.zeros((1, 2, 2, 2))
        data[0, 0, 0, 0] = np.nan
        with pytest.raises(DataError):
            FeatureSequence(data, (0,))


class TestConcatLayers:
    def test_concatenates_channels(self):
        rng = np.random.default_rng(1)
        a, b = seq(rng, c=4), seq(rng, c=3)
        out = concat_layers([a, b])
        assert out.channels == 7
        np.testing.assert_array_equal(out.data[..., :4], a.data)
        np.testing.assert_array_equal(out.data[..., 4:], b.data)
        assert out.meta["layer_channels"] == [4, 3]

    def test_rejects_grid_mismatch(self):
        rng = np.random.default_rng(2)
        with pytest.raises(DimensionError):
            concat_layers([seq(rng, h=2), seq(rng, h=3)])

    def test_rejects_frame_id_mismatch(self):
        rng = np.random.default_rng(3)
        with pytest.raises(DataError):
            concat_layers([seq(rng), seq(rng, ids=(1, 2, 3))])

    def test_rejects_empty(self):
        with pytest.raises(ParameterError):
            concat_layers([])


class TestPca:
    def test_full_rank_roundtrip(self):
        rng = np.random.default_rng(10)
        tokens = rng.standard_normal((200, 12))
        model = fit_pca(tokens, 12)
        f = FeatureSequence(tokens.reshape(10, 4, 5, 12), tuple(range(10)))
        recon = pca_decode(model, pca_encode(model, f))
        assert np.abs(recon.data - f.data).max() < 1e-5

    def test_reconstruction_mse_matches_eigenvalue_oracle(self):
        # low-rank-ish data so the curve actually bends
        rng = np.random.default_rng(11)
        basis = rng.standard_normal((5, 16))
        tokens = rng.standard_normal((300, 5)) @ basis
        tokens += 0.01 * rng.standard_normal(tokens.shape)
        dims = [1, 2, 4, 5, 8, 16]
        oracle = ref_pca_curve(tokens, dims)
        f = FeatureSequence(tokens.reshape(15, 4, 5, 16), tuple(range(15)))
        for d in dims:
            model = fit_pca(tokens, d)
            recon = pca_decode(model, pca_encode(model, f))
            mse = float(np.mean((recon.data - f.data) ** 2))
            assert abs(mse - oracle[d]) < 1e-6, f"dim {d}: {mse} vs {oracle[d]}"

    def test_variance_sorted_and_nonnegative(self):
        rng = np.random.default_rng(12)
        model = fit_pca(rng.standard_normal((100, 8)) * [5, 3, 2, 1, 1, 1, 0.5, 0.1], 8)
        ev = model.explained_variance
        assert np.all(ev >= 0)
        assert np.all(np.diff(ev) <= 0)

    def test_components_orthonormal(self):
        rng = np.random.default_rng(13)
        model = fit_pca(rng.standard_normal((120, 10)), 6)
        gram = model.components @ model.components.T
        assert np.abs(gram - np.eye(6)).max() < 1e-10

    def test_deterministic_bit_identical(self):
        rng = np.random.default_rng(14)
        tokens = rng.standard_normal((150, 9))
        a = fit_pca(tokens, 4)
        b = fit_pca(tokens.copy(), 4)
        assert np.array_equal(a.mean, b.mean)
        assert np.array_equal(a.components, b.components)
        assert np.array_equal(a.explained_variance, b.explained_variance)

    def test_sign_convention(self):
        rng = np.random.default_rng(15)
        model = fit_pca(rng.standard_normal((80, 7)), 7)
        for row in model.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_encode_then_decode_idempotent_on_codes(self):
        # encode(decode(codes)) == codes for any codes in the model's range
        rng = np.random.default_rng(16)
        tokens = rng.standard_normal((100, 8))
        model = fit_pca(tokens, 3)
        codes = FeatureSequence(rng.standard_normal((2, 5, 2, 3)), (0, 1))
        back = pca_encode(model, pca_decode(model, codes))
        assert np.abs(back.data - codes.data).max() < 1e-9

    def test_rejects_bad_dim(self):
        rng = np.random.default_rng(17)
        tokens = rng.standard_normal((50, 6))
        with pytest.raises(ParameterError):
            fit_pca(tokens, 0)
        with pytest.raises(ParameterError):
            fit_pca(tokens, 7)

    def test_rejects_channel_mismatch(self):
        rng = np.random.default_rng(18)
        model = fit_pca(rng.standard_normal((50, 6)), 3)
        bad = FeatureSequence(rng.standard_normal((1, 2, 2, 5)), (0,))
        with pytest.raises(DimensionError):
            pca_encode(model, bad)
        with pytest.raises(DimensionError):
            pca_decode(model, bad)

    def test_duplicate_rows_rank_deficient(self):
        # rank-1 sample: one direction true variance, the rest exactly zero
        row = np.array([1.0, 2.0, -1.0, 0.5])
        tokens = np.outer([1, 2, 3, 4, 5], row)
        model = fit_pca(tokens, 4)
        assert model.explained_variance[0] > 0
        assert np.all(model.explained_variance[1:] < 1e-12)
