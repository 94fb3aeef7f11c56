"""Dataset generation, corruption ladders, natural shift, CSV interchange."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowadapt.data import (CORRUPTION_KINDS, CorruptionSpec, LabeledDataset,
                            apply_corruption, class_mean_spread, generate_source,
                            load_csv, natural_shift, save_csv, target_filename)
from flowadapt.errors import DataFormatError, ShapeError


def logistic_regression_accuracy(ds, steps=300, lr=0.5):
    """Plain-numpy multinomial logistic regression: the separability oracle."""
    x = np.hstack([ds.inputs, np.ones((len(ds), 1))])
    k = int(ds.labels.max()) + 1
    w = np.zeros((x.shape[1], k))
    onehot = np.eye(k)[ds.labels]
    for _ in range(steps):
        logits = x @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * x.T @ (p - onehot) / len(ds)
    return float((np.argmax(x @ w, axis=1) == ds.labels).mean())


class TestGenerateSource:
    def test_two_class_separable_by_linear_oracle(self):
        ds = generate_source(2, 5, 1000, seed=0)
        assert logistic_regression_accuracy(ds) >= 0.97

    def test_same_seed_bitwise_identical(self):
        a = generate_source(4, 8, 200, seed=3)
        b = generate_source(4, 8, 200, seed=3)
        assert a.inputs.tobytes() == b.inputs.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_different_split_different_draw_same_means(self):
        a = generate_source(4, 8, 4000, seed=3, split="train")
        b = generate_source(4, 8, 4000, seed=3, split="test")
        assert a.inputs.tobytes() != b.inputs.tobytes()
        for c in range(4):
            ma = a.inputs[a.labels == c].mean(axis=0)
            mb = b.inputs[b.labels == c].mean(axis=0)
            assert np.linalg.norm(ma - mb) < 0.5

    def test_label_histogram_balanced_within_one(self):
        ds = generate_source(3, 6, 100, seed=1)
        counts = np.bincount(ds.labels, minlength=3)
        assert counts.max() - counts.min() <= 1

    def test_pairwise_mean_distance_is_four(self):
        ds = generate_source(5, 10, 50000, seed=2)
        spread = class_mean_spread(ds)
        assert abs(spread - 4.0) < 0.05

    def test_invalid_dims_rejected(self):
        with pytest.raises(ShapeError):
            generate_source(1, 5, 10, seed=0)
        with pytest.raises(ShapeError):
            generate_source(6, 5, 10, seed=0)   # K > input_dim
        with pytest.raises(ShapeError):
            generate_source(3, 5, 2, seed=0)    # n < K


class TestApplyCorruption:
    def setup_method(self):
        self.ds = generate_source(4, 10, 500, seed=7)

    @pytest.mark.parametrize("kind", CORRUPTION_KINDS)
    def test_labels_bitwise_unchanged(self, kind):
        out = apply_corruption(self.ds, CorruptionSpec(kind, 3))
        assert out.labels.tobytes() == self.ds.labels.tobytes()

    @pytest.mark.parametrize("kind", CORRUPTION_KINDS)
    def test_deterministic_per_dataset_and_spec(self, kind):
        a = apply_corruption(self.ds, CorruptionSpec(kind, 2))
        b = apply_corruption(self.ds, CorruptionSpec(kind, 2))
        assert a.inputs.tobytes() == b.inputs.tobytes()

    @pytest.mark.parametrize("kind", ["gaussian_noise", "uniform_noise"])
    def test_noise_displacement_strictly_monotone_in_severity(self, kind):
        disp = []
        for sev in range(1, 6):
            out = apply_corruption(self.ds, CorruptionSpec(kind, sev))
            disp.append(np.linalg.norm(out.inputs - self.ds.inputs, axis=1).mean())
        assert all(b > a for a, b in zip(disp, disp[1:]))

    def test_severity_parameters_strictly_monotone(self):
        from flowadapt.data import (_GAUSSIAN_SIGMA, _ROTATION_DEGREES,
                                    _SALT_FRACTION, _SCALE_FACTOR,
                                    _SHIFT_MAGNITUDE, _UNIFORM_HALF_WIDTH)
        for ladder in (_GAUSSIAN_SIGMA, _UNIFORM_HALF_WIDTH, _SHIFT_MAGNITUDE,
                       _ROTATION_DEGREES, _SALT_FRACTION):
            assert all(b > a for a, b in zip(ladder, ladder[1:]))
        assert all(b < a for a, b in zip(_SCALE_FACTOR, _SCALE_FACTOR[1:]))

    def test_feature_scale_is_multiplicative(self):
        out = apply_corruption(self.ds, CorruptionSpec("feature_scale", 5))
        np.testing.assert_allclose(out.inputs, 0.2 * self.ds.inputs, rtol=1e-15)

    def test_mean_shift_is_constant_unit_direction(self):
        out = apply_corruption(self.ds, CorruptionSpec("mean_shift", 4))
        delta = out.inputs - self.ds.inputs
        assert np.abs(delta - delta[0]).max() < 1e-12
        assert abs(np.linalg.norm(delta[0]) - 1.5) < 1e-9

    def test_rotation_preserves_norms(self):
        out = apply_corruption(self.ds, CorruptionSpec("rotation", 5))
        np.testing.assert_allclose(np.linalg.norm(out.inputs, axis=1),
                                   np.linalg.norm(self.ds.inputs, axis=1),
                                   rtol=1e-10)
        assert np.abs(out.inputs - self.ds.inputs).max() > 0

    def test_salt_mask_zeroes_expected_count(self):
        out = apply_corruption(self.ds, CorruptionSpec("salt_mask", 5))
        zeroed = (out.inputs == 0.0) & (self.ds.inputs != 0.0)
        np.testing.assert_array_equal(zeroed.sum(axis=1), np.full(len(self.ds), 4))

    def test_severity_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            CorruptionSpec("gaussian_noise", 6)
        with pytest.raises(ValueError):
            CorruptionSpec("gaussian_noise", 0)
        with pytest.raises(ValueError):
            CorruptionSpec("pixel_smear", 3)


class TestNaturalShift:
    def test_mild_shift_properties(self):
        src = generate_source(4, 10, 2000, seed=9)
        nat = natural_shift(src, seed=1)
        assert len(nat) == 2000
        assert nat.labels.min() >= 0 and nat.labels.max() < 4
        # class means moved, but only a little
        for c in range(4):
            src_mean = src.inputs[src.labels == c].mean(axis=0)
            nat_mean = nat.inputs[nat.labels == c].mean(axis=0)
            d = np.linalg.norm(src_mean - nat_mean)
            assert 0.05 < d < 1.2

    def test_deterministic_per_seed(self):
        src = generate_source(4, 10, 100, seed=9)
        a = natural_shift(src, seed=5)
        b = natural_shift(src, seed=5)
        assert a.inputs.tobytes() == b.inputs.tobytes()

    def test_requires_generated_source(self):
        plain = LabeledDataset(np.zeros((4, 3)), np.zeros(4, dtype=int), {})
        with pytest.raises(ValueError):
            natural_shift(plain, seed=0)

    def test_covariance_inflated(self):
        src = generate_source(2, 8, 20000, seed=11)
        nat = natural_shift(src, seed=2, n=20000)
        var_src = np.mean([src.inputs[src.labels == c].var(axis=0).mean()
                           for c in range(2)])
        var_nat = np.mean([nat.inputs[nat.labels == c].var(axis=0).mean()
                           for c in range(2)])
        assert 1.1 < var_nat / var_src < 1.3


class TestCsvRoundTrip:
    def test_roundtrip_exact(self, tmp_path):
        ds = generate_source(3, 4, 50, seed=13)
        path = tmp_path / "ds.csv"
        save_csv(ds, path)
        loaded = load_csv(path)
        np.testing.assert_array_equal(loaded.labels, ds.labels)
        assert np.abs(loaded.inputs - ds.inputs).max() <= 1e-15

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False,
                              width=64),
                    min_size=2, max_size=12))
    def test_roundtrip_property(self, values):
        import tempfile

        arr = np.array(values).reshape(1, -1)
        ds = LabeledDataset(np.vstack([arr, arr * 0.5]), np.array([0, 1]), {})
        with tempfile.TemporaryDirectory() as tmp:
            path = f"{tmp}/p.csv"
            save_csv(ds, path)
            loaded = load_csv(path)
        np.testing.assert_array_equal(loaded.inputs, ds.inputs)

    def test_empty_file_is_structured_error(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DataFormatError):
            load_csv(path)

    def test_header_only_is_error(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("label,f0,f1\n")
        with pytest.raises(DataFormatError):
            load_csv(path)

    def test_non_integer_label_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("label,f0\n1,2.0\nx,3.0\n")
        with pytest.raises(DataFormatError) as exc:
            load_csv(path)
        assert exc.value.line == 3

    def test_inconsistent_columns_names_line(self, tmp_path):
        path = tmp_path / "cols.csv"
        path.write_text("label,f0,f1\n1,2.0,3.0\n0,1.0\n")
        with pytest.raises(DataFormatError) as exc:
            load_csv(path)
        assert exc.value.line == 3
        assert "column" in str(exc.value)

    def test_malformed_float_names_line(self, tmp_path):
        path = tmp_path / "mf.csv"
        path.write_text("label,f0\n1,zap\n")
        with pytest.raises(DataFormatError) as exc:
            load_csv(path)
        assert exc.value.line == 2

    def test_target_filename_convention(self):
        assert target_filename("target", "gaussian_noise", 5, 0) == \
            "target_gaussian_noise_s5_0.csv"
