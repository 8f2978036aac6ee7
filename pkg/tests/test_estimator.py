"""Estimator facade: sklearn protocol, validation, end-to-end mechanics."""

import numpy as np
import pytest
from sklearn.base import clone

from flamesift.dataflow import SynthParams, synth_generate
from flamesift.estimator import SelectiveFrameAutoencoder, check_frame_stack, check_labels


def small_stack(seed=0, n_stable=12, n_unstable=12):
    ds = synth_generate(
        SynthParams(seed=seed, frames=n_stable + n_unstable,
                    schedule=[(0, "stable", 1.0), (n_stable, "unstable", 1.0)],
                    height=24, width=24)
    )
    X = np.stack([f.pixels for f in ds])
    y = [f.label for f in ds]
    return X, y


@pytest.fixture(scope="module")
def fitted():
    X, y = small_stack()
    est = SelectiveFrameAutoencoder(max_epochs=3, batch_size=8, random_state=1)
    return est.fit(X, y), X, y


class TestValidation:
    def test_frame_stack_must_be_3d(self):
        with pytest.raises(ValueError, match="stack"):
            check_frame_stack(np.zeros((4, 4)))

    def test_values_must_be_byte_range(self):
        with pytest.raises(ValueError, match="255"):
            check_frame_stack(np.full((1, 4, 4), 300.0))

    def test_float_frames_rounded(self):
        out = check_frame_stack(np.full((1, 2, 2), 17.6))
        assert out.dtype == np.uint8
        assert np.all(out == 18)

    def test_labels_accept_codes_and_names(self):
        assert check_labels([0, 1], 2) == ["stable", "unstable"]
        assert check_labels(["unstable", "stable"], 2) == ["unstable", "stable"]

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            check_labels([0, 0, 0], 3)

    def test_label_count_must_match(self):
        with pytest.raises(ValueError, match="labels"):
            check_labels([0, 1], 3)


class TestSklearnProtocol:
    def test_get_params_round_trip(self):
        est = SelectiveFrameAutoencoder(learning_rate=0.01, sustain=12)
        params = est.get_params()
        assert params["learning_rate"] == 0.01
        assert params["sustain"] == 12
        est2 = SelectiveFrameAutoencoder(**params)
        assert est2.get_params() == params

    def test_clone_preserves_params(self):
        est = SelectiveFrameAutoencoder(momentum=0.5, threshold=0.7)
        cloned = clone(est)
        assert cloned.momentum == 0.5
        assert cloned.threshold == 0.7

    def test_set_params(self):
        est = SelectiveFrameAutoencoder()
        est.set_params(batch_size=16)
        assert est.batch_size == 16

    def test_unfitted_transform_raises(self):
        X, _ = small_stack()
        with pytest.raises(ValueError, match="not fitted"):
            SelectiveFrameAutoencoder().transform(X)


class TestFitTransform:
    def test_fit_sets_attributes(self, fitted):
        est, X, y = fitted
        assert hasattr(est, "model_")
        assert est.best_epoch_ >= 1
        assert len(est.history_) >= 1

    def test_transform_shape(self, fitted):
        est, X, _ = fitted
        out = est.transform(X)
        assert out.shape == X.shape
        assert np.all(np.isfinite(out))

    def test_score_samples_in_unit_interval(self, fitted):
        est, X, _ = fitted
        scores = est.score_samples(X)
        assert scores.shape == (X.shape[0],)
        assert np.all(scores >= -1e-9) and np.all(scores <= 1 + 1e-9)

    def test_predict_is_binary(self, fitted):
        est, X, _ = fitted
        pred = est.predict(X)
        assert set(np.unique(pred)) <= {0, 1}

    def test_fit_is_deterministic(self):
        X, y = small_stack(seed=3)
        a = SelectiveFrameAutoencoder(max_epochs=2, batch_size=8, random_state=7).fit(X, y)
        b = SelectiveFrameAutoencoder(max_epochs=2, batch_size=8, random_state=7).fit(X, y)
        for pa, pb in zip(a.model_.parameter_arrays(), b.model_.parameter_arrays()):
            assert np.array_equal(pa, pb)

    def test_single_class_fit_rejected(self):
        X, _ = small_stack()
        with pytest.raises(ValueError, match="both classes"):
            SelectiveFrameAutoencoder(max_epochs=1).fit(X, ["stable"] * len(X))

    def test_unknown_preset_rejected(self):
        X, y = small_stack()
        est = SelectiveFrameAutoencoder(preset="galactic", max_epochs=1)
        with pytest.raises(ValueError, match="preset"):
            est.fit(X, y)

    def test_analyze_returns_trace(self, fitted):
        est, X, _ = fitted
        trace = est.analyze(X)
        assert len(trace.raw) == X.shape[0]
        assert len(trace.soft_labels) == X.shape[0]
