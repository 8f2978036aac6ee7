"""scikit-learn style facade over the selective autoencoder pipeline.

``SelectiveFrameAutoencoder`` is an estimator over stacks of grayscale
frames shaped ``(n_frames, height, width)``: ``fit`` trains the mask
network from explicit stable/unstable labels, ``transform`` returns
normalized-space reconstructions, ``score_samples`` returns the per-frame
instability measure, and ``predict`` thresholds it.  Being a
``BaseEstimator`` it supports ``get_params``/``set_params`` and
``sklearn.base.clone``, so it drops into pipelines and searches.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import analysis, dataflow, network, training
from .errors import ConfigError


def check_frame_stack(X):
    """Validate a (n, height, width) stack of 8-bit grayscale frames."""
    arr = np.asarray(X)
    if arr.ndim != 3:
        raise ValueError(
            f"expected a (n_frames, height, width) stack, got shape {arr.shape}"
        )
    if arr.shape[0] < 1:
        raise ValueError("frame stack is empty")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
            raise ValueError("frame stack contains non-finite values")
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("frame values must lie in [0, 255]")
        arr = np.floor(np.asarray(arr, dtype=np.float64) + 0.5).astype(np.uint8)
    return arr


def check_labels(y, n):
    """Normalize labels to 'stable'/'unstable' strings; 0/1 codes accepted."""
    if y is None:
        raise ValueError("fit requires explicit stable/unstable labels")
    labels = []
    seq = list(y)
    if len(seq) != n:
        raise ValueError(f"got {len(seq)} labels for {n} frames")
    for value in seq:
        if isinstance(value, str):
            name = value
        elif isinstance(value, (bool, np.bool_)):
            name = "unstable" if value else "stable"
        else:
            code = int(value)
            if code not in (0, 1):
                raise ValueError(f"numeric labels must be 0 or 1, got {value!r}")
            name = "unstable" if code else "stable"
        if name not in ("stable", "unstable"):
            raise ValueError(
                f"labels must be 'stable' or 'unstable' (or 0/1), got {value!r}"
            )
        labels.append(name)
    if len(set(labels)) < 2:
        raise ValueError("selective training requires both classes in y")
    return labels


class SelectiveFrameAutoencoder(TransformerMixin, BaseEstimator):
    """Class-selective reconstruction filter over grayscale frame stacks.

    Parameters mirror the training defaults: learning rate 0.0001,
    momentum 0.975, batch size 128, up to 100 epochs, both regularization
    coefficients 0.0001.

    Attributes
    ----------
    model_ : trained network (set by fit)
    history_ : list of per-epoch loss records
    best_epoch_, best_valid_loss_ : early-stopping outcome
    """

    def __init__(
        self,
        preset="desk",
        learning_rate=1e-4,
        momentum=0.975,
        batch_size=128,
        max_epochs=100,
        l2_coeff=1e-4,
        l1_coeff=1e-4,
        validation_fraction=0.1,
        patience=10,
        improvement_threshold=0.995,
        threshold=analysis.DEFAULT_THRESHOLD,
        sustain=analysis.DEFAULT_SUSTAIN,
        window_fraction=analysis.DEFAULT_WINDOW_FRACTION,
        random_state=0,
    ):
        self.preset = preset
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.l2_coeff = l2_coeff
        self.l1_coeff = l1_coeff
        self.validation_fraction = validation_fraction
        self.patience = patience
        self.improvement_threshold = improvement_threshold
        self.threshold = threshold
        self.sustain = sustain
        self.window_fraction = window_fraction
        self.random_state = random_state

    def _frames(self, X, labels=None):
        arr = check_frame_stack(X)
        out = []
        for i, px in enumerate(arr):
            label = labels[i] if labels is not None else "unlabeled"
            out.append(dataflow.Frame(px, label=label, sequence_index=i))
        return out

    def fit(self, X, y):
        """Train the mask network on explicitly labeled frames.

        X is a (n, height, width) stack; y holds 'stable'/'unstable'
        strings or 0/1 codes.  Returns self.
        """
        X = check_frame_stack(X)
        labels = check_labels(y, X.shape[0])
        if self.preset not in network.PRESETS:
            raise ConfigError(
                f"unknown preset {self.preset!r}, expected one of "
                f"{tuple(network.PRESETS)}"
            )
        h, w = X.shape[1:]
        config = network.PRESETS[self.preset](h, w, seed=self.random_state)
        model = network.build(config)
        frames = self._frames(X, labels)
        inputs, targets = dataflow.selective_training_arrays(frames)
        result = training.train(
            model,
            inputs,
            targets,
            training.TrainConfig(
                learning_rate=self.learning_rate,
                momentum=self.momentum,
                batch_size=self.batch_size,
                max_epochs=self.max_epochs,
                loss=training.LossConfig(
                    l2_coeff=self.l2_coeff, l1_coeff=self.l1_coeff
                ),
                shuffle_seed=self.random_state + 1,
                validation_fraction=self.validation_fraction,
                patience=self.patience,
                improvement_threshold=self.improvement_threshold,
            ),
        )
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_valid_loss_ = result.best_valid_loss
        self.n_features_in_ = h * w
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ValueError("this estimator is not fitted yet; call fit first")

    def transform(self, X):
        """Normalized-space reconstructions, shape (n, height, width)."""
        self._check_fitted()
        frames = self._frames(X)
        outputs = []
        for lo in range(0, len(frames), self.batch_size):
            batch = np.stack([dataflow.normalize(f) for f in frames[lo : lo + self.batch_size]])
            out, _ = network.forward(self.model_, batch)
            outputs.append(out[:, 0])
        return np.concatenate(outputs)

    def score_samples(self, X):
        """Raw per-frame instability measure (correlation ratio), in [0, 1]."""
        self._check_fitted()
        frames = self._frames(X)
        recon = self.transform(X)
        return np.array(
            [analysis.correlation_ratio(f, r).eta for f, r in zip(frames, recon)]
        )

    def predict(self, X):
        """1 where the raw measure reaches the decision threshold, else 0."""
        return (self.score_samples(X) >= self.threshold).astype(int)

    def analyze(self, X):
        """Full instability trace (smoothed series, events, soft labels)."""
        self._check_fitted()
        return analysis.analyze_sequence(
            self.model_,
            self._frames(X),
            threshold=self.threshold,
            sustain=self.sustain,
            window_fraction=self.window_fraction,
        )
