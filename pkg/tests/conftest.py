"""Shared fixtures: small trained models and synthetic sequences.

The tiny model trains a 32x32 network for a handful of epochs, which is
inside the window where the selective mask is sharpest; the desk-scale
model used by the acceptance suite is defined there.
"""

import numpy as np
import pytest

from flamesift.dataflow import SynthParams, synth_generate, selective_training_arrays
from flamesift.network import build, desk_config
from flamesift.training import TrainConfig, train


@pytest.fixture(scope="session")
def tiny_trained_model():
    ds = synth_generate(
        SynthParams(
            seed=21,
            frames=400,
            schedule=[(0, "stable", 1.0), (200, "unstable", 0.8), (300, "unstable", 1.0)],
            height=32,
            width=32,
        )
    )
    inputs, targets = selective_training_arrays(ds.frames)
    model = build(desk_config(32, 32, seed=3))
    train(
        model,
        inputs,
        targets,
        TrainConfig(learning_rate=4e-4, batch_size=32, max_epochs=5, shuffle_seed=7),
    )
    return model


@pytest.fixture(scope="session")
def tiny_sequences():
    stable = list(
        synth_generate(
            SynthParams(seed=22, frames=60, schedule=[(0, "stable", 1.0)], height=32, width=32)
        )
    )
    unstable = list(
        synth_generate(
            SynthParams(seed=23, frames=60, schedule=[(0, "unstable", 0.9)], height=32, width=32)
        )
    )
    return stable, unstable
