import os
import sys

import numpy as np
import pytest

from scaletext.decoder import Charset
from scaletext.encoder import PyramidSpec
from scaletext.model import Recognizer
from scaletext.synth import GenSpec, generate_dataset
from scaletext.training import TrainConfig, build_model, evaluate, train

# acceptance configuration shared by the expensive fixtures
MICRO_SCALES = ((48, 32), (24, 32))
MICRO_MULTIPLIER = 1.0 / 16.0
DIGITS = "0123456789"
BALANCED_LENGTHS = {n: 0.2 for n in range(1, 6)}


def make_digit_dataset(seed: int, count: int, lengths=None):
    lengths = lengths or BALANCED_LENGTHS
    return generate_dataset(GenSpec(lengths=lengths, seed=seed, count=count, symbols=DIGITS))


@pytest.fixture(scope="session")
def micro_train_data():
    return make_digit_dataset(seed=100, count=2000)


@pytest.fixture(scope="session")
def micro_heldout_data():
    return make_digit_dataset(seed=101, count=500)


@pytest.fixture(scope="session")
def trained_micro(tmp_path_factory, micro_train_data, micro_heldout_data):
    """Micro recognizer trained to the convergence criterion; shared session-wide.

    Trains for up to 5000 Adadelta steps, probing held-out accuracy at
    checkpoints and stopping early once it clears 95%.
    """
    ckpt_dir = tmp_path_factory.mktemp("micro_ckpt")
    config = TrainConfig(steps=5000, batch_size=16, seed=0, multiplier=MICRO_MULTIPLIER,
                         scales=MICRO_SCALES, charset=DIGITS, checkpoint_dir=str(ckpt_dir))
    model = build_model(config, max_label_len=5)
    probe = {"accuracy": 0.0, "step": -1}

    def on_step(step, loss):
        if step >= 1500 and (step + 1) % 500 == 0:
            report = evaluate(model, micro_heldout_data)
            probe["accuracy"] = report.accuracy
            probe["step"] = step
            return report.accuracy >= 0.95
        return False

    result = train(model, micro_train_data, config, on_step=on_step)
    return {
        "model": model,
        "result": result,
        "config": config,
        "probe": probe,
        "ckpt_dir": str(ckpt_dir),
    }


@pytest.fixture(scope="session")
def overfit_one(tmp_path_factory):
    """Tiny model overfit to a single sample; used by decoding tests."""
    data = make_digit_dataset(seed=55, count=1, lengths={2: 1.0})
    config = TrainConfig(steps=220, batch_size=1, seed=1, multiplier=MICRO_MULTIPLIER,
                         scales=MICRO_SCALES, charset=DIGITS)
    model = build_model(config, max_label_len=2)
    result = train(model, data, config)
    return {"model": model, "sample": data[0], "curve": result.loss_curve}
