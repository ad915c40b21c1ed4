"""Session-wide fixtures: the desk-scale datasets and the models trained on them.

Training happens once per test session; every module that needs a trained
network shares these.
"""

import sys

import numpy as np
import pytest
from hypothesis import settings

from arwb import defenses as D
from arwb import models as M
from arwb import scenegen as S

settings.register_profile("arwb", deadline=None, max_examples=50)
settings.load_profile("arwb")

LR = 2e-3


@pytest.fixture(scope="session")
def sign_train():
    return S.generate_sign_dataset(500, seed=11, split="train")


@pytest.fixture(scope="session")
def sign_test():
    return S.generate_sign_dataset(200, seed=11, split="test")


@pytest.fixture(scope="session")
def road_train():
    return S.generate_road_dataset(2000, seed=11, split="train")


@pytest.fixture(scope="session")
def road_test():
    return S.generate_road_dataset(300, seed=11, split="test")


@pytest.fixture(scope="session")
def detector(sign_train):
    model = M.init_model(M.DETECTOR, seed=0)
    M.train(model, sign_train, epochs=30, lr=LR, seed=0)
    return model


@pytest.fixture(scope="session")
def regressor(road_train):
    model = M.init_model(M.REGRESSOR, seed=0)
    M.train(model, road_train, epochs=15, lr=LR, seed=0)
    return model


@pytest.fixture(scope="session")
def sequences():
    """Four 50-frame approach sequences from 80 m to 5 m (200 frames)."""
    return [S.generate_road_sequence(50, 80.0, 5.0, seed=300 + i) for i in range(4)]


@pytest.fixture(scope="session")
def denoiser(sign_train, road_train):
    imgs = np.concatenate([sign_train.images()[:250], road_train.images()[:250]])
    den, _ = D.train_denoiser(imgs, epochs=8, seed=0)
    return den


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(acceptance.RESULTS):
            terminalreporter.write_line(acceptance.RESULTS[k])
