import numpy as np
import pytest

from marlin.data import ClipSpec, MotionParams, synth_face_clip
from marlin.model import ModelConfig

TINY = ModelConfig.preset("tiny")
# source clips for the tiny model: frames * stride source frames
TINY_SPEC = ClipSpec(3, TINY.frames * 2, TINY.height, TINY.width, 2)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_clips():
    return [synth_face_clip(i, TINY_SPEC, MotionParams(mouth_open=bool(i % 2))) for i in range(8)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
