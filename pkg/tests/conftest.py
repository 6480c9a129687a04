import dataclasses

import numpy as np
import pytest

from maskr.codec import CodecConfig, train_codec
from maskr.config import preset
from maskr.data import synth_speech
from maskr.dsp import AudioClip


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine(freq, seconds=1.0, sr=16000, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t + phase), sr)


@pytest.fixture(scope="session")
def speech_clips():
    return [synth_speech(2.0, s) for s in range(6)]


@pytest.fixture(scope="session")
def small_codec(speech_clips):
    """A quick 4 x 256 codec on the tiny geometry."""
    return train_codec(speech_clips, CodecConfig(iterations=40, seed=3))


def mini_config(frontend="stft", objective="masksr", **over):
    """Tiny preset shrunk further so model tests run in milliseconds."""
    base = dict(num_codebooks=2, codebook_size=8, model_dim=16, num_heads=2, enc_blocks=1,
                lm_blocks=1, window=64, hop=16, conv_channels=32, clip_seconds=0.5)
    base.update(over)
    return dataclasses.replace(preset("tiny", frontend, objective), **base)


# acceptance verdicts collected by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(line[1])
