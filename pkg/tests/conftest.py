import numpy as np
import pytest

from nasalsi.dsp import Signal


def tone(freq_hz, duration_s, fs, amp=1.0, phase=0.0):
    t = np.arange(int(round(duration_s * fs))) / fs
    return Signal(amp * np.sin(2 * np.pi * freq_hz * t + phase), fs)


def middle(x, frac=0.2):
    """Drop ``frac`` of the samples at each end."""
    n = len(x)
    k = int(n * frac)
    return np.asarray(x)[k:n - k]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
