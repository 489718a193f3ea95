import numpy as np
import pytest

from tfblender.blender import FrameFeature, Neighborhood
from tfblender.tensor import Tensor3

# Lines recorded by the acceptance suite, echoed in the terminal summary so they
# are visible whatever the capture mode.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv(x, w, b=None):
    """Quadruple-loop zero-padded same convolution (cross-correlation)."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for y in range(h):
            for xx in range(wd):
                acc = 0.0 if b is None else float(b[o])
                for c in range(cin):
                    for i in range(k):
                        for j in range(k):
                            yy, xc = y + i - p, xx + j - p
                            if 0 <= yy < h and 0 <= xc < wd:
                                acc += w[o, c, i, j] * x[c, yy, xc]
                out[o, y, xx] = acc
    return out


def make_neighborhood(arrays, include_self=True, t0=0):
    """Neighbourhood whose current frame is ``arrays[0]`` and neighbours the rest."""
    frames = [FrameFeature(t0 + k, Tensor3(np.asarray(a))) for k, a in enumerate(arrays)]
    return Neighborhood(frames[0], tuple(frames[1:]), include_self)
