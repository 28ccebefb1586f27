import numpy as np
import pytest

from patternflow.geometry import RigModel
from patternflow.pattern import generate_pattern
from patternflow.simulator import NoiseModel, render_frame


@pytest.fixture(scope="session")
def rig():
    return RigModel(focal_px=600.0, baseline_m=0.218, width=640, height=480, d_min=16, d_max=200, downsample_factor=8)


@pytest.fixture(scope="session")
def pattern():
    return generate_pattern(1, 640, 64, 0.15, 1.5, 11)


@pytest.fixture(scope="session")
def small_rig():
    return RigModel(focal_px=300.0, baseline_m=0.2, width=192, height=96, d_min=16, d_max=90, downsample_factor=8)


@pytest.fixture(scope="session")
def small_pattern():
    return generate_pattern(0, 192, 32, 0.15, 1.5, 11)


def render_sequence(scene, rig, p, noise=None, seed=0):
    noise = NoiseModel.noise_free() if noise is None else noise
    frames, gts = [], []
    for t in range(scene.n_frames):
        f, g = render_frame(scene, t, rig, p, noise, seed)
        frames.append(f)
        gts.append(g)
    return frames, gts


def mean_abs_error(pred, gt):
    both = pred.valid & gt.valid
    return float(np.abs(pred.d - gt.d)[both].mean())


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: s.split("criterion")[1]):
            terminalreporter.write_line(line)
