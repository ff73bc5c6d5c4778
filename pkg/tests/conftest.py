import numpy as np
import pytest
import torch

from carotidseg.net import NetConfig, UNet


def disk(shape, center, radius):
    rr, cc = np.ogrid[:shape[0], :shape[1]]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    torch.manual_seed(0)
    return UNet(NetConfig(input_size=(16, 16), depth=2, base_channels=4))


class FlipSymmetricModel(torch.nn.Module):
    """Thresholds the input itself: equivariant under any flip."""

    def __init__(self, shape=(16, 16)):
        super().__init__()
        self.config = NetConfig(input_size=shape, depth=1, base_channels=1)
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return torch.cat([x, x * 0.8], dim=1)


@pytest.fixture
def symmetric_model():
    return FlipSymmetricModel()


TINY_SPEC = dict(n_slices=4, image_size=(48, 48), centerline_drift_amplitude=1.0,
                 mab_radius_range=(11, 13), wall_thickness_range=(3, 4), speckle_strength=0.1)


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory):
    from carotidseg.phantom import PhantomSpec, generate_cohort

    root = tmp_path_factory.mktemp("cohort")
    generate_cohort(10, PhantomSpec(**TINY_SPEC), seed=3, dest=root)
    return root


@pytest.fixture(scope="session")
def tiny_ica_cohort(tmp_path_factory):
    from carotidseg.phantom import PhantomSpec, generate_cohort

    root = tmp_path_factory.mktemp("ica")
    generate_cohort(10, PhantomSpec(**TINY_SPEC, ica_roi=True), seed=4, dest=root, artery="ICA")
    return root


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
