import numpy as np
import pytest
import torch

from vsls.sim import PlanarScene
from vsls.textures import generate_texture

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def textures():
    rng = np.random.default_rng(2024)
    return [generate_texture(rng, 256) for _ in range(4)]


@pytest.fixture(scope="session")
def scene(textures):
    return PlanarScene(textures[0], scene_id="tex0")


@pytest.fixture(scope="session")
def scenes(textures):
    return [PlanarScene(t, scene_id=f"tex{i}") for i, t in enumerate(textures)]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
