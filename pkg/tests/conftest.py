import pytest
import torch

from conceptloc.backbone import build_backbone
from conceptloc.datasets import generate_priors, load_manifest, make_two_shape_dataset

torch.set_num_threads(1)

# Small network for fast unit tests; acceptance runs use the default toy config.
TINY = {"base_channels": 8, "text_dim": 16, "key_dim": 8, "heads": 2, "time_dim": 16,
        "num_timesteps": 10}


@pytest.fixture
def tiny_backbone():
    return build_backbone(TINY)


@pytest.fixture(scope="session")
def shapes_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    make_two_shape_dataset(root, n_images=5, seed=0)
    bb = build_backbone(TINY)
    for cls in ("square", "circle"):
        generate_priors(bb, cls, count=4, seed=0, out_root=root)
    return root


@pytest.fixture(scope="session")
def shapes_manifest(shapes_root):
    return load_manifest(shapes_root / "manifest.json")


# One line per acceptance criterion, printed at the end of the session.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
