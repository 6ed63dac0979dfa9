import pytest
import yaml

from binpose.config import load_config
from binpose.dataset import generate_dataset

# small enough that gen + a few training steps run in seconds
TINY = {
    "seed": 7,
    "scene": {"n_min": 3, "n_max": 4},
    "views": {"count": 2, "image_size": [64, 64], "focal_px": 150.0},
    "dataset": {"train_scenes": 2, "test_scenes": 1},
    "posehyp": {"hidden": 16},
    "train": {"steps": 4},
    "jointreg": {"steps": 3, "hidden": 16, "appearance": 8},
}


@pytest.fixture(scope="session")
def tiny_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


@pytest.fixture(scope="session")
def tiny_config(tiny_config_path):
    return load_config(tiny_config_path)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_config):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(tiny_config, root)
    return root


ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
