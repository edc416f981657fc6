import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from awada.nets import ProposalDetector, SegmenterNet, train_detector, train_segmenter  # noqa: E402
from awada.synthdata import generate_source  # noqa: E402


@pytest.fixture(scope="session")
def scenes():
    return generate_source(60, seed=5)


@pytest.fixture(scope="session")
def held_out():
    return generate_source(20, seed=6)


@pytest.fixture(scope="session")
def trained_segmenter(scenes):
    net = SegmenterNet(3)
    train_segmenter(net, scenes.network_images(), scenes.masks, steps=200, seed=1)
    net.freeze()
    return net


@pytest.fixture(scope="session")
def trained_detector(scenes):
    net = ProposalDetector(4)
    train_detector(net, scenes.network_images(), scenes.masks, steps=250, seed=2)
    return net


@pytest.fixture(scope="session")
def tiny_workdir(tmp_path_factory):
    """Datasets, baseline and detectors for a tiny configuration (shared, treat as read-only)."""
    from awada.pipeline.stages import Workdir, gen_data, stage1_train_baseline, stage2_train_detectors
    from helpers import tiny_config

    cfg = tiny_config()
    wd = Workdir(tmp_path_factory.mktemp("tiny"))
    gen_data(cfg, wd)
    stage1_train_baseline(cfg, wd)
    stage2_train_detectors(cfg, wd)
    return cfg, wd


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
