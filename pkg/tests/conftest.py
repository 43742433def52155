import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_report import summary_lines  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


import time  # noqa: E402

import pytest  # noqa: E402

# Desk-scale training run shared by the acceptance and trained-net tests.
DESK_CONFIG = """
data.count = 32
data.height = 64
data.width = 64
model.preset = desk
train.learning_rate = 1e-3
train.batch_size = 64
train.steps = 3000
train.variance_threshold = 0.02
train.checkpoint_every = 1000
grid.ps = 16
grid.stride = 8
"""


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Generate 32 scenes and train the desk preset through the CLI."""
    from tdiff.cli import main

    root = tmp_path_factory.mktemp("desk")
    cfg = root / "desk.cfg"
    cfg.write_text(DESK_CONFIG)
    assert main(["--config", str(cfg), "--threads", "1", "gen-data"]) == 0
    start = time.perf_counter()
    assert main(["--config", str(cfg), "--threads", "1", "train"]) == 0
    return {"root": root, "config": cfg, "checkpoint": root / "runs" / "model.ckpt",
            "train_seconds": time.perf_counter() - start}


@pytest.fixture(scope="session")
def desk_net(desk_run):
    from tdiff.denoiser import load_checkpoint

    net, _ = load_checkpoint(desk_run["checkpoint"])
    return net
