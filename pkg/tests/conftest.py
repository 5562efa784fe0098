import pytest

from sanet.config import parse_config
from sanet.synth import generate, to_arrays
from sanet.tensor import SeededRng

TINY_CONFIG = """\
model.stem_channels = 8
model.stage_channels = 8,16,16,16
model.stage_blocks = 1,1,1,1
model.cardinality = 2
model.agg_channels = 8
model.bins = 2x2,1x1
model.psp_reduce = 4
model.gn_group_channels = 4
model.num_classes = 3
data.image_size = 16
data.train_count = 4
train.lr = 1e-3
train.steps = 6
train.val_every = 3
train.augment = true
train.loss = ce+lovasz
"""


def tiny_config(extra: str = ""):
    return parse_config(TINY_CONFIG + extra)


@pytest.fixture
def tiny_data():
    return to_arrays(generate(4, (16, 16), 3, SeededRng(42)))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
