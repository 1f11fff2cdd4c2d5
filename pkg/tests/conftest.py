from pathlib import Path

import numpy as np
import pytest

from dfsmn_san.ctc import CtcTarget
from dfsmn_san.datapipe import SequenceBatch
from dfsmn_san.model import ModelConfig

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def small_config(**overrides) -> ModelConfig:
    base = dict(
        input_dim=6,
        model_dim=8,
        heads=2,
        dfsmn_blocks_total=4,
        san_insert_every=2,
        san_layers_pure=2,
        lookback=2,
        lookahead=1,
        hidden_units=10,
        projection_dim=8,
        output_labels=5,
        dropout=0.0,
        max_len=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(rng: np.random.Generator, lengths, dim: int, labels: int = 5) -> SequenceBatch:
    feats = [rng.normal(size=(n, dim)) for n in lengths]
    targets = [CtcTarget([1 + (i % (labels - 1))], labels) for i in range(len(lengths))]
    return SequenceBatch(feats, targets)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
