import functools
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from eatac.data import CORRUPTIONS, CorruptionSpec, DatasetSpec, domain_stream, generate_dataset  # noqa: E402
from eatac.engine import Batch  # noqa: E402
from eatac.fisher import estimate_fisher  # noqa: E402
from eatac.network import Architecture, Model  # noqa: E402
from eatac.training import train_source  # noqa: E402

TINY = Architecture(input_dim=5, num_classes=3, width=6, num_blocks=3)


@functools.lru_cache(maxsize=None)
def source_bundle(seed: int = 0, label_noise: float = 0.0):
    """Default dataset, trained source model and Fisher map, cached for the session."""
    ds = generate_dataset(DatasetSpec(seed=seed, label_noise=label_noise))
    model = train_source(ds, seed=seed)
    fisher = estimate_fisher(model, ds.fisher.x)
    return ds, model, fisher


def corrupted_stream(ds, seed, kinds=CORRUPTIONS, severity=5, batch_size=64):
    stream = []
    for kind in kinds:
        spec = CorruptionSpec(kind, severity, seed)
        for j, (x, y) in enumerate(domain_stream(ds.test.x, ds.test.y, spec, ds.scale, batch_size)):
            stream.append(Batch(x, y, spec.name, j == 0))
    return stream


@pytest.fixture
def tiny_model():
    return Model(TINY, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def trained():
    return source_bundle(0)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
