import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fewshot_intent.dataset import SyntheticSpec, generate_synthetic, load_pooled  # noqa: E402

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12 classes x 24 utterances, 12 speakers, 16-dim features."""
    spec = SyntheticSpec(
        n_classes=12, n_speakers=12, utterances_per_class=24, feature_dim=16,
        frames_range=(3, 8), class_separation=4.0, signal_dim=4, seed=7,
    )
    manifest = generate_synthetic(spec, tmp_path_factory.mktemp("small"))
    return manifest, load_pooled(manifest.records)
