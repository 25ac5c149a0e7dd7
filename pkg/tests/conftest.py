import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hieracoustic.evaluation import (  # noqa: E402
    SyntheticCorpusConfig,
    fold_split,
    generate_synthetic_corpus,
    load_segments,
    norm_stats_for,
    read_manifest,
    segments_to_frames,
)
from hieracoustic.taxonomy import default_taxonomy  # noqa: E402


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A reduced synthetic corpus on disk: 8 segments/class, 30 frames each."""
    cfg = SyntheticCorpusConfig(seed=3, segments_per_class=8, frames_per_segment=30)
    manifest = generate_synthetic_corpus(cfg, tmp_path_factory.mktemp("corpus"))
    return cfg, manifest


@pytest.fixture(scope="session")
def small_frames(small_corpus):
    """(train, val, stats) frame sets for fold 1 of the small corpus."""
    _, manifest = small_corpus
    tax = default_taxonomy()
    fold = fold_split(read_manifest(manifest), 1)
    train_segs = load_segments(fold.train, tax)
    stats = norm_stats_for(train_segs)
    return segments_to_frames(train_segs, stats), segments_to_frames(load_segments(fold.test, tax), stats), stats


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for line in results.values():
        terminalreporter.write_line(line)
