from pathlib import Path

import pytest

from dramagender.tei import Play, parse_play, segment_scenes

DATA_DIR = Path(__file__).parent / "data"
TEI_DIR = DATA_DIR / "tei"


@pytest.fixture(scope="session")
def tei_dir() -> Path:
    return TEI_DIR


@pytest.fixture(scope="session")
def fixture_corpus() -> list[Play]:
    """The three static TEI fixture plays, parsed and scene-segmented."""
    plays = []
    for path in sorted(TEI_DIR.glob("*.xml")):
        plays.append(segment_scenes(parse_play(path.read_text(encoding="utf-8"),
                                               play_name=path.stem)))
    return plays
