import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import pytest
from tiny_pipeline import TinyPipeline


@pytest.fixture()
def pipe():
    return TinyPipeline(seed=7)
