import os

import pytest


@pytest.fixture(scope="session", autouse=True)
def anchor_cache(tmp_path_factory):
    """Keep normalized-score anchor caches inside the test session."""
    cache = tmp_path_factory.mktemp("anchor_cache")
    os.environ["DARA_CACHE_DIR"] = str(cache)
    yield cache
