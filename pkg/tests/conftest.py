import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.realpath(os.path.dirname(__file__))))

import config  # noqa: E402
from gridvolt.formats.scenario import parse_scenario  # noqa: E402


@pytest.fixture(scope='session')
def test_config():
    return config.load_config()


@pytest.fixture(scope='session')
def load_fixture(test_config):
    cache = {}

    def load(name):
        if name not in cache:
            cache[name] = parse_scenario(config.fixture_path(test_config,
                                                             name))
        return cache[name]

    return load
