import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from caadnn import FpContext, FpFormat, IAContext

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "fixtures")


@pytest.fixture(scope="session")
def ia():
    return IAContext()


@pytest.fixture()
def ctx():
    """k = 11 under the default certification ceiling u <= 2^-7."""
    return FpContext(FpFormat(11), u_max="2^-7")


@pytest.fixture(scope="session")
def fixtures_dir():
    if not os.path.isdir(FIXTURES):
        pytest.skip("committed fixtures not present")
    return os.path.abspath(FIXTURES)


def fixture_path(name: str) -> str:
    return os.path.abspath(os.path.join(FIXTURES, name))
