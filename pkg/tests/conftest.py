import pytest

from qlsim.atomic import ba137, build_manifold, yb171


@pytest.fixture(scope="session")
def yb():
    return build_manifold(yb171())


@pytest.fixture(scope="session")
def ba():
    return build_manifold(ba137())
