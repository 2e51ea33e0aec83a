import pytest

from datamarket import harness


@pytest.fixture(scope="session")
def honest_db():
    return harness.run(harness.honest_config("db", seed=11))


@pytest.fixture(scope="session")
def honest_ida():
    return harness.run(harness.honest_config("ida", seed=12))


@pytest.fixture(scope="session")
def fast_db():
    return harness.run(harness.honest_config("db", seed=13, finalization_delay_ms=0))
