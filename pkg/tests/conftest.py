import pytest
from hypothesis import HealthCheck, settings

from voltfi import firmware as fw
from voltfi.rail import RailConfig

from helpers import boot_to_prompt

settings.register_profile("repo", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def bundle():
    return fw.generate_device()


@pytest.fixture(scope="session")
def image(bundle):
    return bundle.image


@pytest.fixture(scope="session")
def rail():
    return RailConfig()


@pytest.fixture
def prompt_machine(image, rail):
    return boot_to_prompt(image, rail)
