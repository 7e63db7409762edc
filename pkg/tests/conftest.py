import pytest

from vopatch import harness as hs
from vopatch import renderer as rd

@pytest.fixture(scope="session")
def desk_config():
    return hs.ExperimentConfig.from_dict({})


@pytest.fixture(scope="session")
def desk_dataset(desk_config):
    spec = desk_config.dataset_spec()
    return rd.generate_dataset(rd.scene_for(spec), spec, int(desk_config.data["dataset"]["seed"]))


_ACCEPTANCE: list = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
