import pytest

from specleak.harness.assets import ensure_assets
from specleak.harness.experiments import ExtractionBench, Testbed


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    return ensure_assets(tmp_path_factory.mktemp("specleak-data"))


@pytest.fixture(scope="session")
def bench(data_dir):
    return Testbed(data_dir)


@pytest.fixture(scope="session")
def extraction_bench(data_dir):
    return ExtractionBench(data_dir)
