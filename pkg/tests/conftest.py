import pytest

from light.synthdata import write_dataset
from tiny import tiny_spec


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    write_dataset(tiny_spec(), 10, d, val_fraction=0.2)
    return d


def pytest_terminal_summary(terminalreporter):
    from verdicts import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
