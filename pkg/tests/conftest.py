import sys
from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Noiseless planted corpus, small enough for unit tests."""
    from cardecon.synthgen import SynthConfig, generate
    return generate(SynthConfig(transactions_total=200_000, seed=11),
                    tmp_path_factory.mktemp("small_corpus"))


@pytest.fixture(scope="session")
def small_inputs(small_corpus):
    from cardecon.pipeline import OfficialIndices
    return small_corpus.indicators, OfficialIndices.from_csv(small_corpus.indices_path)


@pytest.fixture(scope="session")
def cli_corpus(tmp_path_factory):
    """Default-sized (10^6 transactions) noiseless corpus written through the CLI."""
    from cardecon.cli import main
    out = tmp_path_factory.mktemp("cli_corpus")
    assert main(["synth", "--out-dir", str(out), "--seed", "3"]) == 0
    return out


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; printed at the end of the run and immediately."""
    def record(ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {request.node.name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
