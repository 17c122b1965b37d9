import json
import time
from pathlib import Path

import pytest
from threadpoolctl import threadpool_limits

from riskscreen import cli
from riskscreen.synth import PopulationSpec, generate_population

FIXTURES = Path(__file__).parent / "fixtures"

_criteria: dict[int, tuple[str, str]] = {}


@pytest.fixture(scope="session")
def small_corpus():
    """1,500 patients at a raised incidence: enough cancers for every code path, fast."""
    return generate_population(PopulationSpec(n_patients=1500, incidence=0.05, seed=11))


@pytest.fixture(scope="session")
def reference_dir(tmp_path_factory):
    """The bundled reference corpora and run config, generated once per session."""
    out = tmp_path_factory.mktemp("reference")
    t0 = time.perf_counter()
    assert cli.main(["init-reference", "--out", str(out)]) == 0
    (out / "init_seconds.txt").write_text(f"{time.perf_counter() - t0}\n")
    return out


@pytest.fixture(scope="session")
def reference_run(reference_dir):
    """One full pipeline run over the reference corpus at a single BLAS thread."""
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        code = cli.main(["--threads", "1", "pipeline", "--config",
                         str(reference_dir / "run.json")])
    assert code == 0
    out = reference_dir / "out"
    return {"out": out, "seconds": time.perf_counter() - t0,
            "init_seconds": float((reference_dir / "init_seconds.txt").read_text()),
            "manifest": json.loads((out / "manifest.json").read_text())}


def pytest_runtest_logreport(report):
    """Remember the outcome of every acceptance criterion test (test_criterion_NN_*)."""
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    number = int(name.split("_")[2])
    if report.when == "call" or report.outcome != "passed":
        verdict = "PASS" if report.outcome == "passed" else "FAIL"
        if number not in _criteria or _criteria[number][0] == "PASS":
            _criteria[number] = (verdict, name[len("test_criterion_00_"):].replace("_", " "))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        verdict, title = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title}")
