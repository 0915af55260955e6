import pytest

from taskquant.harness import ExperimentConfig, Workspace


@pytest.fixture(scope="session")
def toy_workspace(tmp_path_factory):
    """Default toy setting (64x64, m=5, r=4, K=64) shared by the long training checks."""
    cfg = ExperimentConfig(seeds=(1, 2, 3), out_dir=str(tmp_path_factory.mktemp("toy")))
    return Workspace(cfg, reuse_checkpoints=False)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, title, detail = RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {n:2d}. {title}: {detail}")
