import numpy as np
import pytest

from arbenkf.fem import assemble_operators, build_mesh


@pytest.fixture(scope="session")
def ops21():
    return assemble_operators(build_mesh(21))


@pytest.fixture(scope="session")
def ops41():
    return assemble_operators(build_mesh(41))


@pytest.fixture(scope="session")
def ops_tiny():
    """Unaligned 6 x 6 mesh (16 interior dofs) for brute-force oracles."""
    return assemble_operators(build_mesh(6, aligned=False))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("ARBENKF_CACHE", str(tmp_path / "cache"))
    return tmp_path / "cache"


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>3}: {'PASS' if ok else 'FAIL'}  {detail}")
