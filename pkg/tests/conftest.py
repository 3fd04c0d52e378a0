import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cellrate.geometry import ClusterProblem, all_cluster_problems, build_linear_scenario  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

# 140 dB per-BS transmit power against unit noise
P140 = 1e14


@pytest.fixture(scope="session")
def two_cell_full():
    return all_cluster_problems(build_linear_scenario(8, 1.0, 4, P140, "full"))[0]


@pytest.fixture(scope="session")
def two_cell_none():
    return all_cluster_problems(build_linear_scenario(8, 1.0, 4, P140, "none"))


def symmetric_2x8(a=1.0, b=0.7, c=0.5, d=0.3, e=0.2, f=0.1, P=10.0, gamma=2.0):
    """Two BSs, eight groups; group k and k+4 see the two BSs swapped."""
    row0 = [a, b, c, d, f, e, d * 0.9, c * 0.8]
    row1 = [f, e, d * 0.9, c * 0.8, a, b, c, d]
    return ClusterProblem(np.array([row0, row1]), np.array([P, P]), gamma)


def random_problem(rng, A_max=4, B_max=2, gamma_choices=(0.5, 1.0, 2.0)):
    A = int(rng.integers(1, A_max + 1))
    B = int(rng.integers(1, B_max + 1))
    beta = rng.uniform(0.1, 1.0, size=(B, A))
    P = rng.uniform(0.5, 5.0, size=B)
    return ClusterProblem(beta, P, float(rng.choice(gamma_choices)))


# acceptance criteria report: one line per criterion after the run
ACCEPTANCE = {}


def record(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
