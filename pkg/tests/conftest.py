import numpy as np
import pytest

from topofusion import dq as dqm
from topofusion.model import DeformationGraph, SurfelSet
from topofusion.sampling import knn_from_matrix
from topofusion.model import pairwise_distances


def random_unit_dq(rng, n=None, rot_scale=1.0, t_scale=0.1):
    shape = (3,) if n is None else (n, 3)
    q = dqm.quat_from_rotvec(rng.normal(scale=rot_scale, size=shape))
    return dqm.dq_from_rt(q, rng.normal(scale=t_scale, size=shape))


def make_graph(pos, k=8, k_prime=4, delta=0.05, dq=None):
    pos = np.asarray(pos, dtype=float).reshape(-1, 3)
    ids = np.arange(len(pos), dtype=np.int64)
    dq = dqm.dq_identity(len(pos)) if dq is None else dq
    return DeformationGraph(ids, pos, np.full(len(pos), delta), dq, knn_from_matrix(pairwise_distances(pos), ids, k),
                            k, k_prime)


def make_surfels(pos, normal=None, support=None, conf=1.0, radius=0.004, t=0):
    pos = np.asarray(pos, dtype=float).reshape(-1, 3)
    n = len(pos)
    normal = np.tile([0.0, 0.0, 1.0], (n, 1)) if normal is None else normal
    support = np.zeros(n, np.int64) if support is None else support
    return SurfelSet(pos, normal, np.full((n, 3), 0.5), np.full(n, radius), np.full(n, conf, dtype=float),
                     np.full(n, t), support)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria: test_acceptance records (criterion, part, ok, detail)
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    by_crit = {}
    for crit, part, ok, detail in ACCEPTANCE:
        by_crit.setdefault(crit, []).append((part, ok, detail))
    for crit in sorted(by_crit):
        parts = by_crit[crit]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{p[0]}: {'ok' if p[1] else 'FAILED'} ({p[2]})" for p in parts)
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'} - {detail}")
