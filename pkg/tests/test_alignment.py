import numpy as np
import pytest
import scipy.sparse as sp

from topofusion import alignment as al
from topofusion import dq as dqm
from topofusion.alignment import SolverConfig
from topofusion.errors import SolverDiverged

from conftest import make_graph, make_surfels, random_unit_dq


def random_problem(rng, n_nodes=None, n_pairs=None, lam=0.1, perturb=0.02):
    n_nodes = int(rng.integers(2, 11)) if n_nodes is None else n_nodes
    n_pairs = int(rng.integers(10, 60)) if n_pairs is None else n_pairs
    g = make_graph(rng.uniform(-0.05, 0.05, size=(n_nodes, 3)), k=min(4, n_nodes - 1) or 1,
                   k_prime=min(3, max(n_nodes - 1, 1)), delta=0.05)
    sup = rng.integers(0, n_nodes, n_pairs)
    v = g.pos[sup] + rng.normal(scale=0.01, size=(n_pairs, 3))
    nbr = al.surfel_neighbor_index(v, g.ids[sup], g)
    nm = rng.normal(size=(n_pairs, 3))
    nm /= np.linalg.norm(nm, axis=1, keepdims=True)
    vm = v + rng.normal(scale=perturb, size=(n_pairs, 3))
    return al.AlignProblem(v, nbr, vm, nm, g.pos.copy(), g.delta.copy(), al.reg_edges(g), lam)


@pytest.mark.parametrize("trial", range(10))
def test_jacobian_matches_finite_differences(trial):
    rng = np.random.default_rng(trial)
    prob = random_problem(rng)
    q0 = random_unit_dq(rng, prob.n_nodes, rot_scale=0.2, t_scale=0.02)
    res, jac = prob.linearize(q0)
    jac = jac.toarray()
    np.testing.assert_allclose(res, prob.residuals(q0), atol=1e-14)
    eps = 1e-6
    num = np.zeros_like(jac)
    for c in range(jac.shape[1]):
        xi = np.zeros(jac.shape[1])
        xi[c] = eps
        rp = prob.residuals(al.apply_twists(q0, prob.node_pos, xi))
        rm = prob.residuals(al.apply_twists(q0, prob.node_pos, -xi))
        num[:, c] = (rp - rm) / (2 * eps)
    rel = np.linalg.norm(jac - num) / np.linalg.norm(num)
    assert rel < 1e-4
    big = np.abs(num) > 1e-3
    np.testing.assert_allclose(jac[big], num[big], rtol=1e-4)


def test_depth_term_backends_agree(rng):
    prob = random_problem(rng, 8, 100)
    q = random_unit_dq(rng, 8, rot_scale=0.3, t_scale=0.02)
    q[::2] *= -1.0
    a = al._depth_terms_numba(prob.v, prob.nbr, prob.vm, prob.nm, prob.node_pos, prob.node_delta, q, True)
    b = al._depth_terms_numpy(prob.v, prob.nbr, prob.vm, prob.nm, prob.node_pos, prob.node_delta, q, True)
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-10)


def test_energy_non_increasing_on_random_problems():
    cfg = SolverConfig(max_iterations=10)
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        prob = random_problem(rng, perturb=0.01)
        _, energies, it, _, _ = al.solve_problem(prob, dqm.dq_identity(prob.n_nodes), cfg)
        assert np.all(np.diff(energies) <= 0.0), trial
        assert len(energies) >= 1


def test_solver_recovers_rigid_translation():
    rng = np.random.default_rng(3)
    g = make_graph(rng.uniform(-0.05, 0.05, size=(6, 3)), k=5, k_prime=4)
    pts = rng.uniform(-0.06, 0.06, size=(400, 3))
    nrm = rng.normal(size=(400, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    sup = rng.integers(0, 6, 400)
    t = np.array([0.01, -0.005, 0.003])
    prob = al.AlignProblem(pts, al.surfel_neighbor_index(pts, sup, g), pts + t, nrm, g.pos, g.delta,
                           al.reg_edges(g), 0.1)
    q, energies, *_ = al.solve_problem(prob, dqm.dq_identity(6), SolverConfig(max_iterations=20, tol=1e-12))
    np.testing.assert_allclose(dqm.dq_transform_points(q, g.pos), g.pos + t, atol=1e-6)
    assert energies[-1] < 1e-12


def test_regulariser_zero_for_shared_transform(rng):
    g = make_graph(rng.normal(scale=0.05, size=(7, 3)))
    q = np.tile(random_unit_dq(rng), (7, 1))
    res, _ = al.reg_terms(al.reg_edges(g), g.pos, q)
    np.testing.assert_allclose(res, 0.0, atol=1e-12)


def test_divergence_raises(monkeypatch, rng):
    prob = random_problem(rng, 4, 20)
    monkeypatch.setattr(al, "block_cg", lambda *a, **k: (np.full(a[4].shape, np.nan), 0))
    with pytest.raises(SolverDiverged):
        al.solve_problem(prob, dqm.dq_identity(4), SolverConfig(max_retries=2))


def test_match_window_backends_agree(rng):
    h, w = 12, 10
    gi = np.full(h * w, -1)
    gi[rng.choice(h * w, 60, replace=False)] = np.arange(60)
    mi = np.full(h * w, -1)
    mi[rng.choice(h * w, 80, replace=False)] = np.arange(80)
    gp, mp = rng.normal(scale=0.01, size=(60, 3)), rng.normal(scale=0.01, size=(80, 3))
    gn, mn = np.tile([0, 0, 1.0], (60, 1)), np.tile([0, 0, 1.0], (80, 1))
    mn[::3] = [1.0, 0, 0]
    args = (gi.reshape(h, w), mi.reshape(h, w), gp, gn, mp, mn, 2, 0.015 ** 2, 0.8)
    a = al._match_window_numba(*args)
    b = al._match_window_numpy(*args)
    assert len(a[0]) > 10
    np.testing.assert_array_equal(np.sort(a[0]), np.sort(b[0]))
    assert dict(zip(a[0], a[1])) == dict(zip(b[0], b[1]))


def test_zbuffer_backends_agree(rng):
    pix = rng.integers(-1, 30, 200)
    z = rng.uniform(0.5, 1.0, 200)
    z[:20] = 0.7
    a = al._zbuffer_numba(pix, z, 30)
    b = al._zbuffer_numpy(pix, z, 30)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_find_correspondences_thresholds():
    gm = al.GeometryMap(np.array([[0, -1], [-1, 1]]), np.zeros((2, 2)))
    mi = np.array([[0, 1], [-1, -1]])
    geo = make_surfels([[0, 0, 0], [0.1, 0, 0]])
    meas = make_surfels([[0.0, 0, 0.01], [0.1, 0, 0.001]], normal=np.array([[0, 0, 1.0], [1.0, 0, 0]]))
    pairs = al.find_correspondences([gm], [mi], geo, meas, SolverConfig(sigma=1))
    # surfel 1 fails the normal test with its only near candidate
    assert list(pairs.geo) == [0] and list(pairs.meas) == [0]


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_block_assembly_equals_dense_normal_equations(backend, rng):
    assemble = al._assemble_numba if backend == "numba" else al._assemble_numpy
    solve = al._block_cg_numba if backend == "numba" else al._block_cg_numpy
    for _ in range(5):
        prob = random_problem(rng)
        q = random_unit_dq(rng, prob.n_nodes, rot_scale=0.2, t_scale=0.02)
        res, jac = prob.linearize(q)
        h_dense = (jac.T @ jac).toarray()
        pat = al.block_pattern(prob.nbr, prob.edges, prob.n_nodes)
        rd, jd = al.depth_terms(prob.v, prob.nbr, prob.vm, prob.nm, prob.node_pos, prob.node_delta, q, True)
        rr, jr = al.reg_terms(prob.edges, prob.node_pos, q)
        h, g = assemble(jd, rd, prob.nbr, pat.d_slot, jr, rr, prob.edges, pat.e_slot, prob.lam, prob.n_nodes,
                        pat.n_blocks)
        full = sp.bsr_matrix((h, pat.cols, pat.indptr), shape=h_dense.shape).toarray()
        np.testing.assert_allclose(full, h_dense, atol=1e-14)
        np.testing.assert_allclose(g.ravel(), jac.T @ res, atol=1e-14)
        x, info = solve(pat.indptr, pat.cols, pat.diag, h, -g, 1e-4, 1e-10, 1000)
        assert info == 0
        np.testing.assert_allclose((h_dense + 1e-4 * np.eye(len(h_dense))) @ x.ravel(), -g.ravel(), atol=1e-10)


def test_block_pattern_and_reg_backends_agree(rng):
    for _ in range(5):
        prob = random_problem(rng)
        q = random_unit_dq(rng, prob.n_nodes, rot_scale=0.2, t_scale=0.02)
        nbr = np.ascontiguousarray(prob.nbr, dtype=np.int64)
        a = al._block_pattern_numba(nbr, prob.edges, prob.n_nodes)
        b = al._block_pattern_numpy(nbr, prob.edges, prob.n_nodes)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        rot = np.ascontiguousarray(dqm.dq_rotation(q))
        trans = np.ascontiguousarray(dqm.dq_translation(q))
        ra, ja = al._reg_terms_numba(prob.edges, prob.node_pos, rot, trans, True)
        rb, jb = al._reg_terms_numpy(prob.edges, prob.node_pos, rot, trans, True)
        np.testing.assert_allclose(ra, rb, atol=1e-15)
        np.testing.assert_allclose(ja, jb, atol=1e-15)
