import itertools

import numpy as np
import pytest

from topofusion import dq as dqm
from topofusion import warp as wp
from topofusion.errors import DanglingSupport
from topofusion.model import Surfel, WarpField

from conftest import make_graph, make_surfels, random_unit_dq


def _blend_oracle(v, p, delta, q):
    """Direct dual quaternion arithmetic: weighted sum after hemisphere fix."""
    acc = np.zeros(8)
    for pk, dk, qk in zip(p, delta, q):
        w = np.exp(-np.sum((v - pk) ** 2) / (2 * dk * dk))
        s = 1.0 if qk[:4] @ q[0][:4] >= 0 else -1.0
        acc += w * s * qk
    real = acc[:4] / np.linalg.norm(acc[:4])
    dual = acc[4:] / np.linalg.norm(acc[:4])
    return np.concatenate([real, dual - (real @ dual) * real])


def test_blend_identity():
    nb = [(np.zeros(3), 0.05, dqm.dq_identity()), (np.ones(3) * 0.01, 0.05, dqm.dq_identity())]
    np.testing.assert_allclose(wp.blend_warp(np.zeros(3), nb), dqm.dq_identity(), atol=1e-12)


def test_blend_single_translation():
    q = wp.blend_warp(np.zeros(3), [(np.array([0.01, 0, 0]), 0.05, dqm.dq_from_translation([1.0, 0, 0]))])
    np.testing.assert_allclose(dqm.dq_translation(q), [1, 0, 0], atol=1e-12)


def test_blend_symmetric_translations_cancel():
    nb = [(np.array([-0.02, 0, 0]), 0.05, dqm.dq_from_translation([1.0, 0, 0])),
          (np.array([0.02, 0, 0]), 0.05, dqm.dq_from_translation([-1.0, 0, 0]))]
    np.testing.assert_allclose(dqm.dq_translation(wp.blend_warp(np.zeros(3), nb)), 0.0, atol=1e-6)


def test_weight_decreases_with_distance():
    assert wp.gaussian_weight(0.0, 0.05) == 1.0
    assert wp.gaussian_weight(0.01, 0.05) < wp.gaussian_weight(0.001, 0.05)


def test_blend_underflow_falls_back_to_nearest():
    far = np.array([100.0, 0, 0])
    nb = [(far, 1e-3, dqm.dq_from_translation([1.0, 0, 0])), (2 * far, 1e-3, dqm.dq_from_translation([2.0, 0, 0]))]
    np.testing.assert_allclose(dqm.dq_translation(wp.blend_warp(np.zeros(3), nb)), [1, 0, 0], atol=1e-12)


@pytest.mark.parametrize("trial", range(20))
def test_blend_matches_direct_arithmetic(trial):
    rng = np.random.default_rng(trial)
    n = rng.integers(1, 6)
    p = rng.normal(scale=0.03, size=(n, 3))
    delta = rng.uniform(0.03, 0.08, n)
    q = random_unit_dq(rng, n, rot_scale=0.5)
    q *= rng.choice([-1.0, 1.0], size=(n, 1))
    v = rng.normal(scale=0.03, size=3)
    got = wp.blend_warp(v, list(zip(p, delta, q)))
    want = _blend_oracle(v, p, delta, q)
    assert np.allclose(got, want, atol=1e-6) or np.allclose(got, -want, atol=1e-6)


def test_blend_invariant_under_sign_flips(rng):
    p = rng.normal(scale=0.02, size=(4, 3))
    q = random_unit_dq(rng, 4, rot_scale=0.3)
    base = dqm.dq_to_matrix(wp.blend_warp(np.zeros(3), list(zip(p, [0.05] * 4, q))))
    for _ in range(10):
        flip = q * rng.choice([-1.0, 1.0], size=(4, 1))
        got = dqm.dq_to_matrix(wp.blend_warp(np.zeros(3), list(zip(p, [0.05] * 4, flip))))
        np.testing.assert_allclose(got, base, atol=1e-9)


def test_batched_blend_matches_scalar(rng):
    g = make_graph(rng.normal(scale=0.05, size=(12, 3)), dq=random_unit_dq(rng, 12, rot_scale=0.3))
    pts = rng.normal(scale=0.05, size=(30, 3))
    sup = rng.integers(0, 12, 30)
    s = make_surfels(pts, support=sup)
    w = WarpField.from_graph(g)
    out = wp.warp_surfels(s, w, g)
    nbr = wp.surfel_neighbor_index(pts, sup, g)
    for i in range(30):
        q = wp.blend_warp(pts[i], [(g.pos[j], g.delta[j], g.dq[j]) for j in nbr[i]])
        np.testing.assert_allclose(out.pos[i], dqm.dq_transform_points(q, pts[i]), atol=1e-10)


def test_numba_and_numpy_warp_agree(rng):
    g = make_graph(rng.normal(scale=0.05, size=(15, 3)), dq=random_unit_dq(rng, 15, rot_scale=0.4))
    pts = rng.normal(scale=0.05, size=(200, 3))
    nrm = rng.normal(size=(200, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    nbr = wp._neighbor_index_numpy(pts, rng.integers(0, 15, 200), g.knn_index(), g.pos, g.k_prime)
    nbr2 = wp._neighbor_index_numba(pts, nbr[:, 0].copy(), g.knn_index(), g.pos, g.k_prime)
    a = wp._warp_points_numba(pts, nrm, nbr2, g.pos, g.delta, g.dq)
    b = wp._warp_points_numpy(pts, nrm, nbr2, g.pos, g.delta, g.dq)
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_neighbor_index_backends_agree(rng):
    g = make_graph(rng.normal(scale=0.05, size=(20, 3)))
    pts = rng.normal(scale=0.05, size=(100, 3))
    sup = rng.integers(0, 20, 100)
    a = wp._neighbor_index_numba(pts, sup, g.knn_index(), g.pos, g.k_prime)
    b = wp._neighbor_index_numpy(pts, sup, g.knn_index(), g.pos, g.k_prime)
    np.testing.assert_array_equal(a, b)


def test_warp_surfel_identity():
    g = make_graph([[0, 0, 0], [0.03, 0, 0], [0, 0.03, 0]])
    s = Surfel([0.01, 0.01, 0.0], [0, 0, 1.0], support=0)
    out = wp.warp_surfel(s, WarpField.identity(g), g)
    np.testing.assert_allclose(out.v, s.v, atol=1e-12)
    np.testing.assert_allclose(out.n, s.n, atol=1e-12)
    assert out.r == s.r and out.conf == s.conf


def test_warp_surfel_translation():
    g = make_graph([[0, 0, 0], [0.03, 0, 0], [0, 0.03, 0]], dq=dqm.dq_from_translation(np.tile([0, 0, 0.1], (3, 1))))
    s = Surfel([0.01, 0.01, 0.0], [0, 0, 1.0], support=1)
    out = wp.warp_surfel(s, WarpField.from_graph(g), g)
    np.testing.assert_allclose(out.v, [0.01, 0.01, 0.1], atol=1e-12)
    np.testing.assert_allclose(out.n, [0, 0, 1], atol=1e-12)


def test_warp_surfel_rotation():
    q = dqm.dq_from_rt(dqm.quat_from_rotvec(np.array([0, 0, np.pi / 2])), np.zeros(3))
    g = make_graph([[0, 0, 0], [0.5, 0, 0], [0, 0.5, 0]], dq=np.tile(q, (3, 1)))
    s = Surfel([1.0, 0, 0], [1.0, 0, 0], support=1)
    out = wp.warp_surfel(s, WarpField.from_graph(g), g)
    np.testing.assert_allclose(out.v, [0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(out.n, [0, 1, 0], atol=1e-12)


def test_warp_surfel_dangling_support():
    g = make_graph([[0, 0, 0], [0.03, 0, 0]])
    with pytest.raises(DanglingSupport):
        wp.warp_surfel(Surfel([0, 0, 0], [0, 0, 1.0], support=7), WarpField.identity(g), g)


def test_warp_preserves_unit_normals_and_rigidity(rng):
    g = make_graph(rng.normal(scale=0.05, size=(10, 3)), dq=np.tile(random_unit_dq(rng), (10, 1)))
    s = make_surfels(rng.normal(scale=0.05, size=(50, 3)), support=rng.integers(0, 10, 50))
    out = wp.warp_surfels(s, WarpField.from_graph(g), g)
    np.testing.assert_allclose(np.linalg.norm(out.normal, axis=1), 1.0, atol=1e-6)
    d0 = np.linalg.norm(s.pos[:, None] - s.pos[None], axis=2)
    d1 = np.linalg.norm(out.pos[:, None] - out.pos[None], axis=2)
    np.testing.assert_allclose(d0, d1, atol=1e-9)


def test_surfel_neighbors_cardinality_and_subset(rng):
    g = make_graph(rng.normal(scale=0.05, size=(5, 3)), k=2, k_prime=2)
    for sup in range(5):
        s = Surfel(rng.normal(scale=0.05, size=3), [0, 0, 1.0], support=sup)
        ids = wp.surfel_neighbors(s, g)
        cand = {sup} | set(int(x) for x in g.knn[sup] if x >= 0)
        assert len(ids) == 2 and set(ids) <= cand


def test_surfel_neighbors_small_candidate_set():
    g = make_graph([[0, 0, 0], [0.03, 0, 0]], k=1, k_prime=1)
    g = g.replace(k_prime=1)
    assert wp.surfel_neighbors(Surfel([0.029, 0, 0], [0, 0, 1.0], support=0), g) == [1]
    g4 = make_graph([[0, 0, 0], [0.03, 0, 0]], k=4, k_prime=4)
    assert sorted(wp.surfel_neighbors(Surfel([0, 0, 0], [0, 0, 1.0], support=0), g4)) == [0, 1]


def test_surfel_neighbors_brute_force_oracle(rng):
    pos = rng.normal(scale=0.05, size=(5, 3))
    g = make_graph(pos, k=3, k_prime=2)
    for _ in range(50):
        v = rng.normal(scale=0.05, size=3)
        sup = int(rng.integers(0, 5))
        cand = [sup] + [int(x) for x in g.knn[sup]]
        # exhaustive: the k'-subset with the smallest total distance
        best = min(itertools.combinations(cand, 2), key=lambda c: np.linalg.norm(pos[list(c)] - v, axis=1).sum())
        want = sorted(best, key=lambda c: np.linalg.norm(pos[c] - v))
        assert wp.surfel_neighbors(Surfel(v, [0, 0, 1.0], support=sup), g) == want


def test_warp_graph_nodes_identity_and_translation(rng):
    g = make_graph(rng.normal(scale=0.05, size=(10, 3)))
    np.testing.assert_allclose(wp.warp_graph_nodes(g, WarpField.identity(g)).pos, g.pos, atol=1e-12)
    t = dqm.dq_from_translation(np.tile([0.01, -0.02, 0.03], (10, 1)))
    out = wp.warp_graph_nodes(g, WarpField(g.ids, g.pos, g.delta, t))
    np.testing.assert_allclose(out.pos, g.pos + [0.01, -0.02, 0.03], atol=1e-12)
    np.testing.assert_allclose(out.dq, dqm.dq_identity(10), atol=1e-12)


def test_warp_graph_nodes_two_clusters():
    a = np.array([[0, 0, 0], [0.02, 0, 0], [0, 0.02, 0]], float)
    pos = np.concatenate([a, a + [1.0, 0, 0]])
    g = make_graph(pos, k=2, k_prime=2)
    # kNN lists stay inside each cluster
    assert all(set(g.knn[i]) <= {0, 1, 2} for i in range(3))
    dq = np.concatenate([dqm.dq_from_translation(np.tile([0, 0, 0.05], (3, 1))), dqm.dq_identity(3)])
    out = wp.warp_graph_nodes(g, WarpField(g.ids, g.pos, g.delta, dq))
    np.testing.assert_allclose(out.pos[:3], a + [0, 0, 0.05], atol=1e-12)
    np.testing.assert_allclose(out.pos[3:], pos[3:], atol=1e-12)
