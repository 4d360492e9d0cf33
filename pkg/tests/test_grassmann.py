import json
import math

import numpy as np
import pytest
from sklearn.base import clone

from oracles import argmin_angles_2d, circle_net_bounds, dense_metric
from submax.errors import DomainError, FlagWarning, ShapeError
from submax.grassmann import (
    CandidatePolicy,
    ClusterDecomposer,
    DirectionSet,
    GreedyNet,
    Subspace,
    certify_cluster,
    cluster_decompose,
    cone_membership,
    greedy_net,
    metric_distance,
    near_orthogonal_subset,
    overlap_audit,
    principal_angles,
    random_direction_set,
    repair_orthogonal,
    uniform_line_net,
)


def line(theta):
    return Subspace([math.cos(theta), math.sin(theta)])


def random_rotation(n, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class TestSubspace:
    def test_orthonormal_basis(self):
        s = Subspace.random(3, 7, seed=1)
        assert np.allclose(s.basis.T @ s.basis, np.eye(3), atol=1e-12)

    def test_projection_idempotent(self):
        rng = np.random.default_rng(0)
        s = Subspace.random(2, 5, seed=rng)
        x = rng.standard_normal((10, 5))
        assert np.allclose(s.project(s.project(x)), s.project(x), atol=1e-10)

    def test_bad_shapes(self):
        with pytest.raises(ShapeError):
            Subspace(np.ones((2, 3)))
        with pytest.raises(DomainError):
            Subspace(np.array([[1.0, 2.0], [2.0, 4.0]]))

    def test_complement(self):
        s = Subspace.random(2, 5, seed=3)
        c = s.complement()
        assert c.d == 3
        assert np.allclose(s.basis.T @ c.basis, 0, atol=1e-12)

    def test_list_round_trip(self):
        s = Subspace.random(2, 4, seed=9)
        t = Subspace.from_list(s.to_list(), 4, 2)
        assert np.array_equal(s.basis, t.basis)


class TestMetric:
    def test_identity(self):
        s = Subspace.random(2, 4, seed=0)
        assert metric_distance(s, s) == pytest.approx(0.0, abs=1e-14)

    def test_orthogonal_lines(self):
        assert metric_distance(Subspace.coordinate(2, 0), Subspace.coordinate(2, 1)) == pytest.approx(1.0)

    def test_angle_pi_over_six(self):
        assert metric_distance(line(0.0), line(math.pi / 6)) == pytest.approx(0.5, abs=1e-12)

    def test_matches_dense_eigensolve(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a, b = Subspace.random(2, 5, rng), Subspace.random(2, 5, rng)
            assert metric_distance(a, b) == pytest.approx(dense_metric(a.basis, b.basis), abs=1e-10)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            metric_distance(Subspace.random(1, 3, 0), Subspace.random(2, 3, 0))
        with pytest.raises(ShapeError):
            metric_distance(Subspace.random(1, 3, 0), Subspace.random(1, 4, 0))

    def test_axioms_random_triples(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            n = int(rng.integers(2, 6))
            d = int(rng.integers(1, n))
            a, b, c = (Subspace.random(d, n, rng) for _ in range(3))
            ab, ba = metric_distance(a, b), metric_distance(b, a)
            assert ab == ba
            assert metric_distance(a, c) <= ab + metric_distance(b, c) + 1e-10
            assert 0.0 <= ab <= 1.0

    def test_identity_of_indiscernibles_basis_change(self):
        s = Subspace.random(3, 6, seed=2)
        mix = np.linalg.qr(np.random.default_rng(1).standard_normal((3, 3)))[0]
        t = Subspace(s.basis @ mix)
        assert metric_distance(s, t) < 1e-12

    def test_rotation_invariance(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            a, b = Subspace.random(2, 5, rng), Subspace.random(2, 5, rng)
            r = random_rotation(5, rng)
            assert metric_distance(a.rotate(r), b.rotate(r)) == pytest.approx(metric_distance(a, b), abs=1e-10)


class TestPrincipalAngles:
    def test_equal(self):
        s = Subspace.random(2, 4, seed=1)
        p = principal_angles(s, s)
        assert np.allclose(p.angles, 0, atol=1e-9)
        assert p.m == 2
        assert p.basis_z.shape[1] == 2

    def test_perpendicular_lines_r3(self):
        p = principal_angles(Subspace.coordinate(3, 0), Subspace.coordinate(3, 1))
        assert p.angles[0] == pytest.approx(math.pi / 2)
        assert p.m == 0
        assert p.basis_z.shape[1] == 2

    def test_cosines_are_singular_values(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a, b = Subspace.random(3, 6, rng), Subspace.random(3, 6, rng)
            p = principal_angles(a, b)
            sv = np.linalg.svd(a.basis.T @ b.basis, compute_uv=False)
            assert np.allclose(np.cos(p.angles), sv, atol=1e-10)
            assert np.all(np.diff(p.angles) >= 0)

    def test_canonical_relation_and_z_basis(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            a, b = Subspace.random(2, 5, rng), Subspace.random(2, 5, rng)
            p = principal_angles(a, b)
            for j in range(2):
                z = p.extra[:, j - p.m] if j >= p.m else None
                if z is not None:
                    t = math.cos(p.angles[j]) * p.basis_s[:, j] + math.sin(p.angles[j]) * z
                    assert np.allclose(t, p.basis_t[:, j], atol=1e-10)
            zb = p.basis_z
            assert zb.shape[1] == 4 - p.m
            assert np.allclose(zb.T @ zb, np.eye(zb.shape[1]), atol=1e-10)
            # spans sigma + tau
            both = np.hstack([a.basis, b.basis])
            resid = both - zb @ (zb.T @ both)
            assert np.abs(resid).max() < 1e-10

    def test_shared_line_counts_intersection(self):
        rng = np.random.default_rng(9)
        common = rng.standard_normal(4)
        a = Subspace(np.column_stack([common, rng.standard_normal(4)]))
        b = Subspace(np.column_stack([common, rng.standard_normal(4)]))
        p = principal_angles(a, b)
        assert p.m == 1
        assert p.basis_z.shape[1] == 3

    def test_largest_angle_comparable_to_metric(self):
        rng = np.random.default_rng(10)
        for _ in range(500):
            n = int(rng.integers(2, 6))
            d = int(rng.integers(1, n))
            a, b = Subspace.random(d, n, rng), Subspace.random(d, n, rng)
            th = principal_angles(a, b).largest
            dist = metric_distance(a, b)
            # the metric equals sin of the largest angle; angle and sine agree within pi/2
            assert dist <= th + 1e-12
            assert th <= 2 * dist + 1e-12
            assert dist == pytest.approx(math.sin(th), abs=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_argmin_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        a, b = Subspace.random(2, 4, rng), Subspace.random(2, 4, rng)
        expected, _, _ = argmin_angles_2d(a.basis, b.basis)
        assert np.allclose(principal_angles(a, b).angles, expected, atol=2e-3)


class TestGreedyNet:
    def test_large_delta_singleton(self):
        assert len(greedy_net(1, 3, 1.0, seed=0)) == 1
        assert len(greedy_net(2, 4, 1.5, seed=0)) == 1

    @pytest.mark.parametrize("delta", [2.0**-3, 2.0**-4, 2.0**-5, 2.0**-6])
    def test_circle_cardinality_oracle(self, delta):
        net = greedy_net(1, 2, delta, seed=11)
        lo, hi = circle_net_bounds(delta)
        assert lo <= len(net) <= hi
        assert net.min_separation() >= delta - 1e-12

    def test_separation_invariant_general(self):
        net = greedy_net(2, 4, 0.4, seed=1)
        assert net.min_separation() >= 0.4 - 1e-12
        assert net.provenance == "net"

    def test_hyperplanes_separated(self):
        net = greedy_net(2, 3, 0.2, seed=2)
        assert net.d == 2 and net.n == 3
        assert net.min_separation() >= 0.2 - 1e-12

    def test_large_set_separation_via_tree(self):
        net = greedy_net(1, 3, 0.03, seed=3)
        assert len(net) > 2000
        sample = net.subset(np.arange(0, len(net), 7))
        assert sample.min_separation() >= 0.03 - 1e-12
        assert net.min_separation() >= 0.03 - 1e-12

    def test_approximate_maximality(self):
        net = greedy_net(1, 3, 0.2, seed=4)
        rng = np.random.default_rng(0)
        probes = rng.standard_normal((20000, 3))
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
        dots = np.abs(probes @ net.bases[:, :, 0].T).max(axis=1)
        uncovered = np.mean(np.sqrt(1 - np.minimum(dots, 1) ** 2) >= 0.2)
        assert uncovered < 5e-3

    def test_cardinality_band(self):
        prods = [len(greedy_net(1, 3, 2.0**-k, seed=k)) * 4.0**-k for k in (3, 4, 5)]
        assert max(prods) / min(prods) < 1.5

    def test_deterministic(self):
        a = greedy_net(1, 3, 0.1, seed=5)
        b = greedy_net(1, 3, 0.1, seed=5)
        assert np.array_equal(a.bases, b.bases)

    def test_estimator_api(self):
        est = GreedyNet(d=1, n=2, delta=0.25, random_state=0)
        assert est.get_params()["delta"] == 0.25
        est.fit()
        assert est.cardinality_ == len(est.net_)
        assert clone(est).get_params() == est.get_params()

    def test_uniform_line_net_separated(self):
        net = uniform_line_net(0.1)
        assert net.min_separation() >= 0.1 - 1e-12


class TestDirectionSet:
    def test_json_round_trip_bit_exact(self, tmp_path):
        ds = random_direction_set(2, 5, 7, seed=1)
        ds = DirectionSet(ds.bases, ds.min_separation() * 0.5, "random")
        path = tmp_path / "set.json"
        ds.to_json(path)
        back = DirectionSet.from_json(str(path))
        assert np.array_equal(back.bases, ds.bases)
        assert back.separation == ds.separation
        data = json.loads(path.read_text())
        assert set(data) >= {"n", "d", "delta", "elements"}
        assert len(data["elements"][0]) == 10

    def test_separation_checked(self):
        with pytest.raises(DomainError):
            DirectionSet([line(0.0), line(0.01)], separation=0.5)

    def test_mixed_dimensions_rejected(self):
        with pytest.raises(ShapeError):
            DirectionSet([Subspace.random(1, 3, 0), Subspace.random(2, 3, 0)])


class TestNearOrthogonal:
    def test_orthogonal_xi_keeps_everything(self):
        ds = DirectionSet([Subspace.coordinate(3, 0), Subspace.coordinate(3, 1)])
        res = near_orthogonal_subset(ds, [0, 0, 1.0], 0.1)
        assert list(res.indices) == [0, 1]
        for rep, orig in zip(res.repaired, ds):
            assert metric_distance(rep, orig) < 1e-14

    def test_normalization_flag(self):
        ds = DirectionSet([Subspace.coordinate(3, 0)])
        with pytest.warns(FlagWarning):
            res = near_orthogonal_subset(ds, [0, 0, 2.0], 0.1)
        assert res.normalized

    def test_member_at_eighth_delta(self):
        rng = np.random.default_rng(12)
        delta = 0.2
        for _ in range(100):
            n = int(rng.integers(3, 6))
            d = int(rng.integers(1, n))
            xi = rng.standard_normal(n)
            xi /= np.linalg.norm(xi)
            # build sigma with |Pi_sigma xi| = delta / 8 exactly
            perp = Subspace.random(d, n, rng).basis
            perp = perp - np.outer(xi, xi @ perp)
            base = np.linalg.qr(perp)[0]
            b1 = base[:, 0]
            u = delta / 8
            tilt = math.sqrt(1 - u * u) * b1 + u * xi
            sigma = Subspace(np.column_stack([tilt, base[:, 1:]]))
            assert sigma.project_norm(xi) == pytest.approx(u, abs=1e-12)
            res = near_orthogonal_subset(DirectionSet([sigma]), xi, delta)
            assert list(res.indices) == [0]
            rep = res.repaired[0]
            assert rep.project_norm(xi) < 1e-10
            assert metric_distance(rep, sigma) < delta / 3

    def test_repair_on_random_members(self):
        rng = np.random.default_rng(13)
        delta = 0.3
        xi = np.array([0, 0, 1.0])
        ds = random_direction_set(1, 3, 400, seed=rng)
        res = near_orthogonal_subset(ds, xi, delta)
        assert len(res.indices) > 0
        for i, rep in zip(res.indices, res.repaired):
            assert rep.project_norm(xi) < 1e-10
            assert metric_distance(rep, ds[i]) < delta / 3

    @pytest.mark.parametrize("delta", [0.2, 0.1, 0.05])
    def test_count_bound_on_nets(self, delta):
        net = greedy_net(1, 3, delta, seed=14)
        res = near_orthogonal_subset(net, [0.3, -0.2, 0.9], delta)
        c = len(res.indices) * delta ** 1
        assert 0 < c < 10


class TestCones:
    def test_orthogonal_direction_in_cone(self):
        assert cone_membership(Subspace.coordinate(3, 0), 1e-6, [0, 1.0, 0])

    def test_on_axis_not_in_cone(self):
        assert not cone_membership(Subspace.coordinate(3, 0), 1.0, [2.0, 0, 0])

    def test_derived_example(self):
        assert cone_membership(Subspace.coordinate(2, 0), 0.4, [0.05, 1.0])
        assert 0.05 / math.hypot(0.05, 1) == pytest.approx(0.04994, abs=1e-5)

    def test_zero_eta(self):
        with pytest.raises(DomainError):
            cone_membership(Subspace.coordinate(2, 0), 0.4, [0.0, 0.0])

    def test_constant_parameter(self):
        s = Subspace.coordinate(2, 0)
        eta = [0.02, 1.0]
        assert cone_membership(s, 0.1, eta)
        assert not cone_membership(s, 0.1, eta, constant=2**-4)


def planted_cluster(n_members, xi, spread, rng):
    xi = np.asarray(xi, float) / np.linalg.norm(xi)
    out = []
    for _ in range(n_members):
        v = rng.standard_normal(3)
        v -= (v @ xi) * xi
        v /= np.linalg.norm(v)
        v = v + spread * rng.uniform(-1, 1) * xi
        out.append(Subspace(v))
    return out


class TestClusters:
    def test_empty(self):
        res = cluster_decompose(DirectionSet([], n=3, d=1), 0.1)
        assert res.steps == 0 and len(res.sigma0) == 0

    def test_threshold_exceeds_cardinality(self):
        # Gr(1,2): t = ceil(N^0) = 1; a 0.5-net of lines is well spread
        net = uniform_line_net(0.7)
        res = cluster_decompose(net, 0.7)
        assert res.threshold >= 1
        assert len(res.sigma0) + sum(len(c) for c, _ in res.clusters) == len(net)

    def test_planted_cluster_is_extracted(self):
        rng = np.random.default_rng(15)
        delta = 0.1
        members = planted_cluster(64, [0, 0, 1], delta / 10, rng)
        ds = DirectionSet(members)
        res = cluster_decompose(ds, delta, CandidatePolicy(seed=1))
        assert res.clusters
        first, xi = res.clusters[0]
        assert len(first) >= res.threshold + 1
        ok, worst = certify_cluster(first, xi, delta)
        assert ok and worst < delta / 3

    def test_partition_and_step_bound(self):
        rng = np.random.default_rng(16)
        members = planted_cluster(30, [1, 1, 0], 0.005, rng) + list(random_direction_set(1, 3, 34, seed=rng))
        ds = DirectionSet(members)
        res = cluster_decompose(ds, 0.1, CandidatePolicy(seed=2))
        sizes = len(res.sigma0) + sum(len(c) for c, _ in res.clusters)
        assert sizes == len(ds)
        assert res.steps <= len(ds)
        assert np.all(np.bincount(res.labels, minlength=len(res.clusters) + 1)[1:] > res.threshold)

    def test_independent_audit(self):
        rng = np.random.default_rng(17)
        ds = random_direction_set(1, 3, 64, seed=rng)
        res = cluster_decompose(ds, 0.1, CandidatePolicy(seed=3))
        pool, _ = CandidatePolicy(seed=99, pair_minimizers=False).build(ds, 0.1)
        worst, ok = overlap_audit(res.sigma0, 0.1, pool, threshold=res.threshold)
        assert ok, worst

    def test_estimator(self):
        rng = np.random.default_rng(18)
        ds = DirectionSet(planted_cluster(40, [0, 1, 0], 0.002, rng))
        est = ClusterDecomposer(delta=0.1, random_state=0).fit(ds)
        assert est.predict().shape == (40,)
        assert est.decomposition_.steps >= 1
        with pytest.raises(DomainError):
            ClusterDecomposer().fit(np.zeros((3, 3)))


def test_repair_of_line_is_orthogonal():
    s = Subspace([1.0, 0.0, 0.05])
    rep = repair_orthogonal(s, np.array([0, 0, 1.0]))
    assert abs(rep.basis[2, 0]) < 1e-14
