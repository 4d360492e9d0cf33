import math

import numpy as np
import pytest

from oracles import disc_band_area, radial_tube_overlap
from submax.errors import DomainError
from submax.grassmann import DirectionSet, Subspace, line_mesh_net, uniform_line_net
from submax.gridops import (
    GridFunction,
    KakeyaMaximal,
    MaximalSubspaceAverage,
    NikodymMaximal,
    SubspaceAverage,
    apply_rule,
    disc_rule,
    kakeya_maximal,
    maximal_subspace_average,
    nikodym_maximal,
    norm_estimate,
    plate_average,
    rule_at_points,
    subspace_average,
    weak_norm,
)


def line(theta):
    return Subspace(np.array([math.cos(theta), math.sin(theta)]))


def gaussian(lo=-4, hi=4, h=0.05, n=2):
    return GridFunction.from_function(lambda p: np.exp(-np.sum(p**2, 1)), [lo] * n, [hi] * n, h)


def bump(p):
    r2 = np.sum(p**2, 1) / 0.25
    return np.where(r2 < 1, np.exp(-1 / np.maximum(1 - r2, 1e-300)), 0.0)


def radial_log(N, h):
    def fn(p):
        r = np.linalg.norm(p, axis=1)
        return np.where((r >= 1) & (r <= N), 1.0 / np.maximum(r, 1e-300), 0.0)
    return GridFunction.from_function(fn, [-N - 1] * 2, [N + 1] * 2, h)


class TestGridFunction:
    def test_evaluate_nodes_and_outside(self):
        f = gaussian(h=0.25)
        pts = f.points()[::37]
        assert np.allclose(f.evaluate(pts), f.values.ravel()[::37])
        assert f.evaluate(np.array([[10.0, 0.0]]))[0] == 0.0

    def test_multilinear_is_exact_on_bilinear(self):
        f = GridFunction.from_function(lambda p: 1 + 2 * p[:, 0] - p[:, 1] + 3 * p[:, 0] * p[:, 1], [0, 0], [1, 1], 0.125)
        x = np.random.default_rng(0).uniform(0, 1, (100, 2))
        assert np.allclose(f.evaluate(x), 1 + 2 * x[:, 0] - x[:, 1] + 3 * x[:, 0] * x[:, 1], atol=1e-12)

    def test_rejects_nonfinite(self):
        with pytest.raises(DomainError):
            GridFunction([[np.nan]], [0, 0], 1.0)

    def test_binary_roundtrip(self, tmp_path):
        f = GridFunction(np.random.default_rng(1).normal(size=(3, 4, 5)), [0.5, -1, 2], 0.3)
        path = tmp_path / "f.gmx"
        f.save(path)
        g = GridFunction.load(path)
        assert g.shape == f.shape and g.h == f.h
        assert np.array_equal(g.values, f.values) and np.array_equal(g.origin, f.origin)

    def test_binary_layout(self):
        f = GridFunction(np.arange(6.0).reshape(2, 3), [1.0, 2.0], 0.5)
        data = f.to_bytes()
        assert data[:5] == b"GMXA1" and data[5] == 2
        assert np.frombuffer(data[-48:], "<f8").tolist() == [0, 1, 2, 3, 4, 5]
        assert len(data) == 5 + 1 + 8 + 16 + 8 + 48

    def test_truncated_binary_rejected(self):
        with pytest.raises(DomainError):
            GridFunction.from_bytes(GridFunction(np.ones((2, 2)), [0, 0], 1.0).to_bytes()[:-3])

    def test_csv_roundtrip(self, tmp_path):
        f = GridFunction(np.random.default_rng(2).normal(size=(4, 3)), [0.0, 1.0], 0.25)
        path = tmp_path / "f.csv"
        f.to_csv(path)
        g = GridFunction.from_csv(path)
        assert np.array_equal(g.values, f.values) and g.h == f.h

    def test_csv_without_header(self):
        g = GridFunction.from_csv("0,0,1.5\n1,1,2.0\n", origin=[0, 0], h=1.0)
        assert g.values.tolist() == [[1.5, 0.0], [0.0, 2.0]]


class TestSubspaceAverage:
    def test_constant_normalization(self):
        f = GridFunction(np.ones((81, 81)), [-2, -2], 0.05)
        for theta in (0.0, 0.3, 1.1):
            assert subspace_average(f, line(theta), 1.0, np.zeros(2)) == pytest.approx(1.0, abs=1e-12)

    def test_constant_normalization_plane_in_r3(self):
        f = GridFunction(np.ones((41, 41, 41)), [-2] * 3, 0.1)
        sigma = Subspace.random(2, 3, 3)
        assert subspace_average(f, sigma, 1.5, np.zeros(3), density=3) == pytest.approx(1.0, abs=1e-12)

    def test_half_space(self):
        h, s = 0.05, 1.0
        f = GridFunction.from_function(lambda p: (p[:, 0] >= 0).astype(float), [-2, -2], [2, 2], h)
        assert abs(subspace_average(f, line(0.0), s, np.zeros(2)) - 0.5) <= h / s

    def test_full_dimension_rejected(self):
        f = gaussian(h=0.5)
        with pytest.raises(DomainError):
            subspace_average(f, Subspace(np.eye(2)), 1.0, np.zeros(2))

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(DomainError):
            subspace_average(gaussian(h=0.5), line(0), 0.0, np.zeros(2))

    def test_gaussian_line_integral(self):
        # average of exp(-t^2) over [-1, 1] is sqrt(pi) erf(1) / 2
        val = subspace_average(gaussian(h=0.02), line(0.7), 1.0, np.zeros(2), density=4)
        assert val == pytest.approx(math.sqrt(math.pi) * math.erf(1.0) / 2, rel=1e-3)

    def test_kernel_matches_direct_quadrature_at_nodes(self):
        f = gaussian(-2, 2, 0.1)
        offsets, weights = disc_rule(line(0.37), 0.8, f.h, 2)
        grid = apply_rule(f, offsets, weights)
        # nodes whose sampled disc stays inside the box
        idx = [(10, 11), (20, 20), (29, 12)]
        pts = np.array([f.origin + f.h * np.array(i) for i in idx])
        direct = rule_at_points(f, offsets, weights, pts)
        assert np.allclose([grid[i] for i in idx], direct, atol=1e-12)

    def test_l1_preserved(self):
        # separable test function: Fubini gives the same integral before and after averaging
        f = GridFunction.from_function(lambda p: np.exp(-p[:, 0] ** 2) * np.exp(-2 * p[:, 1] ** 2), [-5, -5], [5, 5], 0.05)
        for s in (0.5, 1.0):
            g = f.with_values(apply_rule(f, *disc_rule(line(0.4), s, f.h, 2)))
            assert abs(g.integral() - f.integral()) <= 2 * f.h / s * f.integral()

    def test_estimator(self):
        f = gaussian(h=0.1)
        est = SubspaceAverage(sigma=line(0.2), s=0.5).fit(f)
        out = est.transform(f)
        assert out.shape == f.shape
        assert est.get_params()["s"] == 0.5


class TestMaximal:
    def test_singleton_matches_single_average(self):
        f = gaussian(-2, 2, 0.1)
        m = maximal_subspace_average(f, [line(0.3)], [0.7], method="kernel")
        inner = m.values[9:-9, 9:-9]
        pts = GridFunction(inner, f.origin + 9 * f.h, f.h).points()
        direct = subspace_average(f, line(0.3), 0.7, pts)
        assert np.allclose(inner.ravel(), direct, atol=1e-12)

    def test_empty_rejected(self):
        f = gaussian(h=0.5)
        with pytest.raises(DomainError):
            maximal_subspace_average(f, [], [1.0])
        with pytest.raises(DomainError):
            maximal_subspace_average(f, [line(0)], [])

    def test_contraction_and_monotone(self):
        f = gaussian(-3, 3, 0.1)
        small = maximal_subspace_average(f, uniform_line_net(0.5), [1.0], method="kernel")
        big = maximal_subspace_average(f, uniform_line_net(0.2), [0.5, 1.0], method="kernel")
        net_a = uniform_line_net(0.5)
        union = list(net_a) + [line(0.123)]
        bigger = maximal_subspace_average(f, union, [1.0], method="kernel")
        assert small.values.max() <= f.values.max() + 1e-12
        assert np.all(bigger.values >= small.values - 1e-12)
        more_scales = maximal_subspace_average(f, net_a, [1.0, 0.25], method="kernel")
        assert np.all(more_scales.values >= small.values - 1e-12)
        assert big.values.max() <= 1 + 1e-12

    def test_lattice_matches_kernel(self):
        f = gaussian(-4, 4, 0.05)
        net = uniform_line_net(0.2)
        a = maximal_subspace_average(f, net, [0.5, 1.0], method="kernel")
        b = maximal_subspace_average(f, net, [0.5, 1.0], method="lattice")
        assert np.abs(a.values - b.values).max() < 5e-3

    def test_radial_symmetry(self):
        f = gaussian(-3, 3, 0.05)
        net = uniform_line_net(0.05)
        m = maximal_subspace_average(f, net, [0.5, 1.0], method="kernel")
        ang = np.linspace(0, 2 * math.pi, 360, endpoint=False)
        for r in (0.5, 1.0, 1.5):
            vals = m.evaluate(r * np.stack([np.cos(ang), np.sin(ang)], 1))
            assert (vals.max() - vals.min()) / vals.max() <= 0.05

    def test_thickness_variant_differs_from_thin(self):
        f = gaussian(-3, 3, 0.05)
        thin = maximal_subspace_average(f, [line(0.0)], [1.0], method="kernel")
        thick = maximal_subspace_average(f, [line(0.0)], [1.0], thickness=0.5)
        # averaging across a Gaussian ridge lowers the peak
        assert thick.values.max() < thin.values.max() - 1e-3

    def test_threads_deterministic(self):
        f = gaussian(-2, 2, 0.1)
        net = uniform_line_net(0.3)
        a = maximal_subspace_average(f, net, [0.5], method="kernel", threads=1)
        b = maximal_subspace_average(f, net, [0.5], method="kernel", threads=3)
        assert np.array_equal(a.values, b.values)

    def test_estimator(self):
        f = gaussian(-2, 2, 0.1)
        est = MaximalSubspaceAverage(Sigma=uniform_line_net(0.3), scales=[0.5]).fit(f)
        assert np.allclose(est.transform(f).values,
                           maximal_subspace_average(f, uniform_line_net(0.3), [0.5]).values)
        with pytest.raises(TypeError):
            est.fit(np.ones((3, 3)))


class TestNikodym:
    def test_constant(self):
        f = GridFunction(np.ones((121, 121)), [-3, -3], 0.05)
        out = nikodym_maximal(f, 0.2, line_mesh_net(0.05), method="kernel")
        assert abs(out.values[60, 60] - 1.0) < 1e-12

    def test_delta_range(self):
        f = gaussian(h=0.5)
        for bad in (0.0, -0.1, 0.6):
            with pytest.raises(DomainError):
                nikodym_maximal(f, bad, line_mesh_net(0.01))

    def test_mesh_guard(self):
        with pytest.raises(DomainError):
            nikodym_maximal(gaussian(h=0.5), 0.2, uniform_line_net(0.5))

    def test_domination(self):
        f = gaussian(-3, 3, 0.1)
        net = line_mesh_net(0.05)
        out = nikodym_maximal(f, 0.2, net, method="kernel")
        pts = f.points()[::41]
        for sigma in list(net)[::5]:
            single = plate_average(f, sigma, 0.2, pts)
            assert np.all(out.values.ravel()[::41] >= single - 1e-12)

    def test_lattice_matches_kernel(self):
        f = gaussian(-4, 4, 0.05)
        net = line_mesh_net(0.05)
        a = nikodym_maximal(f, 0.2, net, method="kernel")
        b = nikodym_maximal(f, 0.2, net, method="lattice")
        assert np.abs(a.values - b.values).max() < 5e-3

    def test_ball_chord(self):
        # at distance r from the unit ball center the radial tube captures the chord beyond r - 1
        delta, h = 0.1, 0.0125
        f = GridFunction.from_function(lambda p: (np.sum(p**2, 1) <= 1).astype(float), [-1.2, -1.2], [3.2, 1.2], h)
        out = nikodym_maximal(f, delta, line_mesh_net(delta / 4), method="lattice")
        for r in (1.25, 1.5, 1.75):
            expect = radial_tube_overlap(delta, r) / (4 * delta)
            got = out.evaluate(np.array([[r, 0.0]]))[0]
            assert got == pytest.approx(expect, rel=0.1)
        assert out.evaluate(np.array([[3.1, 0.0]]))[0] == 0.0

    def test_estimator_default_net(self):
        f = gaussian(-2, 2, 0.1)
        est = NikodymMaximal(delta=0.25).fit(f)
        assert est.transform(f).shape == f.shape


class TestKakeya:
    def test_constant(self):
        f = GridFunction(np.ones((101, 101)), [-5, -5], 0.1)
        vals = kakeya_maximal(f, 0.2, uniform_line_net(0.3), centers=np.zeros((1, 2)))
        assert np.allclose(vals.values, 1.0, atol=1e-12)

    def test_ball_tube(self):
        delta, h = 0.1, 0.02
        f = GridFunction.from_function(lambda p: (np.sum(p**2, 1) <= 1).astype(float), [-2.2, -2.2], [2.2, 2.2], h)
        net = uniform_line_net(0.3)
        vals = kakeya_maximal(f, delta, net).values
        expect = disc_band_area(delta) / (4 * delta)
        assert np.allclose(vals, expect, rtol=0.03)

    def test_centers_must_cover(self):
        f = GridFunction.from_function(lambda p: (np.sum(p**2, 1) <= 1).astype(float), [-1.5, -1.5], [1.5, 1.5], 0.1)
        with pytest.raises(DomainError):
            kakeya_maximal(f, 0.1, uniform_line_net(0.3))

    def test_empty_centers(self):
        with pytest.raises(DomainError):
            kakeya_maximal(gaussian(h=0.5), 0.1, uniform_line_net(0.3), centers=np.zeros((0, 2)))

    def test_lattice_matches_kernel(self):
        f = GridFunction.from_function(bump, [-2, -2], [2, 2], 0.05)
        net = uniform_line_net(0.3)
        a = kakeya_maximal(f, 0.2, net, method="kernel").values
        b = kakeya_maximal(f, 0.2, net, method="lattice").values
        assert np.allclose(a, b, rtol=0.02)

    def test_small_ball_growth_in_r3(self):
        # f = indicator of a delta-ball: K f ~ delta on every line, ||f||_2 ~ delta^{3/2}
        ratios = []
        deltas = [0.4, 0.2, 0.1]
        rng = np.random.default_rng(0)
        net = DirectionSet([Subspace(v) for v in rng.normal(size=(3, 3))], validate=False)
        for delta in deltas:
            h = delta / 3
            f = GridFunction.from_function(lambda p: (np.sum(p**2, 1) <= delta**2).astype(float),
                                           [-1.25 * delta] * 3, [1.25 * delta] * 3, h)
            centers = np.array([[0.0, 0.0, 0.0]])
            k = kakeya_maximal(f, delta, net, centers=centers)
            ratios.append(k.norm(2) / f.norm(2))
        slope = np.polyfit(np.log(deltas), np.log(ratios), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.1)

    def test_estimator(self):
        f = GridFunction.from_function(bump, [-2, -2], [2, 2], 0.1)
        est = KakeyaMaximal(delta=0.2, net=uniform_line_net(0.3)).fit(f)
        assert est.predict(f).shape == (len(uniform_line_net(0.3)),)


class TestNorms:
    def test_identity_and_scaling(self):
        f = gaussian(h=0.1)
        assert norm_estimate(f, f, "strong", 2).value == pytest.approx(1.0, abs=1e-14)
        assert norm_estimate(f.with_values(2 * f.values), f, "strong", 3).value == pytest.approx(2.0, abs=1e-14)

    def test_weak_indicator(self):
        f = GridFunction.from_function(lambda p: np.all((p >= 0) & (p <= 1), axis=1).astype(float), [-1, -1], [2, 2], 0.05)
        est = norm_estimate(f, f, "weak", 2)
        assert est.value == pytest.approx(1.0, abs=1e-12)
        assert est.kind == "weak-p" and est.level == 1.0

    def test_weak_brute_force(self):
        g = GridFunction(np.random.default_rng(0).exponential(size=(20, 20)), [0, 0], 0.1)
        val, *_ = weak_norm(g, 1.5)
        lam = np.linspace(0, g.values.max(), 20001)[:-1]
        brute = max(l * (np.sum(g.values > l) * g.cell_volume) ** (1 / 1.5) for l in lam)
        assert brute <= val + 1e-12
        assert val - brute < 1e-3 * val

    def test_zero_norm_rejected(self):
        z = GridFunction(np.zeros((3, 3)), [0, 0], 1.0)
        with pytest.raises(DomainError):
            norm_estimate(z, z)

    def test_p_below_one_rejected(self):
        f = gaussian(h=0.5)
        with pytest.raises(DomainError):
            norm_estimate(f, f, p=0.5)

    def test_json_record(self):
        import json
        f = gaussian(h=0.5)
        rec = json.loads(norm_estimate(f, f, "weak", 2, "gauss").to_json())
        assert rec["function_id"] == "gauss" and rec["kind"] == "weak-p"

    def test_refinement_stability(self):
        # halving h moves the strong quotient on the radial log example by < 5%
        vals = []
        net = uniform_line_net(1 / 8)
        for h in (0.25, 0.125):
            f = radial_log(8, h)
            m = maximal_subspace_average(f, net, [1, 2, 4, 8], method="lattice")
            vals.append(norm_estimate(m, f, "strong", 2).value)
        assert abs(vals[1] - vals[0]) / vals[1] < 0.05
