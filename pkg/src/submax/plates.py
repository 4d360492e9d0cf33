"""Plates: thickened, translated and scaled subspace discs.

A plate ``center + s*T_delta(sigma)`` is the set of points x with
``|Pi_sigma(x - center)| <= s`` and ``|Pi_sigma_perp(x - center)| < s*delta``.
The module measures and bounds plate intersections, builds covering dilates
from principal angles, and handles the sheared codimension-one plates
``P(I, K, v)`` whose slices are hyperplane pieces over an axis-parallel cube.
"""

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from ._validation import check_int, check_points, check_positive, check_vector
from .errors import DomainError, ShapeError
from .grassmann import Subspace, complement_basis, principal_angles

MC_BLOCK = 1 << 15
SHEAR_LIMIT = math.pi / 16


def ball_volume(k):
    """Lebesgue measure of the unit ball in R^k (1 for k = 0)."""
    return math.pi ** (k / 2) / math.gamma(k / 2 + 1)


class Plate:
    """``center + scale * T_thickness(subspace)``; closed in long directions, open in short ones."""

    __slots__ = ("subspace", "center", "scale", "thickness", "_perp")

    def __init__(self, subspace, center=None, scale=1.0, thickness=0.1):
        if not isinstance(subspace, Subspace):
            subspace = Subspace(subspace)
        n = subspace.n
        if subspace.d >= n:
            raise DomainError("a plate needs d < n")
        center = np.zeros(n) if center is None else check_vector(center, n, "center")
        self.subspace = subspace
        self.center = center
        self.center.setflags(write=False)
        self.scale = check_positive(scale, "scale")
        self.thickness = check_positive(thickness, "thickness", strict=False)
        self._perp = complement_basis(subspace.basis)

    @property
    def n(self):
        return self.subspace.n

    @property
    def d(self):
        return self.subspace.d

    @property
    def perp_basis(self):
        return self._perp

    def local(self, points):
        """Coordinates (along sigma, along sigma_perp) of points relative to the center."""
        x = check_points(points, self.n) - self.center
        return x @ self.subspace.basis, x @ self._perp

    def contains(self, points):
        """Membership mask for an array of points (shape (k, n) or (n,))."""
        single = np.ndim(points) == 1
        a, b = self.local(points)
        s = self.scale
        inside = (np.einsum("ij,ij->i", a, a) <= s * s) & (np.einsum("ij,ij->i", b, b) < (s * self.thickness) ** 2)
        return bool(inside[0]) if single else inside

    def volume(self):
        s, d, n = self.scale, self.d, self.n
        return ball_volume(d) * s**d * ball_volume(n - d) * (s * self.thickness) ** (n - d)

    def frame_box(self):
        """Half-widths of the circumscribed box in the plate's own frame (sigma first)."""
        return np.concatenate([np.full(self.d, self.scale), np.full(self.n - self.d, self.scale * self.thickness)])

    def bounding_box(self):
        """Axis-aligned (lower, upper) corners."""
        half = self.scale * np.linalg.norm(self.subspace.basis, axis=1)
        half = half + self.scale * self.thickness * np.linalg.norm(self._perp, axis=1)
        return self.center - half, self.center + half

    def dilate(self, factor):
        """Isotropic dilate about the center: scale multiplied, eccentricity kept."""
        return Plate(self.subspace, self.center, self.scale * check_positive(factor, "factor"), self.thickness)

    def sample(self, count, rng):
        """Uniform points of the frame box (not of the plate)."""
        u = rng.uniform(-1.0, 1.0, size=(count, self.n)) * self.frame_box()
        return self.center + u[:, :self.d] @ self.subspace.basis.T + u[:, self.d:] @ self._perp.T

    def sample_inside(self, count, rng):
        """Uniform points of the plate itself (product of two balls)."""
        return self.center + _ball_points(count, self.d, self.scale, rng) @ self.subspace.basis.T + \
            _ball_points(count, self.n - self.d, self.scale * self.thickness, rng) @ self._perp.T

    def to_dict(self):
        return {"sigma": {"n": self.n, "d": self.d, "basis": self.subspace.to_list()},
                "center": [float(c) for c in self.center], "s": self.scale, "delta": self.thickness}

    @classmethod
    def from_dict(cls, data):
        sig = data["sigma"]
        sub = Subspace.from_list(sig["basis"], sig["n"], sig["d"])
        return cls(sub, data["center"], data["s"], data["delta"])

    def __repr__(self):
        return f"Plate(d={self.d}, n={self.n}, s={self.scale:g}, delta={self.thickness:g})"


def _ball_points(count, k, radius, rng):
    if k == 0:
        return np.zeros((count, 0))
    g = rng.standard_normal((count, k))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / k)
    return g * r[:, None]


def plates_to_json(plates, path=None):
    text = json.dumps([p.to_dict() for p in plates])
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def plates_from_json(text_or_path):
    if os.path.exists(str(text_or_path)):
        with open(text_or_path) as fh:
            text_or_path = fh.read()
    return [Plate.from_dict(item) for item in json.loads(text_or_path)]


def plate_membership(p, x):
    return p.contains(x)


def _check_same(p, q):
    if (p.d, p.n) != (q.d, q.n):
        raise ShapeError(f"plates live in different Grassmannians: Gr({p.d},{p.n}) vs Gr({q.d},{q.n})")
    if not math.isclose(p.thickness, q.thickness, rel_tol=1e-12, abs_tol=0.0):
        raise DomainError("plates must share the thickness delta")


def intersection_volume_bound(p, q):
    """``delta^(n-m) / prod_{j>m} max(delta, theta_j)``, rescaled by ``s^n``; no implicit constant."""
    _check_same(p, q)
    if not math.isclose(p.scale, q.scale, rel_tol=1e-12):
        raise DomainError("plates must share the scale")
    dec = principal_angles(p.subspace, q.subspace)
    delta = p.thickness
    bound = delta ** (p.n - dec.m)
    for theta in dec.angles[dec.m:]:
        bound /= max(delta, float(theta))
    return bound * p.scale**p.n


def _boxes_disjoint(p, q):
    lo_p, hi_p = p.bounding_box()
    lo_q, hi_q = q.bounding_box()
    return bool(np.any(hi_p < lo_q) or np.any(hi_q < lo_p))


def _frame(p):
    return np.column_stack([p.subspace.basis, p.perp_basis])


def clipped_frame_box(p, q):
    """Box in p's frame coordinates containing both frame boxes' intersection.

    Each side is found by a linear program over the polytope
    ``{|y| <= h_p, |F_q^T (c_p + F_p y - c_q)| <= h_q}``. Returns ``None``
    when the polytope is empty.
    """
    hp, hq = p.frame_box(), q.frame_box()
    rot = _frame(q).T @ _frame(p)
    shift = _frame(q).T @ (p.center - q.center)
    a_ub = np.vstack([rot, -rot])
    b_ub = np.concatenate([hq - shift, hq + shift])
    bounds = list(zip(-hp, hp))
    lo, hi = np.empty(p.n), np.empty(p.n)
    for i in range(p.n):
        c = np.zeros(p.n)
        c[i] = 1.0
        res = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
        if res.status == 2:
            return None
        lo[i] = res.x[i]
        hi[i] = -linprog(-c, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs").fun
    pad = 1e-9 * (hi - lo) + 1e-14 * hp
    return np.maximum(lo - pad, -hp), np.minimum(hi + pad, hp)


def mc_intersection_volume(p, q, samples=100_000, seed=None, threads=1):
    """Hit-or-miss estimate of ``|p & q|``.

    Points are uniform in p's frame box, clipped to the extent of its
    intersection with q's frame box (a superset of p & q, so the estimate is
    unbiased). Returns ``(estimate, stderr)``. Blocks of ``MC_BLOCK`` samples
    get their own child seeds, so the result does not depend on ``threads``.
    """
    _check_same(p, q)
    samples = check_int(samples, "samples", 1000)
    if _boxes_disjoint(p, q):
        return 0.0, 0.0
    box = clipped_frame_box(p, q)
    if box is None:
        return 0.0, 0.0
    lo, hi = box
    if np.any(hi <= lo):
        return 0.0, 0.0
    frame = _frame(p)
    sizes = [MC_BLOCK] * (samples // MC_BLOCK)
    if samples % MC_BLOCK:
        sizes.append(samples % MC_BLOCK)
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))

    def block(args):
        size, ss = args
        y = np.random.default_rng(ss).uniform(lo, hi, size=(size, p.n))
        pts = p.center + y @ frame.T
        return int(np.count_nonzero(p.contains(pts) & q.contains(pts)))

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            hits = sum(ex.map(block, zip(sizes, seeds)))
    else:
        hits = sum(map(block, zip(sizes, seeds)))
    vol = float(np.prod(hi - lo))
    frac = hits / samples
    return vol * frac, vol * math.sqrt(frac * (1.0 - frac) / samples)


def append_mc_csv(path, rows):
    """Append ``(pair_id, bound, mc, stderr)`` rows with the ratio column, writing a header if new."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["pair_id", "bound", "mc", "stderr", "ratio"])
        for pair_id, bound, mc, err in rows:
            w.writerow([pair_id, repr(float(bound)), repr(float(mc)), repr(float(err)), repr(float(mc) / float(bound))])


@dataclass(frozen=True)
class CoveringDilate:
    """Box around ``base.center`` in the canonical frame of (sigma, tau).

    Coordinates are ``x.s_j`` (all j), ``x.z_j`` (nonzero angles) and the norm
    of the part in the complement of span(sigma, tau). ``stated`` holds the
    half-widths 3, 3max(delta, theta_j), 3delta; ``certified`` holds half-widths
    that provably contain every plate along tau meeting the base (see
    ``certified_widths``). ``contains`` uses the certified box unless
    ``use_stated`` is set.
    """

    base: Plate
    decomposition: object
    stated: tuple
    certified: tuple
    use_stated: bool = False

    def widths(self):
        return self.stated if self.use_stated else self.certified

    def coordinates(self, points):
        x = check_points(points, self.base.n) - self.base.center
        dec = self.decomposition
        along = x @ dec.basis_s
        across = x @ dec.extra
        rest = x - x @ dec.basis_z @ dec.basis_z.T
        return along, across, np.linalg.norm(rest, axis=1)

    def contains(self, points):
        single = np.ndim(points) == 1
        along, across, rest = self.coordinates(points)
        w_s, w_z, w_r = self.widths()
        inside = np.all(np.abs(along) < w_s, axis=1) & np.all(np.abs(across) < w_z, axis=1) & (rest < w_r)
        return bool(inside[0]) if single else inside

    def escapes(self, points):
        """Points outside the box (used by sampling audits)."""
        pts = check_points(points, self.base.n)
        return pts[~self.contains(pts)]


def certified_widths(dec, delta, scale=1.0):
    """Half-widths for which every plate along tau meeting ``T_delta(sigma)`` is covered.

    With p in both plates and y in the tau plate, y - p lies in the 2-dilate of
    the tau plate about the origin. Splitting y - p along tau and tau_perp gives
    ``|y.s_j| <= 1 + 2cos(theta_j) + 2delta sin(theta_j)``,
    ``|y.z_j| <= delta + 2sin(theta_j) + 2delta cos(theta_j)`` and
    ``|rest| < 3delta``. A relative margin of 1e-9 absorbs roundoff.
    """
    d = dec.basis_s.shape[1]
    cos = np.cos(dec.angles)
    sin = np.sin(dec.angles)
    pad = 1.0 + 1e-9
    w_s = scale * pad * (1.0 + 2.0 * cos + 2.0 * delta * sin)
    th = dec.angles[dec.m:]
    w_z = scale * pad * (delta + 2.0 * np.sin(th) + 2.0 * delta * np.cos(th))
    w_r = scale * pad * 3.0 * delta
    assert w_s.shape == (d,)
    return w_s, w_z, w_r


def covering_dilate(p, tau, use_stated=False):
    """Box around p covering every plate along ``tau`` (same scale and thickness) that meets p."""
    if not isinstance(tau, Subspace):
        tau = Subspace(tau)
    if (tau.d, tau.n) != (p.d, p.n):
        raise ShapeError("tau must lie in the same Grassmannian as the plate")
    dec = principal_angles(p.subspace, tau)
    delta, s = p.thickness, p.scale
    th = dec.angles[dec.m:]
    stated = (np.full(p.d, 3.0 * s), 3.0 * s * np.maximum(delta, th), 3.0 * s * delta)
    return CoveringDilate(p, dec, stated, certified_widths(dec, delta, s), use_stated)


class ShearedPlate:
    """The codimension-one plate ``P(I, K, v)`` in R^n, n = d + 1.

    ``I`` is a cube in the first d coordinates with center ``c_I`` and side
    ``ell``, axis-parallel unless an orthogonal d x d ``frame`` is given (its
    columns are the cube's axes). ``K = [k0, k1)`` is the height interval and
    ``v`` the unit normal, within pi/16 of e_n. The t-slice is the piece of
    the hyperplane ``v_perp + (c_I, t)`` above I, so ``(x, y)`` lies in the
    plate iff x is in I and ``y + w.(x - c_I)`` is in K with ``w = v'/v_n``.
    Cubes and intervals are half-open so that dyadic families tile.
    """

    __slots__ = ("c_I", "ell", "K", "v", "w", "frame", "id")

    def __init__(self, c_I, ell, K, v, plate_id=None, frame=None):
        c_I = check_vector(c_I, name="c_I")
        v = check_vector(v, c_I.size + 1, "v")
        v = v / np.linalg.norm(v)
        if v[-1] < 0:
            v = -v
        if math.acos(min(1.0, v[-1])) > SHEAR_LIMIT + 1e-12:
            raise DomainError("normal v must be within pi/16 of e_n")
        k0, k1 = float(K[0]), float(K[1])
        ell = check_positive(ell, "ell")
        if not k1 > k0:
            raise DomainError("K must be a nondegenerate interval")
        if k1 - k0 > ell * (1 + 1e-12):
            raise DomainError("need |K| <= ell_I")
        if frame is not None:
            frame = np.asarray(frame, dtype=float)
            if frame.shape != (c_I.size, c_I.size) or not np.allclose(frame.T @ frame, np.eye(c_I.size), atol=1e-10):
                raise ShapeError("frame must be an orthogonal d x d matrix")
        self.c_I = c_I
        self.ell = ell
        self.K = (k0, k1)
        self.v = v
        self.w = v[:-1] / v[-1]
        self.frame = frame
        self.id = plate_id

    @property
    def d(self):
        return self.c_I.size

    @property
    def n(self):
        return self.c_I.size + 1

    @property
    def height(self):
        return self.K[1] - self.K[0]

    @property
    def center(self):
        return np.append(self.c_I, 0.5 * (self.K[0] + self.K[1]))

    def _axes(self):
        return np.eye(self.d) if self.frame is None else self.frame

    def volume(self):
        return self.ell**self.d * self.height

    def t_of(self, points):
        """Slice parameter t of each point (the t with the point on v_perp + (c_I, t))."""
        x = check_points(points, self.n)
        return x[:, -1] + (x[:, :-1] - self.c_I) @ self.w

    def in_base(self, points):
        x = check_points(points, self.n)
        rel = x[:, :-1] - self.c_I
        if self.frame is not None:
            rel = rel @ self.frame
        rel = rel + 0.5 * self.ell
        return np.all((rel >= 0) & (rel < self.ell), axis=1)

    def contains(self, points):
        single = np.ndim(points) == 1
        t = self.t_of(points)
        inside = self.in_base(points) & (t >= self.K[0]) & (t < self.K[1])
        return bool(inside[0]) if single else inside

    def base_half_extent(self):
        """Half-widths of the axis-aligned box around the base cube."""
        return 0.5 * self.ell * np.sum(np.abs(self._axes()), axis=1)

    def height_range(self):
        """Range of the last coordinate over the closure of the plate."""
        spread = 0.5 * self.ell * float(np.sum(np.abs(self._axes().T @ self.w)))
        return self.K[0] - spread, self.K[1] + spread

    def bounding_box(self):
        lo_h, hi_h = self.height_range()
        half = self.base_half_extent()
        return np.append(self.c_I - half, lo_h), np.append(self.c_I + half, hi_h)

    def sample_inside(self, count, rng):
        x = self.c_I + (self.ell * (rng.random((count, self.d)) - 0.5)) @ self._axes().T
        t = self.K[0] + self.height * rng.random(count)
        y = t - (x - self.c_I) @ self.w
        return np.column_stack([x, y])

    def dilate(self, factor):
        """``factor * Q`` about the center: base side and height both multiplied."""
        factor = check_positive(factor, "factor")
        ck = 0.5 * (self.K[0] + self.K[1])
        h = 0.5 * self.height * factor
        return ShearedPlate(self.c_I, self.ell * factor, (ck - h, ck + h), self.v, self.id, self.frame)

    def with_base(self, c_I, ell, frame=None):
        """Same normal and height interval over a different base cube (the plane is kept)."""
        c_I = check_vector(c_I, self.d, "c_I")
        # keep the plane of each slice: t is measured from c_I, so shift K
        shift = float((c_I - self.c_I) @ self.w)
        out = ShearedPlate.__new__(ShearedPlate)
        out.c_I, out.ell, out.v, out.w, out.id = c_I, float(ell), self.v, self.w, self.id
        out.K = (self.K[0] - shift, self.K[1] - shift)
        out.frame = None if frame is None else np.asarray(frame, dtype=float)
        return out

    def shear_to_vertical(self, w_ref):
        """Image under the volume-preserving shear that makes slope ``w_ref`` vertical.

        The map ``(x, y) -> (x, y + w_ref.x)`` sends a plate of slope w to one of
        slope ``w - w_ref`` with the same base and K shifted by ``w_ref.c_I``.
        """
        w_new = self.w - w_ref
        v = np.append(w_new, 1.0)
        shift = float(w_ref @ self.c_I)
        out = ShearedPlate.__new__(ShearedPlate)
        out.c_I, out.ell, out.frame, out.id = self.c_I, self.ell, self.frame, self.id
        out.K = (self.K[0] + shift, self.K[1] + shift)
        out.v = v / np.linalg.norm(v)
        out.w = w_new
        return out

    def to_dict(self):
        out = {"c_I": [float(c) for c in self.c_I], "ell": self.ell, "K": list(self.K),
               "v": [float(c) for c in self.v], "id": self.id}
        if self.frame is not None:
            out["frame"] = self.frame.tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(data["c_I"], data["ell"], data["K"], data["v"], data.get("id"), data.get("frame"))

    def __repr__(self):
        return f"ShearedPlate(c_I={self.c_I.tolist()}, ell={self.ell:g}, K={self.K}, id={self.id})"


def slice_profile(q, base_center, base_side, heights, resolution=128):
    """d-dimensional measure of ``q & (I x {a})`` for each height a; q already sheared vertical.

    ``I`` is the axis-parallel cube with the given center and side. Midpoint
    quadrature with ``resolution`` points per axis over the box around q's
    base clipped to I.
    """
    d = q.d
    half = q.base_half_extent()
    lo = np.maximum(q.c_I - half, np.asarray(base_center) - 0.5 * base_side)
    hi = np.minimum(q.c_I + half, np.asarray(base_center) + 0.5 * base_side)
    heights = np.atleast_1d(np.asarray(heights, dtype=float))
    if np.any(hi <= lo):
        return np.zeros(heights.size)
    axes = [lo[i] + (np.arange(resolution) + 0.5) * (hi[i] - lo[i]) / resolution for i in range(d)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    grid = grid[q.in_base(np.column_stack([grid, np.zeros(len(grid))]))]
    cell = float(np.prod((hi - lo) / resolution))
    offs = (grid - q.c_I) @ q.w
    out = np.empty(heights.size)
    for i, a in enumerate(heights):
        t = a + offs
        out[i] = cell * np.count_nonzero((t >= q.K[0]) & (t < q.K[1]))
    return out


def sheared_slice_measure(q, hat_r, a, resolution=128):
    """Measure of ``q & p(I_{hat_r}, a, v_{hat_r})`` after shearing ``v_{hat_r}`` to e_n.

    A height outside the vertical extent of q gives 0.
    """
    qs = q.shear_to_vertical(hat_r.w)
    # the slice p(I, a, v) becomes the horizontal slice at height a + w.c_I
    height = a + float(hat_r.w @ hat_r.c_I)
    return float(slice_profile(qs, hat_r.c_I, hat_r.ell, [height], resolution)[0])


def slice_ratio(q, hat_r, K, samples=257, resolution=128):
    """``max_a slice(a)`` divided by ``(1/|K|) * integral over 3K of slice(a)``.

    Both sides are computed after shearing ``v_{hat_r}`` to e_n; K is given in
    the slice parameter of ``hat_r`` and 3K is its concentric triple.
    """
    qs = q.shear_to_vertical(hat_r.w)
    shift = float(hat_r.w @ hat_r.c_I)
    k0, k1 = K[0] + shift, K[1] + shift
    length = k1 - k0
    lo_h, hi_h = qs.height_range()
    top = np.linspace(lo_h, hi_h, samples)
    peak = float(slice_profile(qs, hat_r.c_I, hat_r.ell, top, resolution).max())
    step = 3 * length / samples
    grid = k0 - length + (np.arange(samples) + 0.5) * step
    mass = float(slice_profile(qs, hat_r.c_I, hat_r.ell, grid, resolution).sum()) * step
    if mass == 0.0:
        return math.inf if peak > 0 else 0.0
    return peak / (mass / length)
