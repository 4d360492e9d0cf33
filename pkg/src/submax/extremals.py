"""Test functions and sets that drive the maximal operators to their worst case.

* ``radial_log_example``: ``|x|^{-1}`` on an annulus, the planar log N example.
* ``perron_kakeya``: a Perron-tree family of delta x 1 tubes whose union is
  small while the tripled tubes cover a set of size about one.
* ``cm_construction``: the plate family Sigma_M = {span(omega, v)} and the
  slab C_M for 1 < d < n, evaluated exactly by one-dimensional quadrature.
* ``tensor_extend``: product of a planar function with a unit cube.
"""

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import betainc, roots_legendre
from shapely import Polygon, union_all
from shapely.geometry import LineString

from ._validation import as_generator, check_int, check_positive
from .errors import DomainError, FlagWarning
from .grassmann import DirectionSet, Subspace
from .gridops import GridFunction

MAX_SAMPLES = 1 << 28

# constants of the C_M construction
NET_CONSTANT = 2.0**-18
ANGLE_CONSTANT = 2.0**-8
RHO_LOW = 2.0**-8
RHO_HIGH = 2.0**-7
SLAB_CONSTANT = 2.0**-10
THIN_CONSTANT = 2.0**-12
ASYMPTOTIC_M = 2.0**8


def ball_volume(k):
    return math.pi ** (k / 2) / math.gamma(k / 2 + 1)


# ----------------------------------------------------------------------------
# radial log example


def radial_log_example(N, h=0.25, c=1.0, half_width=None):
    """``f(x) = |x|^{-1}`` on ``1 <= |x| <= cN`` in the plane.

    The grid is centered at 0 with the given half-width (default ``2 c N``,
    so it holds the support of every average at scales up to ``cN``).
    """
    N = check_positive(N, "N")
    c = check_positive(c, "c")
    h = check_positive(h, "h")
    outer = c * N
    half_width = 2 * outer if half_width is None else check_positive(half_width, "half_width")
    if half_width < outer + h:
        raise DomainError(f"grid half-width {half_width} does not contain the annulus of radius {outer}")
    m = int(math.floor(half_width / h + 1e-9))

    def fn(p):
        r = np.linalg.norm(p, axis=1)
        return np.where((r >= 1.0) & (r <= outer), 1.0 / np.maximum(r, 1.0), 0.0)

    return GridFunction.from_function(fn, [-m * h] * 2, [m * h] * 2, h)


def radial_log_norm2(N, c=1.0):
    """Exact ``||f||_2^2 = 2 pi log(cN)`` for the continuum example."""
    return 2 * math.pi * math.log(max(c * N, 1.0))


# ----------------------------------------------------------------------------
# Perron tree


@dataclass
class Tube:
    center: np.ndarray
    direction: np.ndarray
    length: float
    width: float

    def corners(self):
        u = self.direction
        w = np.array([-u[1], u[0]])
        a, b = 0.5 * self.length * u, 0.5 * self.width * w
        c = self.center
        return np.array([c - a - b, c + a - b, c + a + b, c - a + b])

    def polygon(self):
        return Polygon(self.corners())

    def contains(self, points):
        p = np.atleast_2d(points) - self.center
        u = self.direction
        along = p @ u
        across = p @ np.array([-u[1], u[0]])
        return (np.abs(along) <= 0.5 * self.length) & (np.abs(across) <= 0.5 * self.width)

    def dilate(self, factor):
        return Tube(self.center.copy(), self.direction.copy(), self.length * factor, self.width)

    def to_dict(self):
        return {"center": [float(v) for v in self.center], "direction": [float(v) for v in self.direction],
                "length": self.length, "width": self.width}

    @classmethod
    def from_dict(cls, data):
        return cls(np.array(data["center"], float), np.array(data["direction"], float),
                   float(data["length"]), float(data["width"]))


@dataclass
class TubeFamily:
    """Tubes of a common width; ``union_area`` is exact (polygon union)."""

    tubes: list
    delta: float
    arc: tuple
    alpha: float = float("nan")
    depth: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tubes)

    @property
    def directions(self):
        return np.array([t.direction for t in self.tubes])

    def angles(self):
        return np.sort(np.arctan2(self.directions[:, 1], self.directions[:, 0]))

    def direction_gaps(self):
        return np.diff(self.angles())

    def direction_set(self):
        return DirectionSet([Subspace(u) for u in self.directions], validate=False)

    def union(self):
        return union_all([t.polygon() for t in self.tubes])

    def union_area(self):
        return float(self.union().area)

    def total_area(self):
        return float(sum(t.length * t.width for t in self.tubes))

    def dilated(self, factor=3.0):
        """Same centers and directions, ``factor`` times the length."""
        return TubeFamily([t.dilate(factor) for t in self.tubes], self.delta, self.arc, self.alpha, self.depth,
                          {"dilation": factor})

    def scaled(self, factor):
        """The family under ``x -> factor x`` (lengths, widths and delta scale too)."""
        tubes = [Tube(factor * t.center, t.direction.copy(), factor * t.length, factor * t.width) for t in self.tubes]
        meta = dict(self.meta, scale=self.meta.get("scale", 1.0) * factor)
        return TubeFamily(tubes, self.delta * factor, self.arc, self.alpha, self.depth, meta)

    def kstar(self, factor=3.0):
        """``union of dilated tubes minus the union of tubes`` as a polygon."""
        return self.dilated(factor).union().difference(self.union())

    def bounding_box(self):
        pts = np.concatenate([t.corners() for t in self.tubes])
        return pts.min(axis=0), pts.max(axis=0)

    def contains(self, points):
        pts = np.atleast_2d(points)
        out = np.zeros(len(pts), dtype=bool)
        for t in self.tubes:
            out |= t.contains(pts)
        return out

    def rasterize(self, h, margin=0.0, lower=None, upper=None):
        """Indicator of the union at grid nodes (exact point-in-rectangle tests)."""
        lo, hi = self.bounding_box()
        lo = lo - margin if lower is None else np.asarray(lower, float)
        hi = hi + margin if upper is None else np.asarray(upper, float)
        lo = np.floor(lo / h) * h
        shape = tuple(int(math.ceil((b - a) / h)) + 1 for a, b in zip(lo, hi))
        values = np.zeros(shape)
        xs = lo[0] + h * np.arange(shape[0])
        ys = lo[1] + h * np.arange(shape[1])
        for t in self.tubes:
            c = t.corners()
            i0, i1 = np.searchsorted(xs, [c[:, 0].min(), c[:, 0].max()])
            j0, j1 = np.searchsorted(ys, [c[:, 1].min(), c[:, 1].max()])
            if i0 >= i1 or j0 >= j1:
                continue
            X, Y = np.meshgrid(xs[i0:i1], ys[j0:j1], indexing="ij")
            inside = t.contains(np.stack([X.ravel(), Y.ravel()], 1)).reshape(X.shape)
            values[i0:i1, j0:j1][inside] = 1.0
        return GridFunction(values, lo, h)

    def segment_coverage(self, x, direction, half_length):
        """Length of ``{x + t u : |t| <= half_length}`` inside the union, over the segment length."""
        seg = LineString([x - half_length * direction, x + half_length * direction])
        return float(seg.intersection(self.union()).length / (2 * half_length))

    def to_dict(self):
        return {"delta": self.delta, "arc": list(self.arc), "alpha": self.alpha, "depth": self.depth,
                "union_area": self.union_area(), "tubes": [t.to_dict() for t in self.tubes], "meta": self.meta}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        return cls([Tube.from_dict(t) for t in data["tubes"]], float(data["delta"]), tuple(data["arc"]),
                   float(data.get("alpha", float("nan"))), int(data.get("depth", 0)), data.get("meta", {}))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def perron_alpha(k):
    """Minimizer of ``alpha^{2k} + 2 (1 - alpha)``, the area bound after k merging stages."""
    return 1.0 if k <= 0 else k ** (-1.0 / (2 * k - 1))


def _tune_alpha(area, lo=0.55, hi=1.0, coarse=10):
    """Minimize the measured union area over the contraction ratio (coarse scan, then bounded search)."""
    grid = np.linspace(lo, hi, coarse)
    vals = [area(a) for a in grid]
    i = int(np.argmin(vals))
    res = minimize_scalar(area, bounds=(grid[max(i - 1, 0)], grid[min(i + 1, coarse - 1)]), method="bounded",
                          options={"xatol": 2e-3})
    return float(res.x) if res.fun <= vals[i] else float(grid[i])


def _line_intersection(p1, p2, q1, q2):
    d1, d2 = p2 - p1, q2 - q1
    mat = np.array([[d1[0], -d2[0]], [d1[1], -d2[1]]])
    t = np.linalg.solve(mat, q1 - p1)
    return p1 + t[0] * d1


def perron_shifts(base, apex, k, alpha):
    """Horizontal translations of the 2^k elementary triangles after k merging stages.

    Triangle i has base ``[base[i], base[i+1]]`` on y = 0 and the common apex.
    At every stage consecutive figures are paired; the right figure is first
    moved so that the two hearts (the similar triangles left after the
    previous stage) are adjacent, then moved left by ``(1 - alpha)`` times the
    pair's heart base. The new heart is the triangle cut off by the outer
    sides, similar to the old pair with ratio alpha.
    """
    m = len(base) - 1
    shifts = np.zeros(m)
    # hearts as (left base vertex, right base vertex, apex)
    hearts = [(np.array([base[i], 0.0]), np.array([base[i + 1], 0.0]), np.array(apex, float)) for i in range(m)]
    groups = [[i] for i in range(m)]
    for _ in range(k):
        new_hearts, new_groups = [], []
        for g in range(0, len(groups), 2):
            (l0, r0, a0), (l1, r1, a1) = hearts[g], hearts[g + 1]
            move = r0[0] - l1[0]
            move -= (1 - alpha) * (r1[0] - l0[0] + move)
            for i in groups[g + 1]:
                shifts[i] += move
            r1s, a1s = r1 + [move, 0], a1 + [move, 0]
            apex_new = _line_intersection(l0, a0, r1s, a1s)
            new_hearts.append((l0, r1s, apex_new))
            new_groups.append(groups[g] + groups[g + 1])
        hearts, groups = new_hearts, new_groups
    return shifts


def _dyadic_exponent(delta):
    k = -math.log2(delta)
    if abs(k - round(k)) > 1e-12 or round(k) < 2:
        raise DomainError("delta must be 2^-k with k >= 2")
    return int(round(k))


def perron_kakeya(delta, arc=None, alpha=None):
    """Perron-tree family of ``1/(2 delta)`` tubes of width delta and length 1.

    ``alpha`` is the per-stage contraction ratio: a number in (1/2, 1],
    ``"classic"`` for the minimizer of the triangle bound, or None to pick
    the ratio that minimizes the measured tube union.

    Triangles of height 2 share the apex (0, 2) and split the base ``[-1, 1]``
    (or the base cut out by ``arc``, an interval of direction angles) into
    ``1/(2 delta)`` equal pieces; after the merging stages each tube is the
    delta x 1 rectangle on the lower half of the translated median, which lies
    inside its triangle. Direction gaps fall in ``[delta, 2 delta]``.
    """
    k_total = _dyadic_exponent(delta)
    depth = k_total - 1
    m = 1 << depth
    height = 2.0
    if arc is None:
        arc = (math.atan2(height, 1.0), math.atan2(height, -1.0))
    a0, a1 = sorted(float(a) for a in arc)
    if not (0 < a0 < a1 < math.pi):
        raise DomainError("arc must be an interval of upward directions inside (0, pi)")
    # direction angle a of the vector from (x, 0) to the apex (0, H): x = -H cot a
    x_lo, x_hi = -height / math.tan(a0), -height / math.tan(a1)
    x_lo, x_hi = min(x_lo, x_hi), max(x_lo, x_hi)
    base = np.linspace(x_lo, x_hi, m + 1)
    mids = 0.5 * (base[:-1] + base[1:])
    gaps = np.abs(np.diff(np.arctan2(height, -mids)))
    if m > 1 and (gaps.min() < delta * (1 - 1e-9) or gaps.max() > 2 * delta * (1 + 1e-9)):
        raise DomainError(f"arc gives direction gaps in [{gaps.min():.4g}, {gaps.max():.4g}], outside [delta, 2 delta]")

    def build(a):
        shifts = perron_shifts(base, (0.0, height), depth, a)
        tubes = []
        for i in range(m):
            start = np.array([mids[i], 0.0])
            u = np.array([-mids[i], height])
            u /= np.linalg.norm(u)
            tubes.append(Tube(start + 0.5 * u + np.array([shifts[i], 0.0]), u, 1.0, delta))
        return TubeFamily(tubes, float(delta), (a0, a1), a, depth)

    if alpha is None:
        alpha = _tune_alpha(lambda a: build(a).union_area()) if depth >= 1 else 1.0
    elif alpha == "classic":
        alpha = perron_alpha(depth)
    alpha = float(alpha)
    if not 0.5 < alpha <= 1.0:
        raise DomainError("alpha must lie in (1/2, 1]")
    fam = build(alpha)
    fam.meta = {"triangles": m, "triangle_height": height, "base": [x_lo, x_hi]}
    return fam


def nikodym_example(delta, h=None, margin=1.25):
    """Indicator of a Perron tree whose tubes match the Nikodym plates.

    Plates ``x + T_delta(sigma)`` are 2 long and 2 delta wide, so the tree
    for delta is scaled by 2: ``1/(2 delta)`` tubes of length 2 and width
    2 delta. At distance t <= 2 from a tube center along its axis the plate
    average in the tube direction is ``1 - t/2``: 1 at the center and at
    least 1/4 on the 3/2-fold dilates, whose union stays of unit size while
    the tube union shrinks. Returns ``(f, family)``; the grid spacing
    defaults to delta/2 (four nodes across a tube).
    """
    delta = check_positive(delta, "delta")
    family = perron_kakeya(delta).scaled(2.0)
    h = delta / 2 if h is None else check_positive(h, "h")
    return family.rasterize(h, margin=margin), family


# ----------------------------------------------------------------------------
# C_M construction


class SphereGridNet:
    """Implicit net of lines in R^k: cube-face grid on S^{k-1}, identified with its antipode.

    Every unit vector lies within ``mesh`` (Euclidean, on the sphere) of a
    net element, up to sign. Elements are never enumerated.
    """

    def __init__(self, k, mesh):
        self.k = check_int(k, "k", 2)
        self.mesh = check_positive(mesh, "mesh")
        # rounding on a cube face moves a point by at most spacing sqrt(k-1)/2,
        # which bounds the chord distance after normalization (|point| >= 1)
        self.steps = int(math.ceil(math.sqrt(k - 1) / self.mesh))
        self.spacing = 2.0 / (2 * self.steps)

    @property
    def count(self):
        """Number of lines: cube-face lattice points / 2."""
        s = 2 * self.steps + 1
        points = s**self.k - (s - 2) ** self.k
        return points // 2

    def nearest(self, v):
        v = np.atleast_2d(np.asarray(v, dtype=float))
        face = v / np.max(np.abs(v), axis=1, keepdims=True)
        snapped = np.round(face / self.spacing) * self.spacing
        # keep the face coordinate exactly +-1
        idx = np.argmax(np.abs(v), axis=1)
        snapped[np.arange(len(v)), idx] = np.sign(face[np.arange(len(v)), idx])
        out = snapped / np.linalg.norm(snapped, axis=1, keepdims=True)
        return out

    def to_dict(self):
        return {"k": self.k, "mesh": self.mesh, "steps": self.steps, "count": self.count}


def lens_volume(m, r1, r2, dist):
    """Volume of the intersection of balls of radii r1, r2 at center distance dist in R^m."""
    r1, r2, dist = np.broadcast_arrays(np.asarray(r1, float), np.asarray(r2, float), np.asarray(dist, float))
    out = np.zeros(r1.shape)
    wm = ball_volume(m)
    small = np.minimum(r1, r2)
    inside = dist <= np.abs(r1 - r2)
    out[inside] = wm * small[inside] ** m
    part = (~inside) & (dist < r1 + r2) & (small > 0)
    if np.any(part):
        a, b, D = r1[part], r2[part], dist[part]
        x1 = (D * D + a * a - b * b) / (2 * D)
        out[part] = _cap(m, a, a - x1) + _cap(m, b, b - (D - x1))
    return out


def _cap(m, r, h):
    h = np.clip(h, 0.0, 2 * r)
    wm = ball_volume(m)
    low = h <= r
    hh = np.where(low, h, 2 * r - h)
    x = np.clip((2 * r * hh - hh * hh) / (r * r), 0.0, 1.0)
    cap = 0.5 * wm * r**m * betainc((m + 1) / 2.0, 0.5, x)
    return np.where(low, cap, wm * r**m - cap)


_GL_NODES, _GL_WEIGHTS = roots_legendre(48)


@dataclass
class CMConstruction:
    """Sigma_M = {span(omega, v) : v in E_M} and the slab C_M(omega), omega in Gr(d-1, n)."""

    d: int
    n: int
    M: float
    rotation: np.ndarray
    net: SphereGridNet
    flagged: bool = False
    notes: list = field(default_factory=list)

    @property
    def omega(self):
        return Subspace(self.rotation[:, : self.d - 1], orthonormal=True)

    @property
    def mesh(self):
        return self.net.mesh

    @property
    def sigma_count(self):
        return self.net.count

    def split(self, x):
        """``(x_omega, x')`` in the rotated frame: coordinates along omega and along its complement."""
        y = np.atleast_2d(x) @ self.rotation
        return y[:, : self.d - 1], y[:, self.d - 1:]

    def in_C(self, x):
        a, b = self.split(x)
        return (np.linalg.norm(a, axis=1) <= self.M) & (np.linalg.norm(b, axis=1) <= 1.0)

    def in_U(self, x):
        a, b = self.split(x)
        rho = np.linalg.norm(b, axis=1)
        return (np.linalg.norm(a, axis=1) <= self.M / 2) & (rho >= RHO_LOW * self.M) & (rho <= RHO_HIGH * self.M)

    @property
    def C_volume(self):
        return ball_volume(self.d - 1) * self.M ** (self.d - 1) * ball_volume(self.n - self.d + 1)

    @property
    def U_volume(self):
        k = self.n - self.d + 1
        shell = ball_volume(k) * ((RHO_HIGH * self.M) ** k - (RHO_LOW * self.M) ** k)
        return ball_volume(self.d - 1) * (self.M / 2) ** (self.d - 1) * shell

    def sample_U(self, count, seed=None):
        rng = as_generator(seed)
        m, k = self.d - 1, self.n - self.d + 1
        g = rng.standard_normal((count, m))
        a = g / np.linalg.norm(g, axis=1, keepdims=True) * (self.M / 2) * rng.random((count, 1)) ** (1 / m)
        e = rng.standard_normal((count, k))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        lo, hi = (RHO_LOW * self.M) ** k, (RHO_HIGH * self.M) ** k
        rho = (lo + (hi - lo) * rng.random(count)) ** (1 / k)
        return np.concatenate([a, e * rho[:, None]], axis=1) @ self.rotation.T

    def sigma_for(self, x):
        """The net element of Sigma_M matched to x (nearest net line to x'/|x'|)."""
        _, b = self.split(x)
        v = self.net.nearest(b / np.linalg.norm(b, axis=1, keepdims=True))[0]
        basis = np.concatenate([self.rotation[:, : self.d - 1], (self.rotation[:, self.d - 1:] @ v)[:, None]], axis=1)
        return Subspace(basis, orthonormal=True)

    def _areas(self, r_omega, rho, psi):
        """d-measure of ``[x + T_0^M(sigma)] & C_M`` for v at angle psi from x'/|x'|."""
        M, m = self.M, self.d - 1
        r_omega, rho, psi = np.broadcast_arrays(np.asarray(r_omega, float), np.asarray(rho, float), np.asarray(psi, float))
        center = -rho * np.cos(psi)
        b = rho * np.abs(np.sin(psi))
        half = np.sqrt(np.clip(1.0 - b * b, 0.0, None))
        lo = np.maximum(center - half, -M)
        hi = np.minimum(center + half, M)
        span = np.clip(hi - lo, 0.0, None)
        t = 0.5 * (lo + hi)[..., None] + 0.5 * span[..., None] * _GL_NODES
        radius = np.sqrt(np.clip(M * M - t * t, 0.0, None))
        inner = lens_volume(m, radius, M, r_omega[..., None])
        return 0.5 * span * np.sum(inner * _GL_WEIGHTS, axis=-1)

    def _best_angle(self, r_omega, rho, grid=48, rounds=40):
        rho = np.asarray(rho, float)
        top = np.where(rho > 1.0, np.arcsin(np.minimum(1.0, 1.0 / np.maximum(rho, 1e-300))), math.pi / 2)
        fr = np.linspace(0.0, 1.0, grid)
        psi = top[..., None] * fr
        vals = self._areas(np.asarray(r_omega, float)[..., None], rho[..., None], psi)
        k = np.argmax(vals, axis=-1)
        step = top / (grid - 1)
        a = np.clip(np.take_along_axis(psi, k[..., None], -1)[..., 0] - step, 0.0, None)
        b = np.minimum(a + 2 * step, top)
        g = (math.sqrt(5) - 1) / 2
        for _ in range(rounds):
            c1 = b - g * (b - a)
            c2 = a + g * (b - a)
            f1 = self._areas(r_omega, rho, c1)
            f2 = self._areas(r_omega, rho, c2)
            left = f1 >= f2
            b = np.where(left, c2, b)
            a = np.where(left, a, c1)
        return 0.5 * (a + b)

    def thin_value(self, x, v=None):
        """``<1_{C_M}>_{M, span(omega, v)}(x)``; v defaults to the matched net line."""
        a, b = self.split(x)
        rho = np.linalg.norm(b, axis=1)
        if v is None:
            v = self.net.nearest(b / np.maximum(rho, 1e-300)[:, None])
        v = np.atleast_2d(v)
        cos = np.abs(np.sum(v * b, axis=1)) / np.maximum(rho, 1e-300)
        psi = np.arccos(np.clip(cos, 0.0, 1.0))
        area = self._areas(np.linalg.norm(a, axis=1), rho, psi)
        return area / (ball_volume(self.d) * self.M**self.d)

    def maximal_value(self, r_omega, rho, certified=True):
        """``M_{Sigma_M,{M}} 1_{C_M}`` at points with the given |x_omega| and |x'|.

        The continuous optimum over directions is found by golden search in
        the angle between v and x'; with ``certified`` the value is recomputed
        at a net line within ``mesh`` of the optimizer, so it is attained by
        an element of Sigma_M.
        """
        r_omega = np.asarray(r_omega, float)
        rho = np.asarray(rho, float)
        psi = self._best_angle(r_omega, rho)
        if certified:
            # a net line within mesh (chord) of the optimizer changes the angle by at most 2 asin(mesh / 2)
            psi = np.clip(psi + 2 * math.asin(min(1.0, self.mesh / 2)), 0.0, math.pi / 2)
            alt = np.clip(psi - 4 * math.asin(min(1.0, self.mesh / 2)), 0.0, math.pi / 2)
            area = np.minimum(self._areas(r_omega, rho, psi), self._areas(r_omega, rho, alt))
        else:
            area = self._areas(r_omega, rho, psi)
        return area / (ball_volume(self.d) * self.M**self.d)

    def slab_mc(self, x, samples=20000, seed=None):
        """MC estimate of ``|[x + T_0^M(sigma)] & C_M|`` (d-measure) for the matched sigma."""
        x = np.asarray(x, float).reshape(-1)
        sigma = self.sigma_for(x)
        rng = as_generator(seed)
        g = rng.standard_normal((samples, self.d))
        t = g / np.linalg.norm(g, axis=1, keepdims=True) * self.M * rng.random((samples, 1)) ** (1 / self.d)
        pts = x + t @ sigma.basis.T
        hits = self.in_C(pts)
        frac = hits.mean()
        vol = ball_volume(self.d) * self.M**self.d
        return frac * vol, math.sqrt(max(frac * (1 - frac), 1e-300) / samples) * vol

    def lp_norm(self, p, nr=160, nw=200):
        """``||M_{Sigma_M,{M}} 1_{C_M}||_p`` by product Gauss quadrature in (|x_omega|, |x'|)."""
        M = self.M
        m, k = self.d - 1, self.n - self.d + 1
        # support: |x_omega| < 2M, |x'| < M + 1; split ranges at the kinks
        w_edges = np.array([0.0, M / 2, M, 1.5 * M, 2 * M])
        r_edges = np.unique(np.array([0.0, 1.0, 2.0, RHO_LOW * M, RHO_HIGH * M, M / 2, M - 1, M, M + 1]))
        r_edges = r_edges[(r_edges >= 0) & (r_edges <= M + 1)]
        nodes, weights = roots_legendre(max(8, nw // (len(w_edges) - 1)))
        w_pts, w_wts = _panel_rule(w_edges, nodes, weights)
        nodes, weights = roots_legendre(max(8, nr // (len(r_edges) - 1)))
        r_pts, r_wts = _panel_rule(r_edges, nodes, weights)
        g = np.empty((w_pts.size, r_pts.size))
        for i, w in enumerate(w_pts):
            g[i] = self.maximal_value(np.full(r_pts.size, w), r_pts, certified=False)
        sw = m * ball_volume(m) * w_pts ** (m - 1)
        sr = k * ball_volume(k) * r_pts ** (k - 1)
        total = np.einsum("i,j,ij->", w_wts * sw, r_wts * sr, g**p)
        return float(total ** (1.0 / p))

    def quotient(self, p, **kw):
        return self.lp_norm(p, **kw) / self.C_volume ** (1.0 / p)

    def manifest(self):
        return {
            "d": self.d, "n": self.n, "M": self.M,
            "omega_basis": self.rotation[:, : self.d - 1].T.tolist(),
            "complement_basis": self.rotation[:, self.d - 1:].T.tolist(),
            "net": self.net.to_dict(), "sigma_count": self.sigma_count,
            "C_volume": self.C_volume, "U_volume": self.U_volume,
            "flagged": self.flagged, "notes": list(self.notes),
            "constants": {"net": NET_CONSTANT, "angle": ANGLE_CONSTANT, "rho": [RHO_LOW, RHO_HIGH],
                          "slab": SLAB_CONSTANT, "thin": THIN_CONSTANT},
        }


def _panel_rule(edges, nodes, weights):
    pts, wts = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        pts.append(0.5 * (a + b) + 0.5 * (b - a) * nodes)
        wts.append(0.5 * (b - a) * weights)
    return np.concatenate(pts), np.concatenate(wts)


def cm_construction(d, n, M, seed=None):
    """Build Sigma_M and C_M for 1 < d < n.

    The net E_M has mesh ``2^-18 / M`` so that every v within it satisfies the
    angular hypothesis ``|v - eta| < 2^-8 / M`` of the slab estimate; #Sigma_M
    is then of order M^{n-d}. For ``M < 2^8`` the radial window
    ``[2^-8 M, 2^-7 M]`` lies inside the unit slab and the slab estimate's
    intermediate bounds are outside their range; the construction is still
    returned, with ``flagged`` set and a FlagWarning.
    """
    d = check_int(d, "d", 2)
    n = check_int(n, "n", 3)
    if not d < n:
        raise DomainError("need 1 < d < n")
    M = check_positive(M, "M")
    rng = as_generator(seed)
    rotation = np.linalg.qr(rng.standard_normal((n, n)))[0] if seed is not None else np.eye(n)
    net = SphereGridNet(n - d + 1, NET_CONSTANT / M)
    cons = CMConstruction(d, n, float(M), rotation, net)
    if M < ASYMPTOTIC_M:
        cons.flagged = True
        msg = f"M = {M:g} < 2^8: slab-estimate constants are outside their asymptotic range"
        cons.notes.append(msg)
        warnings.warn(msg, FlagWarning, stacklevel=2)
    return cons


# ----------------------------------------------------------------------------
# tensor extension


def tensor_extend(f2, n, pad=0):
    """``f(x) = f2(x1, x2) 1_{[-1/2, 1/2]^{n-2}}(x3, ..., xn)`` on a product grid.

    Transverse nodes sit at cell centers ``-1/2 + h/2 + i h`` so that the cell
    count of the unit interval is exact (requires 1/h integral); ``pad`` adds
    zero nodes on both sides.
    """
    n = check_int(n, "n", 3)
    if f2.n != 2:
        raise DomainError("f2 must be planar")
    h = f2.h
    cells = 1.0 / h
    if abs(cells - round(cells)) > 1e-9:
        raise DomainError("1/h must be an integer for an exact transverse unit cube")
    cells = int(round(cells))
    side = cells + 2 * int(pad)
    total = f2.values.size * side ** (n - 2)
    if total > MAX_SAMPLES:
        raise DomainError(f"tensor extension needs {total} samples (> 2^28)")
    prof = np.zeros(side)
    prof[pad: pad + cells] = 1.0
    values = f2.values
    for _ in range(n - 2):
        values = np.multiply.outer(values, prof)
    origin = np.concatenate([f2.origin, np.full(n - 2, -0.5 + h / 2 - pad * h)])
    return GridFunction(values, origin, h)
