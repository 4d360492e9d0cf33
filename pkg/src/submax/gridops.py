"""Spatial operators on sampled functions.

Functions live on uniform box grids (``GridFunction``) and vanish outside the
box. Thin subspace averages, plate averages, the maximal operators built from
them and empirical norm quotients are computed here.

Two evaluation paths are available. The kernel path is the reference
quadrature: midpoint samples of the disc or plate, pushed onto the grid by
the adjoint of multilinear interpolation and applied by FFT convolution, so
that at grid nodes it equals the direct sum of interpolated values. The
lattice path (planar only) resamples the function on a lattice rotated to each
direction, takes exact antiderivatives by prefix sums and interpolates back;
it is what makes the large planar experiments affordable.
"""

import csv
import io
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import fftconvolve
from sklearn.base import BaseEstimator, TransformerMixin

from . import _kernels
from ._validation import check_int, check_points, check_positive
from .errors import DomainError, ShapeError
from .grassmann import DirectionSet, Subspace, pairwise_distances

MAGIC = b"GMXA1"


class GridFunction:
    """Samples ``values[i_1, ..., i_n]`` at ``origin + h * (i_1, ..., i_n)``."""

    __slots__ = ("values", "origin", "h")

    def __init__(self, values, origin, h):
        values = np.array(values, dtype=float)
        if values.ndim < 1:
            raise ShapeError("values must have at least one axis")
        origin = np.asarray(origin, dtype=float).reshape(-1)
        if origin.size != values.ndim:
            raise ShapeError(f"origin has {origin.size} entries for a {values.ndim}-dimensional grid")
        if not np.all(np.isfinite(values)):
            raise DomainError("grid values must be finite")
        self.values = values
        self.origin = origin
        self.h = check_positive(h, "h")
        self.values.setflags(write=False)
        self.origin.setflags(write=False)

    @classmethod
    def from_function(cls, fn, lower, upper, h):
        """Sample ``fn(points)`` (points of shape (k, n)) on the grid covering [lower, upper]."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        shape = tuple(int(math.floor((u - l) / h + 1e-9)) + 1 for l, u in zip(lower, upper))
        grid = cls(np.zeros(shape), lower, h)
        vals = np.asarray(fn(grid.points()), dtype=float).reshape(shape)
        return cls(vals, lower, h)

    @classmethod
    def zeros_like(cls, other):
        return cls(np.zeros(other.shape), other.origin, other.h)

    @property
    def n(self):
        return self.values.ndim

    @property
    def shape(self):
        return self.values.shape

    @property
    def upper(self):
        return self.origin + self.h * (np.array(self.shape) - 1)

    @property
    def cell_volume(self):
        return self.h**self.n

    def axis(self, i):
        return self.origin[i] + self.h * np.arange(self.shape[i])

    def points(self):
        mesh = np.meshgrid(*[self.axis(i) for i in range(self.n)], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def with_values(self, values):
        return GridFunction(values, self.origin, self.h)

    def evaluate(self, points):
        """Multilinear interpolation; zero outside the sampled box."""
        pts = check_points(points, self.n)
        frac = (pts - self.origin) / self.h
        shape = np.array(self.shape)
        inside = np.all((frac >= -1e-12) & (frac <= shape - 1 + 1e-12), axis=1)
        frac = np.clip(frac, 0, shape - 1)
        base = np.minimum(np.floor(frac).astype(np.int64), np.maximum(shape - 2, 0))
        t = frac - base
        out = np.zeros(len(pts))
        for corner in range(1 << self.n):
            idx = []
            w = np.ones(len(pts))
            for ax in range(self.n):
                bit = (corner >> ax) & 1
                if shape[ax] == 1 and bit:
                    w = w * 0.0
                    idx.append(base[:, ax])
                    continue
                idx.append(base[:, ax] + bit)
                w = w * (t[:, ax] if bit else 1.0 - t[:, ax])
            out += w * self.values[tuple(idx)]
        out[~inside] = 0.0
        return out

    def integral(self):
        return float(self.values.sum() * self.cell_volume)

    def norm(self, p=2.0):
        p = float(p)
        if math.isinf(p):
            return float(np.abs(self.values).max())
        return float((np.sum(np.abs(self.values) ** p) * self.cell_volume) ** (1.0 / p))

    def support_box(self, level=0.0):
        """Lower and upper corners of the nodes with ``|value| > level`` (None if empty)."""
        idx = np.argwhere(np.abs(self.values) > level)
        if idx.size == 0:
            return None
        return self.origin + self.h * idx.min(axis=0), self.origin + self.h * idx.max(axis=0)

    def to_bytes(self):
        head = MAGIC + struct.pack("<B", self.n) + struct.pack(f"<{self.n}I", *self.shape)
        head += struct.pack(f"<{self.n}d", *self.origin) + struct.pack("<d", self.h)
        return head + np.ascontiguousarray(self.values, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, data):
        if data[:5] != MAGIC:
            raise DomainError("not a GMXA1 grid file")
        n = data[5]
        off = 6
        shape = struct.unpack_from(f"<{n}I", data, off)
        off += 4 * n
        origin = struct.unpack_from(f"<{n}d", data, off)
        off += 8 * n
        (h,) = struct.unpack_from("<d", data, off)
        off += 8
        count = int(np.prod(shape))
        if len(data) - off != 8 * count:
            raise DomainError("grid file is truncated or has trailing bytes")
        values = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        return cls(values.astype(float), origin, h)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_csv(self, path=None):
        """Rows ``i_1, ..., i_n, value`` after a comment header with origin and h."""
        buf = io.StringIO()
        origin = json.dumps([float(o) for o in self.origin], separators=(",", ":"))
        shape = json.dumps([int(k) for k in self.shape], separators=(",", ":"))
        buf.write(f"# origin={origin} h={self.h!r} shape={shape}\n")
        w = csv.writer(buf)
        w.writerow([f"i{k}" for k in range(self.n)] + ["value"])
        for idx in np.ndindex(*self.shape):
            w.writerow(list(idx) + [repr(float(self.values[idx]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text_or_path, origin=None, h=None, shape=None):
        """Read ``(index tuple, value)`` rows; origin, h and shape come from the header unless given."""
        text = text_or_path
        if "\n" not in str(text_or_path):
            with open(text_or_path) as fh:
                text = fh.read()
        lines = text.splitlines()
        if lines and lines[0].startswith("#"):
            meta = dict(part.split("=", 1) for part in lines[0][1:].split())
            origin = json.loads(meta["origin"]) if origin is None else origin
            h = float(meta["h"]) if h is None else h
            shape = tuple(json.loads(meta["shape"])) if shape is None and "shape" in meta else shape
            lines = lines[1:]
        rows = list(csv.reader(lines))
        if rows and not rows[0][0].lstrip("-").isdigit():
            rows = rows[1:]
        if origin is None or h is None:
            raise DomainError("CSV grid needs origin and h")
        idx = np.array([[int(c) for c in r[:-1]] for r in rows], dtype=np.int64)
        vals = np.array([float(r[-1]) for r in rows])
        if shape is None:
            shape = tuple(idx.max(axis=0) + 1)
        out = np.zeros(shape)
        out[tuple(idx.T)] = vals
        return cls(out, origin, h)

    def __repr__(self):
        return f"GridFunction(shape={self.shape}, h={self.h:g})"


# ----------------------------------------------------------------------------
# quadrature rules


def _ball_nodes(k, radius, step):
    """Midpoint nodes of the cube grid of spacing ``step`` whose centers lie in the k-ball."""
    if k == 0:
        return np.zeros((1, 0))
    m = max(1, int(math.ceil(radius / step)))
    step = radius / m
    ax = (np.arange(-m, m) + 0.5) * step
    mesh = np.stack(np.meshgrid(*([ax] * k), indexing="ij"), axis=-1).reshape(-1, k)
    if k == 1:
        return mesh
    return mesh[np.einsum("ij,ij->i", mesh, mesh) <= radius * radius]


def disc_rule(sigma, s, h, density=2):
    """Offsets and weights for the thin average over ``s B_n & sigma``.

    Midpoint rule on a grid of spacing at most ``h / density`` inside sigma;
    in one dimension the cells tile the segment exactly. Weights sum to 1.
    """
    s = check_positive(s, "s")
    density = check_int(density, "density", 2)
    local = _ball_nodes(sigma.d, s, h / density)
    offsets = local @ sigma.basis.T
    return offsets, np.full(len(offsets), 1.0 / len(offsets))


def plate_rule(sigma, delta, h, density=2, scale=1.0):
    """Offsets and weights for the full average over ``scale * T_delta(sigma)``."""
    density = check_int(density, "density", 2)
    along = _ball_nodes(sigma.d, scale, h / density)
    perp_basis = Subspace(sigma.basis, orthonormal=True).complement().basis
    across = _ball_nodes(sigma.n - sigma.d, scale * delta, h / density)
    offsets = (along @ sigma.basis.T)[:, None, :] + (across @ perp_basis.T)[None, :, :]
    offsets = offsets.reshape(-1, sigma.n)
    return offsets, np.full(len(offsets), 1.0 / len(offsets))


def splat(offsets, weights, h, n):
    """Kernel on the lattice hZ^n: adjoint of multilinear interpolation of the rule.

    Returns ``(kernel, center)`` with ``kernel[center + j]`` the weight of the
    lattice offset ``j * h``.
    """
    frac = offsets / h
    base = np.floor(frac).astype(np.int64)
    t = frac - base
    lo = base.min(axis=0)
    hi = base.max(axis=0) + 1
    kernel = np.zeros(tuple(hi - lo + 1))
    for corner in range(1 << n):
        bits = np.array([(corner >> ax) & 1 for ax in range(n)])
        w = weights.copy()
        for ax in range(n):
            w = w * (t[:, ax] if bits[ax] else 1.0 - t[:, ax])
        np.add.at(kernel, tuple((base + bits - lo).T), w)
    return kernel, -lo


def apply_rule(f, offsets, weights):
    """``sum_k w_k f(x - y_k)`` at every grid node, by FFT convolution of the splatted rule.

    The convolution sees the zero-extended lattice, whose interpolant ramps to
    0 across one cell beyond the box; it agrees with ``rule_at_points`` at every
    node whose rule stays at least one cell inside the box.
    """
    kernel, center = splat(offsets, weights, f.h, f.n)
    full = fftconvolve(f.values, kernel, mode="full")
    sl = tuple(slice(c, c + s) for c, s in zip(center, f.shape))
    out = full[sl]
    # FFT roundoff can leave tiny negative values for nonnegative data
    return np.where(np.abs(out) < 1e-13 * max(1.0, np.abs(f.values).max()), 0.0, out)


def rule_at_points(f, offsets, weights, x):
    x = check_points(x, f.n)
    out = np.zeros(len(x))
    for y, w in zip(offsets, weights):
        out += w * f.evaluate(x - y)
    return out


# ----------------------------------------------------------------------------
# planar rotated-lattice path


@dataclass(frozen=True)
class _Lattice:
    a0: float
    ha: float
    na: int
    b0: float
    hb: float
    nb: int


def _lattice_for(f, u, ha, hb, margin_a=0.0, margin_b=0.0):
    c = 0.5 * (f.origin + f.upper)
    corners = np.array([[f.origin[0], f.origin[1]], [f.origin[0], f.upper[1]],
                        [f.upper[0], f.origin[1]], [f.upper[0], f.upper[1]]]) - c
    a = corners @ u
    b = corners @ np.array([-u[1], u[0]])
    a_lo, a_hi = a.min() - margin_a - ha, a.max() + margin_a + ha
    b_lo, b_hi = b.min() - margin_b - hb, b.max() + margin_b + hb
    na = int(math.ceil((a_hi - a_lo) / ha)) + 1
    nb = int(math.ceil((b_hi - b_lo) / hb)) + 1
    return c, _Lattice(a_lo, ha, na, b_lo, hb, nb)


def _rotated_samples(f, u, lat, c):
    return _kernels.sample_rotated(np.ascontiguousarray(f.values), f.origin[0], f.origin[1], f.h, c[0], c[1],
                                   u[0], u[1], lat.a0, lat.ha, lat.na, lat.b0, lat.hb, lat.nb)


def _line_unit(sigma):
    u = np.asarray(sigma.basis[:, 0], dtype=float)
    return u / np.linalg.norm(u)


def _check_planar_lines(f, net):
    if f.n != 2 or net.n != 2 or net.d != 1:
        raise DomainError("the lattice path handles lines in the plane only")


# ----------------------------------------------------------------------------
# operators


def subspace_average(f, sigma, s, x, density=2):
    """Thin average ``<f>_{s, sigma}(x)`` normalized by the d-volume of the disc."""
    if sigma.n != f.n:
        raise ShapeError("subspace and grid dimensions differ")
    if sigma.d >= f.n:
        raise DomainError("thin averages need d < n (d = n is the Hardy-Littlewood case)")
    offsets, weights = disc_rule(sigma, s, f.h, density)
    res = rule_at_points(f, offsets, weights, x)
    return float(res[0]) if np.ndim(x) == 1 else res


def _as_set(Sigma):
    if isinstance(Sigma, Subspace):
        return [Sigma]
    if isinstance(Sigma, DirectionSet):
        return list(Sigma)
    return list(Sigma)


def _choose_method(method, f, elements):
    if method not in ("auto", "kernel", "lattice"):
        raise DomainError(f"unknown method {method!r}")
    if method == "auto":
        planar = f.n == 2 and all(e.d == 1 and e.n == 2 for e in elements)
        return "lattice" if planar and f.values.size > 128 * 128 else "kernel"
    return method


def _map_directions(fn, items, threads):
    # lazy, so only a bounded number of per-direction fields is alive at once
    items = list(items)
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            for i in range(0, len(items), 2 * threads):
                yield from ex.map(fn, items[i:i + 2 * threads])
        return
    for item in items:
        yield fn(item)


def maximal_subspace_average(f, Sigma, S, density=2, method="auto", threads=1, thickness=0.0):
    """``sup_{sigma in Sigma, s in S} <|f|>_{s, sigma}`` at every grid node.

    ``thickness = 0`` gives thin averages; ``thickness = delta > 0`` replaces
    each disc by the full plate ``s T_delta(sigma)`` (kernel path only).
    """
    elements = _as_set(Sigma)
    scales = np.array(sorted(float(check_positive(s, "scale")) for s in S), dtype=float)
    if not elements or scales.size == 0:
        raise DomainError("the direction set and the scale set must be nonempty")
    for e in elements:
        if e.n != f.n:
            raise ShapeError("subspace and grid dimensions differ")
        if e.d >= f.n:
            raise DomainError("thin averages need d < n")
    thickness = check_positive(thickness, "thickness", strict=False)
    g = f.with_values(np.abs(f.values))
    method = "kernel" if thickness > 0 else _choose_method(method, f, elements)
    out = np.zeros(f.shape)
    if method == "lattice":
        _check_planar_lines(f, DirectionSet(elements, validate=False))
        ha, hb = f.h / density, f.h

        def one(sigma):
            u = _line_unit(sigma)
            c, lat = _lattice_for(g, u, ha, hb)
            samples = _rotated_samples(g, u, lat, c)
            field_ = _kernels.line_max(samples, ha, scales)
            res = np.zeros(f.shape)
            _kernels.pull_back_max(res, field_, f.origin[0], f.origin[1], f.h, c[0], c[1], u[0], u[1],
                                   lat.a0, lat.ha, lat.b0, lat.hb)
            return res
    else:
        def one(sigma):
            res = np.zeros(f.shape)
            for s in scales:
                if thickness > 0:
                    offsets, weights = plate_rule(sigma, thickness, f.h, density, s)
                else:
                    offsets, weights = disc_rule(sigma, s, f.h, density)
                np.maximum(res, apply_rule(g, offsets, weights), out=res)
            return res

    for res in _map_directions(one, elements, threads):
        np.maximum(out, res, out=out)
    return f.with_values(out)


def line_net_mesh(net):
    """Covering radius (in the metric) of a set of lines in the plane."""
    ang = np.sort(np.mod(np.arctan2(net.bases[:, 1, 0], net.bases[:, 0, 0]), math.pi))
    gaps = np.diff(np.append(ang, ang[0] + math.pi))
    return float(math.sin(gaps.max() / 2.0))


def net_mesh(net, probes=2000, seed=0):
    """Covering radius of ``net``: exact for planar lines, a probe estimate otherwise."""
    if net.n == 2 and net.d == 1:
        return line_net_mesh(net)
    rng = np.random.default_rng(seed)
    worst = 0.0
    bases = net.bases
    for _ in range(probes):
        sub = Subspace.random(net.d, net.n, rng)
        dist = pairwise_distances(np.concatenate([sub.basis[None], bases]))[0, 1:]
        worst = max(worst, float(dist.min()))
    return worst


def _check_delta(delta):
    delta = check_positive(delta, "delta")
    if delta > 0.5:
        raise DomainError("delta must lie in (0, 1/2]")
    return delta


def _plate_field(g, sigma, delta, density, method):
    """Plate averages of g over x + T_delta(sigma) on the grid, or on a rotated lattice."""
    if method == "lattice":
        u = _line_unit(sigma)
        ha, hb = 2.0 * g.h, g.h
        c, lat = _lattice_for(g, u, ha, hb)
        samples = _rotated_samples(g, u, lat, c)
        return ("lattice", u, c, lat, _kernels.rectangle_average(samples, ha, hb, 1.0, delta))
    offsets, weights = plate_rule(sigma, delta, g.h, density)
    return ("grid", apply_rule(g, offsets, weights))


def nikodym_maximal(f, delta, net, density=2, method="auto", threads=1, check_mesh=True):
    """``N_delta f(x) = sup_sigma`` of the average of |f| over ``x + T_delta(sigma)``, sigma in the net."""
    delta = _check_delta(delta)
    elements = _as_set(net)
    if not elements:
        raise DomainError("empty direction set")
    if check_mesh and isinstance(net, DirectionSet):
        mesh = net_mesh(net)
        if mesh > delta / 4 * (1 + 1e-9):
            raise DomainError(f"net mesh {mesh:.4g} exceeds delta/4 = {delta / 4:.4g}")
    g = f.with_values(np.abs(f.values))
    method = _choose_method(method, f, elements)
    if method == "lattice":
        _check_planar_lines(f, DirectionSet(elements, validate=False))

    def one(sigma):
        kind, *rest = _plate_field(g, sigma, delta, density, method)
        if kind == "grid":
            return rest[0]
        u, c, lat, field_ = rest
        res = np.zeros(f.shape)
        _kernels.pull_back_max(res, field_, f.origin[0], f.origin[1], f.h, c[0], c[1], u[0], u[1],
                               lat.a0, lat.ha, lat.b0, lat.hb)
        return res

    out = np.zeros(f.shape)
    for res in _map_directions(one, elements, threads):
        np.maximum(out, res, out=out)
    return f.with_values(out)


def plate_average(f, sigma, delta, x, density=2, scale=1.0):
    """Average of |f| over ``x + scale * T_delta(sigma)`` at the given points."""
    offsets, weights = plate_rule(sigma, delta, f.h, density, scale)
    g = f.with_values(np.abs(f.values))
    res = rule_at_points(g, offsets, weights, x)
    return float(res[0]) if np.ndim(x) == 1 else res


@dataclass
class KakeyaValues:
    """``K_delta f`` as a function on the direction set."""

    net: DirectionSet
    values: np.ndarray
    delta: float

    def norm(self, p=2.0, measure=None):
        """Discrete L^p norm; ``measure`` is the mass per element (default 1/#net)."""
        w = np.full(len(self.values), 1.0 / len(self.values)) if measure is None else np.asarray(measure)
        return float((np.sum(w * np.abs(self.values) ** p)) ** (1.0 / p))

    def to_dict(self):
        return {"delta": self.delta, "values": [float(v) for v in self.values], "net": self.net.to_dict()}


def kakeya_maximal(f, delta, net, centers=None, density=2, method="auto", threads=1):
    """``K_delta f(sigma) = max_x`` of the plate average over ``x + T_delta(sigma)``.

    ``centers`` is either None (all grid nodes) or an array of points. When
    grid nodes are used, the grid must contain the support of f dilated by 1.
    """
    delta = _check_delta(delta)
    if not isinstance(net, DirectionSet):
        net = DirectionSet(_as_set(net), validate=False)
    if len(net) == 0:
        raise DomainError("empty direction set")
    g = f.with_values(np.abs(f.values))
    if centers is None:
        box = f.support_box()
        if box is not None and (np.any(box[0] - 1.0 < f.origin - 1e-9) or np.any(box[1] + 1.0 > f.upper + 1e-9)):
            raise DomainError("grid nodes do not cover supp f dilated by 1")
        method = _choose_method(method, f, list(net))
        mask = np.ones(f.shape, dtype=bool)

        def one(sigma):
            kind, *rest = _plate_field(g, sigma, delta, density, method)
            if kind == "grid":
                return float(rest[0].max())
            u, c, lat, field_ = rest
            return float(_kernels.pull_back_max_masked(field_, f.origin[0], f.origin[1], f.h, f.shape[0], f.shape[1],
                                                        c[0], c[1], u[0], u[1], lat.a0, lat.ha, lat.b0, lat.hb, mask))
    else:
        pts = check_points(centers, f.n)
        if len(pts) == 0:
            raise DomainError("empty set of centers")

        def one(sigma):
            return float(plate_average(g, sigma, delta, pts, density).max())

    vals = np.array(list(_map_directions(one, list(net), threads)))
    return KakeyaValues(net, vals, delta)


# ----------------------------------------------------------------------------
# norms


@dataclass
class NormEstimate:
    kind: str
    p: float
    value: float
    function_id: str = ""
    level: float = float("nan")
    level_measure: float = float("nan")
    levels_used: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def weak_norm(g, p):
    """``sup_lambda lambda |{|g| > lambda}|^{1/p}`` over the exact level set family.

    For lambda just below a value v of |g| the set {|g| > lambda} is {|g| >= v},
    so the supremum is the max of ``v * |{|g| >= v}|^{1/p}`` over distinct v.
    Returns ``(value, level, measure, count_of_levels)``.
    """
    vals = np.sort(np.abs(g.values).ravel())[::-1]
    vals = vals[vals > 0]
    if vals.size == 0:
        return 0.0, 0.0, 0.0, 0
    # the measure of {|g| >= v} counts every sample with value >= v, ties included
    distinct, first = np.unique(-vals, return_index=True)
    counts_ge = np.searchsorted(-vals, distinct, side="right")
    levels = -distinct
    measures = counts_ge * g.cell_volume
    scores = levels * measures ** (1.0 / p)
    k = int(np.argmax(scores))
    return float(scores[k]), float(levels[k]), float(measures[k]), int(levels.size)


def norm_estimate(g, f, kind="strong", p=2.0, function_id=""):
    """Empirical quotient ``||g|| / ||f||_p`` for strong or weak type."""
    p = float(p)
    if p < 1:
        raise DomainError("p must be >= 1")
    fn = f.norm(p)
    if fn == 0:
        raise DomainError("||f||_p = 0")
    if kind in ("strong", "strong-p"):
        return NormEstimate("strong-p", p, g.norm(p) / fn, function_id)
    if kind in ("weak", "weak-p"):
        val, lev, meas, count = weak_norm(g, p)
        return NormEstimate("weak-p", p, val / fn, function_id, lev, meas, count)
    raise DomainError(f"unknown norm kind {kind!r}")


# ----------------------------------------------------------------------------
# estimators


def _check_grid(X):
    if not isinstance(X, GridFunction):
        raise TypeError(f"expected a GridFunction, got {type(X).__name__}")
    return X


class SubspaceAverage(TransformerMixin, BaseEstimator):
    """Thin average at a fixed (sigma, s) applied to every grid node."""

    def __init__(self, sigma=None, s=1.0, density=2):
        self.sigma = sigma
        self.s = s
        self.density = density

    def fit(self, X, y=None):
        X = _check_grid(X)
        if self.sigma is None or self.sigma.n != X.n:
            raise ShapeError("sigma must be a subspace of the grid's space")
        check_positive(self.s, "s")
        self.n_features_in_ = X.n
        return self

    def transform(self, X):
        X = _check_grid(X)
        offsets, weights = disc_rule(self.sigma, self.s, X.h, self.density)
        return X.with_values(apply_rule(X, offsets, weights))


class MaximalSubspaceAverage(TransformerMixin, BaseEstimator):
    """``M_{Sigma, S}`` as a transformer on GridFunctions."""

    def __init__(self, Sigma=None, scales=(1.0,), density=2, method="auto", threads=1):
        self.Sigma = Sigma
        self.scales = scales
        self.density = density
        self.method = method
        self.threads = threads

    def fit(self, X, y=None):
        X = _check_grid(X)
        if self.Sigma is None or len(_as_set(self.Sigma)) == 0 or len(self.scales) == 0:
            raise DomainError("Sigma and scales must be nonempty")
        self.n_features_in_ = X.n
        return self

    def transform(self, X):
        return maximal_subspace_average(_check_grid(X), self.Sigma, self.scales, self.density, self.method, self.threads)


class NikodymMaximal(TransformerMixin, BaseEstimator):
    """``N_delta`` over a direction net."""

    def __init__(self, delta=0.1, net=None, density=2, method="auto", threads=1):
        self.delta = delta
        self.net = net
        self.density = density
        self.method = method
        self.threads = threads

    def fit(self, X, y=None):
        X = _check_grid(X)
        _check_delta(self.delta)
        if self.net is None:
            if X.n != 2:
                raise DomainError("a net must be supplied outside the plane")
            from .grassmann import line_mesh_net
            self.net_ = line_mesh_net(self.delta / 4)
        else:
            self.net_ = self.net
        self.n_features_in_ = X.n
        return self

    def transform(self, X):
        return nikodym_maximal(_check_grid(X), self.delta, self.net_, self.density, self.method, self.threads)


class KakeyaMaximal(BaseEstimator):
    """``K_delta`` over a direction net; ``predict`` returns the values on the net."""

    def __init__(self, delta=0.1, net=None, density=2, method="auto", threads=1):
        self.delta = delta
        self.net = net
        self.density = density
        self.method = method
        self.threads = threads

    def fit(self, X, y=None):
        X = _check_grid(X)
        _check_delta(self.delta)
        if self.net is None:
            raise DomainError("a direction net is required")
        self.n_features_in_ = X.n
        return self

    def predict(self, X):
        return kakeya_maximal(_check_grid(X), self.delta, self.net, None, self.density, self.method, self.threads).values
