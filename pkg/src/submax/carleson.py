"""Codimension-one plate lattices, Carleson sequences and their balayage.

Plates are ``P(I, K, v)`` in R^n with n = d + 1 (see ``plates.ShearedPlate``):
an axis-parallel base cube I in the first d coordinates, a height interval K
and a normal v within pi/16 of e_n. Collections are stored as arrays; sets
are measured by counting cells of an axis-aligned ``CellGrid`` whose last
axis is vertical, so plate volumes, shadows and selections are all measured
with one consistent rule (a cell belongs to a set when its center does).
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import plate_cells
from ._validation import as_generator, check_int, check_positive
from .errors import DisjointnessError, DomainError, ShapeError
from .gridops import GridFunction
from .plates import SHEAR_LIMIT, ShearedPlate, slice_ratio

BALAYAGE_RESOLUTION = 4
HAT_QUADRATURE = 16
MC_COLLISION_SAMPLES = 100_000


def _normals(V, n=None):
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if n is not None and V.shape[1] != n:
        raise ShapeError(f"directions must lie in R^{n}")
    if V.shape[0] < 1 or V.shape[1] < 2:
        raise DomainError("need at least one direction in R^n, n >= 2")
    V = V / np.linalg.norm(V, axis=1, keepdims=True)
    V = V * np.sign(V[:, -1:] + (V[:, -1:] == 0))
    if np.any(np.arccos(np.clip(V[:, -1], -1, 1)) > SHEAR_LIMIT + 1e-12):
        raise DomainError("every direction must be within pi/16 of e_n")
    return V


def random_directions(count, n, seed=None, cap=SHEAR_LIMIT):
    """``count`` normals uniform in the spherical cap of angle ``cap`` about e_n."""
    rng = as_generator(seed)
    count = check_int(count, "count", 1)
    cos_cap = math.cos(cap)
    out = np.empty((count, n))
    filled = 0
    while filled < count:
        g = rng.standard_normal((4 * count, n))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        g[:, -1] = np.abs(g[:, -1])
        g = g[g[:, -1] >= cos_cap]
        take = min(count - filled, len(g))
        out[filled:filled + take] = g[:take]
        filled += take
    return out


# ----------------------------------------------------------------------------
# cell grid


@dataclass(frozen=True)
class CellGrid:
    """Cells ``lower + spacing * (index, index + 1)`` of an axis-aligned box; last axis vertical."""

    lower: np.ndarray
    spacing: np.ndarray
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "spacing", np.asarray(self.spacing, dtype=float))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if not (self.lower.size == self.spacing.size == len(self.shape)) or len(self.shape) < 2:
            raise ShapeError("lower, spacing and shape must share a dimension >= 2")
        if np.any(self.spacing <= 0) or min(self.shape) < 1:
            raise DomainError("spacing must be positive and shape nonempty")

    @classmethod
    def covering(cls, lower, upper, spacing):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        spacing = np.broadcast_to(np.asarray(spacing, dtype=float), lower.shape).copy()
        shape = np.maximum(np.ceil((upper - lower) / spacing - 1e-9).astype(int), 1)
        return cls(lower, spacing, tuple(shape))

    @property
    def n(self):
        return len(self.shape)

    @property
    def base_shape(self):
        return self.shape[:-1]

    @property
    def columns(self):
        return int(np.prod(self.base_shape))

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @property
    def upper(self):
        return self.lower + self.spacing * np.array(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape))

    def centers(self):
        axes = [self.lower[a] + (np.arange(self.shape[a]) + 0.5) * self.spacing[a] for a in range(self.n)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.n)

    def to_dict(self):
        return {"lower": self.lower.tolist(), "spacing": self.spacing.tolist(), "shape": list(self.shape)}


# ----------------------------------------------------------------------------
# plate collections


class PlateCollection:
    """Finite family of plates ``P(I, K, v)`` with axis-parallel bases.

    Arrays: ``V`` (m x n) normals, ``vidx`` (P,) normal index, ``c`` (P x d)
    base centers, ``ell`` (P,) base sides, ``K`` (P x 2) height intervals.
    ``keys`` are stable string ids used in serialization.
    """

    def __init__(self, V, vidx, c, ell, K, keys=None, meta=None):
        self.V = _normals(V)
        n = self.V.shape[1]
        self.vidx = np.asarray(vidx, dtype=np.int64).reshape(-1)
        self.c = np.asarray(c, dtype=float).reshape(-1, n - 1)
        self.ell = np.asarray(ell, dtype=float).reshape(-1)
        self.K = np.asarray(K, dtype=float).reshape(-1, 2)
        P = self.vidx.size
        if not (self.c.shape[0] == self.ell.size == self.K.shape[0] == P):
            raise ShapeError("plate arrays must have matching lengths")
        if P and (self.vidx.min() < 0 or self.vidx.max() >= len(self.V)):
            raise DomainError("direction index out of range")
        if np.any(self.K[:, 1] <= self.K[:, 0]) or np.any(self.K[:, 1] - self.K[:, 0] > self.ell * (1 + 1e-12)):
            raise DomainError("need nondegenerate K with |K| <= ell_I")
        self.keys = [f"p{i}" for i in range(P)] if keys is None else list(keys)
        self.meta = dict(meta or {})
        for arr in (self.V, self.vidx, self.c, self.ell, self.K):
            arr.setflags(write=False)

    @classmethod
    def from_plates(cls, plates, meta=None):
        plates = list(plates)
        if not plates:
            raise DomainError("need at least one plate")
        V, vidx = [], []
        for p in plates:
            if p.frame is not None:
                raise DomainError("collections hold axis-parallel bases only")
            for j, u in enumerate(V):
                if np.allclose(u, p.v, atol=1e-14):
                    vidx.append(j)
                    break
            else:
                V.append(p.v)
                vidx.append(len(V) - 1)
        keys = [p.id if p.id is not None else f"p{i}" for i, p in enumerate(plates)]
        return cls(np.array(V), vidx, np.array([p.c_I for p in plates]), [p.ell for p in plates],
                   [p.K for p in plates], keys, meta)

    def __len__(self):
        return self.vidx.size

    @property
    def n(self):
        return self.V.shape[1]

    @property
    def d(self):
        return self.n - 1

    @property
    def w(self):
        """Slopes ``v'/v_n`` of every plate (P x d)."""
        W = self.V[:, :-1] / self.V[:, -1:]
        return W[self.vidx]

    @property
    def heights(self):
        return self.K[:, 1] - self.K[:, 0]

    def volumes(self):
        return self.ell**self.d * self.heights

    def plate(self, i):
        i = int(i)
        return ShearedPlate(self.c[i], self.ell[i], tuple(self.K[i]), self.V[self.vidx[i]], self.keys[i])

    def direction(self, j):
        return np.flatnonzero(self.vidx == j)

    def bounds(self):
        """Axis-aligned box containing every plate."""
        spread = 0.5 * self.ell * np.sum(np.abs(self.w), axis=1)
        lo = np.column_stack([self.c - 0.5 * self.ell[:, None], self.K[:, 0] - spread])
        hi = np.column_stack([self.c + 0.5 * self.ell[:, None], self.K[:, 1] + spread])
        return lo.min(axis=0), hi.max(axis=0)

    def grid(self, spacing, margin=0.0):
        lo, hi = self.bounds()
        return CellGrid.covering(lo - margin, hi + margin, spacing)

    def subset(self, indices):
        idx = np.asarray(indices)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return PlateCollection(self.V, self.vidx[idx], self.c[idx], self.ell[idx], self.K[idx],
                               [self.keys[i] for i in idx], self.meta)

    # ---- order and containment

    def base_contained(self, i, j):
        """``I_i within I_j`` for all index pairs (broadcast)."""
        gap = np.max(np.abs(self.c[i] - self.c[j]), axis=-1)
        return gap + 0.5 * self.ell[i] <= 0.5 * self.ell[j] + 1e-12

    def intersects(self, i, j):
        """Interiors of plates i and j meet, for plates with ``I_i within I_j``."""
        wi, wj = self.w[i], self.w[j]
        g0 = -np.sum(wj * (self.c[i] - self.c[j]), axis=-1)
        spread = 0.5 * self.ell[i] * np.sum(np.abs(wi - wj), axis=-1)
        hi = self.K[i, 1] - self.K[j, 0]
        lo = self.K[i, 0] - self.K[j, 1]
        return (g0 - spread < hi) & (g0 + spread > lo)

    def leq(self, i, j):
        """The partial order: ``Q_i <= Q_j`` iff they meet and ``I_i within I_j``."""
        i, j = np.broadcast_arrays(np.asarray(i), np.asarray(j))
        return self.base_contained(i, j) & self.intersects(i, j)

    def below(self, j, among=None):
        """Indices i (optionally restricted to ``among``) with ``Q_i <= Q_j``."""
        idx = np.arange(len(self)) if among is None else np.asarray(among)
        return idx[self.leq(idx, np.full(idx.size, j))]

    def contained_in(self, plate):
        """Mask of members lying inside the sheared plate ``plate`` (axis-parallel base)."""
        if plate.frame is not None or plate.d != self.d:
            raise DomainError("container must be an axis-parallel plate of the same dimension")
        gap = np.max(np.abs(self.c - plate.c_I), axis=1)
        base = gap + 0.5 * self.ell <= 0.5 * plate.ell + 1e-12
        # slice offsets a(x) = w.(x - c); need K_L - a_L(x) inside K_T - a_T(x) for x in I_L
        dw = plate.w - self.w
        center = (self.c - plate.c_I) @ plate.w
        spread = 0.5 * self.ell * np.sum(np.abs(dw), axis=1)
        low_ok = self.K[:, 0] + center - spread >= plate.K[0] - 1e-12
        high_ok = self.K[:, 1] + center + spread <= plate.K[1] + 1e-12
        return base & low_ok & high_ok

    # ---- rasterization

    def _kernel(self, grid, mode, field=None, weight=None, owner=None, best=None):
        if grid.n != self.n:
            raise ShapeError("grid and plates have different dimensions")
        field = np.zeros((grid.columns, grid.shape[-1])) if field is None else field
        weight = np.zeros(len(self)) if weight is None else np.ascontiguousarray(weight, dtype=float)
        owner = np.zeros((1, 1), dtype=np.int64) if owner is None else owner
        best = np.zeros((1, 1)) if best is None else best
        return plate_cells(mode, field, owner, best, np.array(grid.base_shape, dtype=np.int64),
                           grid.lower[:-1].copy(), grid.spacing[:-1].copy(), float(grid.lower[-1]),
                           float(grid.spacing[-1]), np.ascontiguousarray(self.c), self.ell.copy(),
                           self.K[:, 0].copy(), self.K[:, 1].copy(), np.ascontiguousarray(self.w), weight)

    def rasterize(self, grid, weights):
        """``sum_i weights[i] 1_{Q_i}`` on the cells of ``grid``."""
        out = np.zeros((grid.columns, grid.shape[-1]))
        self._kernel(grid, 0, field=out, weight=weights)
        return out.reshape(grid.shape)

    def cell_counts(self, grid):
        _, counts = self._kernel(grid, 2)
        return counts

    def plate_sums(self, grid, values):
        flat = np.ascontiguousarray(np.asarray(values, dtype=float).reshape(grid.columns, grid.shape[-1]))
        sums, counts = self._kernel(grid, 2, field=flat)
        return sums, counts

    def shadow(self, grid, indices=None):
        """Cell-counted measure of the union of the selected plates."""
        weights = np.zeros(len(self))
        weights[np.arange(len(self)) if indices is None else np.asarray(indices)] = 1.0
        return float(np.count_nonzero(self.rasterize(grid, weights)) * grid.cell_volume)

    def owners(self, grid, scores):
        """Per cell, the containing plate of largest score (-1 where no plate contains the cell)."""
        owner = np.full((grid.columns, grid.shape[-1]), -1, dtype=np.int64)
        best = np.full(owner.shape, -np.inf)
        self._kernel(grid, 1, weight=scores, owner=owner, best=best)
        return owner.reshape(grid.shape)

    def to_dict(self):
        return {"V": self.V.tolist(), "vidx": self.vidx.tolist(), "c": self.c.tolist(), "ell": self.ell.tolist(),
                "K": self.K.tolist(), "keys": self.keys, "meta": self.meta}

    @classmethod
    def from_dict(cls, data):
        return cls(data["V"], data["vidx"], data["c"], data["ell"], data["K"], data["keys"], data.get("meta"))


def dyadic_starts(level, shift, lo, hi, side):
    """Left ends of the cubes of the shifted dyadic grid at one level inside ``[lo, hi)``.

    The grid is ``2^-k (Z + (-1)^k t/3)`` scaled by ``side * 2^k`` so that
    level k has cells of length ``side``; shifts t in {0, 1, 2} keep nesting.
    """
    offset = ((-1) ** level) * shift / 3.0 * side
    first = math.ceil((lo - offset) / side - 1e-9)
    last = math.floor((hi - offset) / side + 1e-9) - 1
    return offset + side * np.arange(first, last + 1)


def build_lattice(V, delta, box, depth, top_scale=1.0, shift=None, kgrid=0):
    """The plates ``D_{V,delta}`` of a dyadic grid inside a working box.

    Base cubes have sides ``top_scale * 2^-j`` for ``j < depth`` and lie in the
    first d coordinates of ``box``; height intervals of length delta come from
    the grid ``delta (Z + kgrid/3)`` and lie in the last coordinate range.
    ``shift`` in {0, 1, 2}^d selects one of the 3^d shifted dyadic grids.
    """
    V = _normals(V)
    n = V.shape[1]
    d = n - 1
    delta = check_positive(delta, "delta")
    depth = check_int(depth, "depth", 1)
    top_scale = check_positive(top_scale, "top_scale")
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    if lo.size != n or hi.size != n or np.any(hi <= lo):
        raise ShapeError("box must be (lower, upper) in R^n")
    shift = (0,) * d if shift is None else tuple(int(s) for s in shift)
    if len(shift) != d or any(s not in (0, 1, 2) for s in shift) or kgrid not in (0, 1, 2):
        raise DomainError("shift entries and kgrid must be in {0, 1, 2}")
    if top_scale * 2.0 ** -(depth - 1) < delta - 1e-12:
        raise DomainError("smallest base side is below the thickness delta")
    koff = kgrid * delta / 3
    kstarts = koff + delta * np.arange(math.ceil((lo[-1] - koff) / delta - 1e-9),
                                       math.floor((hi[-1] - koff) / delta + 1e-9))
    rows_c, rows_ell, rows_K, rows_v, keys = [], [], [], [], []
    for level in range(depth):
        side = top_scale * 2.0**-level
        axes = [dyadic_starts(level, shift[a], lo[a], hi[a], side) for a in range(d)]
        if any(a.size == 0 for a in axes):
            continue
        corners = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
        idx = np.stack(np.meshgrid(*[np.arange(a.size) for a in axes], indexing="ij"), -1).reshape(-1, d)
        for vi in range(len(V)):
            for b, corner in enumerate(corners):
                for kk, k0 in enumerate(kstarts):
                    rows_c.append(corner + 0.5 * side)
                    rows_ell.append(side)
                    rows_K.append((k0, k0 + delta))
                    rows_v.append(vi)
                    keys.append(f"v{vi}/L{level}/I{','.join(map(str, idx[b]))}/K{kk}")
    if not rows_c:
        raise DomainError("the box holds no plate of the requested scales")
    meta = {"kind": "dyadic", "delta": delta, "depth": depth, "top_scale": top_scale, "shift": list(shift),
            "kgrid": kgrid, "box": [lo.tolist(), hi.tolist()],
            "truncation": "plates enumerated inside the working box only; scales limited by depth"}
    return PlateCollection(V, rows_v, np.array(rows_c), rows_ell, rows_K, keys, meta)


# ----------------------------------------------------------------------------
# selections and Carleson sequences


class Selection:
    """Pairwise disjoint regions ``F_Q within Q`` as an owner label per grid cell (-1: none)."""

    def __init__(self, collection, grid, owner):
        owner = np.asarray(owner, dtype=np.int64).reshape(grid.shape)
        if owner.max(initial=-1) >= len(collection):
            raise DomainError("owner label out of range")
        self.collection = collection
        self.grid = grid
        self.owner = owner

    @classmethod
    def from_regions(cls, collection, grid, regions, check_containment=True):
        """Build from ``{plate index: boolean cell mask or flat cell indices}``.

        Overlapping regions raise DisjointnessError naming the first pair; a
        region leaving its plate raises DomainError.
        """
        owner = np.full(grid.size, -1, dtype=np.int64)
        for q, region in regions.items():
            region = np.asarray(region)
            cells = np.flatnonzero(region.reshape(-1)) if region.dtype == bool else region.reshape(-1)
            clash = owner[cells] >= 0
            if np.any(clash):
                other = int(owner[cells[np.argmax(clash)]])
                raise DisjointnessError((collection.keys[other], collection.keys[q]))
            owner[cells] = q
        sel = cls(collection, grid, owner)
        if check_containment:
            sel.check_containment()
        return sel

    def check_containment(self):
        inside = np.ones(self.grid.size, dtype=bool)
        flat = self.owner.reshape(-1)
        for q in np.unique(flat[flat >= 0]):
            mask = self.collection.subset([q]).rasterize(self.grid, [1.0]).reshape(-1) > 0
            inside &= ~((flat == q) & ~mask)
        if not inside.all():
            bad = int(flat[np.argmin(inside)])
            raise DomainError(f"region of plate {self.collection.keys[bad]} leaves the plate")

    def collision_audit(self, samples=MC_COLLISION_SAMPLES, seed=None):
        """Sampled check that no point is claimed twice; exact here, kept for the report."""
        rng = as_generator(seed)
        cells = rng.integers(0, self.grid.size, samples)
        flat = self.owner.reshape(-1)
        return {"samples": int(samples), "claimed": int(np.count_nonzero(flat[cells] >= 0)), "collisions": 0}

    def region_measures(self, E=None):
        """``|F_Q & E|`` for every plate by cell counting (E a boolean cell mask, default everything)."""
        flat = self.owner.reshape(-1)
        keep = flat >= 0
        if E is not None:
            keep &= np.asarray(E, dtype=bool).reshape(-1)
        counts = np.bincount(flat[keep], minlength=len(self.collection))
        return counts * self.grid.cell_volume


def random_selection(collection, grid, seed=None, coverage=1.0):
    """Assign each covered cell to a random containing plate; a fraction ``1 - coverage`` of cells stays free."""
    rng = as_generator(seed)
    owner = collection.owners(grid, rng.random(len(collection)))
    if coverage < 1.0:
        owner[rng.random(owner.shape) >= coverage] = -1
    return Selection(collection, grid, owner)


def linearize(collection, grid, values):
    """Selection realizing the maximal operator: each cell goes to the containing plate with largest average of |f|."""
    sums, counts = collection.plate_sums(grid, np.abs(values))
    averages = np.where(counts > 0, sums / np.maximum(counts, 1), -1.0)
    return Selection(collection, grid, collection.owners(grid, averages))


@dataclass
class CarlesonSequence:
    collection: PlateCollection
    a: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float).reshape(-1)
        if self.a.size != len(self.collection):
            raise ShapeError("one coefficient per plate")
        if np.any(self.a < 0):
            raise DomainError("coefficients must be nonnegative")

    @property
    def mass(self):
        return float(self.a.sum())

    def mass_of(self, indices):
        return float(self.a[np.asarray(indices, dtype=np.int64)].sum()) if len(indices) else 0.0

    @property
    def support(self):
        return np.flatnonzero(self.a > 0)

    def __add__(self, other):
        if other.collection is not self.collection:
            raise DomainError("sequences live on different collections")
        return CarlesonSequence(self.collection, self.a + other.a, {"sum": True})

    def to_dict(self):
        keys = self.collection.keys
        return {"collection": self.collection.to_dict(), "mass": self.mass, "meta": self.meta,
                "a": {keys[i]: float(self.a[i]) for i in self.support}}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        coll = PlateCollection.from_dict(data["collection"])
        index = {k: i for i, k in enumerate(coll.keys)}
        a = np.zeros(len(coll))
        for k, val in data["a"].items():
            a[index[k]] = val
        return cls(coll, a, data.get("meta", {}))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def adjoint_sequence(collection, selection, E, grid=None):
    """``a_Q = |F_Q & E|`` for a linearizing selection; Carleson by construction.

    ``selection`` is a Selection or a ``{plate: region}`` mapping (then
    ``grid`` is required and disjointness and containment are checked).
    ``E`` is a boolean cell mask, or None for the empty set.
    """
    if not isinstance(selection, Selection):
        if grid is None:
            raise DomainError("a region mapping needs its grid")
        selection = Selection.from_regions(collection, grid, selection)
    if E is None:
        a = np.zeros(len(collection))
    else:
        E = np.asarray(E, dtype=bool)
        if E.shape != selection.grid.shape:
            raise ShapeError("E must be a cell mask on the selection grid")
        a = selection.region_measures(E)
    return CarlesonSequence(collection, a, {"source": "adjoint", "grid": selection.grid.to_dict()})


def single_direction_families(collection, count, seed=None, max_members=6):
    """Random families T of plates with one normal: towers (enlarged lattice plates) and packings.

    Members are lattice plates dilated in base and height by factors in
    [1, 4] (kept within |K| <= ell), so that many lattice plates of other
    directions are contained in them.
    """
    rng = as_generator(seed)
    out = []
    for f in range(count):
        j = int(rng.integers(len(collection.V)))
        pool = collection.direction(j)
        if pool.size == 0:
            continue
        members = []
        for q in rng.choice(pool, size=int(rng.integers(1, max_members + 1))):
            p = collection.plate(q)
            fb = float(rng.uniform(1.0, 4.0))
            fk = float(rng.uniform(1.0, 4.0 if f % 2 else 16.0))
            ck = 0.5 * (p.K[0] + p.K[1])
            half = min(0.5 * p.height * fk, 0.5 * p.ell * fb)
            members.append(ShearedPlate(p.c_I, p.ell * fb, (ck - half, ck + half), p.v, f"T{f}.{len(members)}"))
        out.append({"direction": j, "plates": members, "kind": "packing" if f % 2 else "tower"})
    return out


def subordination_audit(seq, grid, families):
    """For each single-direction family T: mass of the lattice plates inside some T vs ``|sh(T)|``."""
    rows = []
    for fam in families:
        inside = np.zeros(len(seq.collection), dtype=bool)
        for t in fam["plates"]:
            inside |= seq.collection.contained_in(t)
        container = PlateCollection.from_plates(fam["plates"])
        shadow = container.shadow(grid)
        mass = seq.mass_of(np.flatnonzero(inside))
        rows.append({"kind": fam.get("kind", "given"), "direction": int(fam["direction"]),
                     "members": int(inside.sum()), "mass": mass, "shadow": shadow, "ok": mass <= shadow * (1 + 1e-9)})
    return rows


# ----------------------------------------------------------------------------
# balayage and the embedding


@dataclass
class Balayage:
    values: np.ndarray
    grid: CellGrid

    def integral(self):
        return float(self.values.sum() * self.grid.cell_volume)

    def norm(self, p=2):
        if math.isinf(p):
            return float(np.abs(self.values).max())
        return float((np.sum(np.abs(self.values) ** p) * self.grid.cell_volume) ** (1.0 / p))

    def to_grid_function(self):
        if not np.allclose(self.grid.spacing, self.grid.spacing[0]):
            raise DomainError("only isotropic grids convert to a GridFunction")
        h = float(self.grid.spacing[0])
        return GridFunction(self.values, self.grid.lower + 0.5 * h, h)


def _select(seq, subset):
    if subset is None:
        return np.ones(len(seq.collection), dtype=bool)
    if callable(subset):
        return np.array([bool(subset(seq.collection.plate(i))) for i in range(len(seq.collection))])
    subset = np.asarray(subset)
    if subset.dtype == bool:
        return subset
    mask = np.zeros(len(seq.collection), dtype=bool)
    mask[subset] = True
    return mask


def balayage(seq, grid, subset=None):
    """``T_Q(a) = sum a_Q 1_Q / |Q|`` over the selected plates, on the cells of ``grid``.

    The vertical spacing must resolve the thinnest plate (``h <= delta/4``).
    """
    coll = seq.collection
    if grid.spacing[-1] > coll.heights.min() / BALAYAGE_RESOLUTION * (1 + 1e-9):
        raise DomainError("vertical spacing does not resolve the plate thickness (need h <= delta/4)")
    mask = _select(seq, subset)
    weights = np.where(mask, seq.a / coll.volumes(), 0.0)
    return Balayage(coll.rasterize(grid, weights), grid)


def log_factor(count):
    """``log #V``, floored at 1 so that a single direction gives a finite quotient."""
    return max(math.log(count), 1.0)


def embedding_audit(seq, grid, subset=None, seed=None):
    """``||T_Q(a)||_2`` against ``(log #V)^{1/2} mass^{1/2}``.

    The weak-(1,1) hypothesis on each direction is structural here: all
    plates of one direction have the same thickness, so the dyadic maximal
    operator along them is of weak type (1,1); this is recorded, not tested.
    """
    mask = _select(seq, subset)
    T = balayage(seq, grid, mask)
    mass = float(seq.a[mask].sum())
    dirs = np.unique(seq.collection.vidx[mask & (seq.a > 0)])
    count = max(int(dirs.size), 1)
    l2 = T.norm(2)
    factor = log_factor(count)
    return {
        "n": seq.collection.n, "directions": count, "plates": int(mask.sum()),
        "mass": mass, "l2": l2, "log_factor": factor,
        "quotient": l2 / math.sqrt(factor * mass) if mass > 0 else 0.0,
        "integral": T.integral(), "seed": seed,
        "weak11": "structural: fixed thickness per direction (recorded, not tested)",
        "truncation": seq.collection.meta.get("truncation", "explicit plate family"),
    }


# ----------------------------------------------------------------------------
# hat plates and the exponential decay audit


def hat_frame(wq, wr):
    """Orthonormal basis of the base space whose first d-1 vectors span ``{x : (wq - wr).x = 0}``."""
    dw = np.asarray(wq, float) - np.asarray(wr, float)
    d = dw.size
    norm = np.linalg.norm(dw)
    if norm == 0.0:
        return np.eye(d)
    g = dw / norm
    # complete g to an orthonormal basis with g last
    basis = np.linalg.qr(np.column_stack([g, np.eye(d)]))[0][:, :d]
    basis[:, 0] = g if basis[:, 0] @ g > 0 else -g
    return np.column_stack([basis[:, 1:], basis[:, 0]])


def hat_side(ell, frame):
    """Side of the smallest cube with axes ``frame`` containing an axis-parallel cube of side ell."""
    return float(ell * np.max(np.sum(np.abs(frame), axis=0)))


def hat_plate(Q, R):
    """The rotated, tangentially dilated ``Q_hat`` relative to R (``Q_hat = Q`` when the normals agree)."""
    if np.allclose(Q.v, R.v, atol=1e-14):
        return Q
    frame = hat_frame(Q.w, R.w)
    return ShearedPlate(Q.c_I, hat_side(Q.ell, frame), Q.K, Q.v, Q.id, frame=frame)


def hat_base(R):
    """``R_hat = P(d I_R, K_R, v_R)``."""
    return R.with_base(R.c_I, R.d * R.ell)


def hat_audit(Q, R, samples=10_000, seed=None):
    """Sampled containment ``Q within Q_hat`` and the volume ratio ``|Q_hat| / |Q|``."""
    rng = as_generator(seed)
    hq = hat_plate(Q, R)
    pts = Q.sample_inside(samples, rng)
    return {"contained": float(np.mean(hq.contains(pts))), "ratio": hq.volume() / Q.volume(),
            "side_ratio": hq.ell / Q.ell}


def _hat_overlaps(coll, q_idx, r, resolution=HAT_QUADRATURE):
    """``|Q_hat & R_hat| / |Q_hat|`` for the plates ``q_idx`` against plate r, by base quadrature."""
    d = coll.d
    W = coll.w
    wr, cr, er, Kr = W[r], coll.c[r], coll.ell[r], coll.K[r]
    u = (np.arange(resolution) + 0.5) / resolution - 0.5
    grid = np.stack(np.meshgrid(*([u] * d), indexing="ij"), -1).reshape(-1, d)
    out = np.empty(len(q_idx))
    for m, q in enumerate(q_idx):
        frame = hat_frame(W[q], wr)
        side = hat_side(coll.ell[q], frame)
        x = coll.c[q] + (side * grid) @ frame.T
        inside = np.all(np.abs(x - cr) < 0.5 * d * er, axis=1)
        aq = (x - coll.c[q]) @ W[q]
        ar = (x - cr) @ wr
        top = np.minimum(coll.K[q, 1] - aq, Kr[1] - ar)
        bot = np.maximum(coll.K[q, 0] - aq, Kr[0] - ar)
        overlap = np.clip(top - bot, 0.0, None) * inside
        # |Q_hat| = side^d |K_Q|; the quadrature weight side^d / resolution^d cancels
        out[m] = overlap.mean() / (coll.K[q, 1] - coll.K[q, 0])
    return out


def B_values(seq, direction, among=None, resolution=HAT_QUADRATURE):
    """``B_R = avg over R_hat of sum_{Q <= R} a_Q 1_{Q_hat}/|Q_hat|`` for the plates R of one direction."""
    coll = seq.collection
    R_idx = coll.direction(direction) if among is None else np.asarray(among)
    support = seq.support
    out = np.zeros(R_idx.size)
    for m, r in enumerate(R_idx):
        q_idx = coll.below(r, support)
        if q_idx.size == 0:
            continue
        frac = _hat_overlaps(coll, q_idx, r, resolution)
        # |R_hat| = (d ell_R)^d |K_R|
        vol_hat_r = (coll.d * coll.ell[r]) ** coll.d * (coll.K[r, 1] - coll.K[r, 0])
        out[m] = float(np.sum(seq.a[q_idx] * frac)) / vol_hat_r
    return R_idx, out


def decay_audit(seq, grid, direction, k_range, mu=8.0, c_n=1.0):
    """Shadows of ``{R : B_R > c_n mu k}`` against ``2^-k mass`` for each k.

    ``direction`` is one normal index, a list of them, or None for all; with
    several directions the shadows are summed per level (and so is the
    bound). Returns rows ``(k, count, shadow, bound)``, the least-squares
    slope of log shadow against k over the levels with nonempty shadow (None
    when fewer than two are populated) and the decay ``rate`` per unit of
    threshold, ``-slope / (c_n mu)``.
    """
    coll = seq.collection
    dirs = range(len(coll.V)) if direction is None else np.atleast_1d(direction)
    B_by_dir = [B_values(seq, int(j)) for j in dirs]
    mass = seq.mass
    rows = []
    for k in k_range:
        count, shadow = 0, 0.0
        for R_idx, B in B_by_dir:
            chosen = R_idx[B > c_n * mu * k]
            count += int(chosen.size)
            shadow += coll.shadow(grid, chosen) if chosen.size else 0.0
        rows.append({"k": int(k), "count": count, "shadow": shadow, "bound": len(B_by_dir) * 2.0**-k * mass})
    pop = [(r["k"], r["shadow"]) for r in rows if r["shadow"] > 0]
    slope = float(np.polyfit([p[0] for p in pop], np.log([p[1] for p in pop]), 1)[0]) if len(pop) >= 2 else None
    max_B = max((float(B.max(initial=0.0)) for _, B in B_by_dir), default=0.0)
    return {"directions": [int(j) for j in dirs], "mu": mu, "c_n": c_n, "mass": mass, "rows": rows, "slope": slope,
            "rate": None if slope is None else -slope / (c_n * mu), "max_B": max_B,
            "ratio": max((r["shadow"] / r["bound"] for r in rows if r["bound"] > 0), default=0.0)}


def decay_csv(report):
    lines = ["k,shadow,bound"]
    lines += [f"{r['k']},{r['shadow']:.17g},{r['bound']:.17g}" for r in report["rows"]]
    return "\n".join(lines) + "\n"


def slicing_audit(count=100, seed=None, d=2, resolution=96):
    """Random configurations for the slice bound ``max slice <= C * mean over 3K``.

    Q <= R with R of normal e_n, K containing K_R and ``Pi_{e_n}(Q_hat)`` not
    inside 3K. Returns the ratios.
    """
    rng = as_generator(seed)
    ratios = []
    tries = 0
    while len(ratios) < count and tries < 50 * count:
        tries += 1
        t = math.tan(SHEAR_LIMIT) * 0.95
        wq = rng.uniform(-t, t, d) / math.sqrt(d)
        R = ShearedPlate(np.zeros(d), 1.0, (0.0, 0.05), np.append(np.zeros(d), 1.0))
        ell = 2.0 ** -int(rng.integers(0, 3))
        c = rng.uniform(-0.5 + ell / 2, 0.5 - ell / 2, d)
        k0 = rng.uniform(-0.1, 0.1)
        height = min(ell, 0.05)
        Q = ShearedPlate(c, ell, (k0, k0 + height), np.append(wq, 1.0))
        coll = PlateCollection.from_plates([Q, R])
        if not coll.leq(0, 1):
            continue
        hq = hat_plate(Q, R)
        grow = rng.uniform(1.0, 3.0)
        K = (R.K[0] - (grow - 1) * 0.025, R.K[1] + (grow - 1) * 0.025)
        lo_h, hi_h = hq.height_range()
        L = K[1] - K[0]
        if lo_h >= K[0] - L and hi_h <= K[1] + L:
            continue
        ratios.append(slice_ratio(hq, hat_base(R), K, resolution=resolution))
    return np.array(ratios)


# ----------------------------------------------------------------------------
# the Kakeya adversary


def kakeya_adversary(delta, n=3, spacing_ratio=4, dilation=3.0):
    """Carleson sequence certifying the log factor, from a Perron-tree Kakeya set.

    The planar family (tubes T, dilated tubes T*) is mapped by
    ``(x, y) -> (y, lam x)`` into the plane of the first and last coordinates
    so that every tube direction is within pi/16 of the base plane; each T*
    sits in a sheared plate Q over a cube of side ``dilation + delta`` that
    spans the middle coordinates. With A the extended union of the tubes and
    ``E = sh(Q) \\ A``, each cell of E is assigned to one plate containing it
    and ``a_Q = |F_Q & E|``. Since each plate meets A in a fixed fraction,
    ``||T_Q(a)||_2 >= c mass / |A|^{1/2}`` while ``|A| log #V`` stays bounded.
    """
    from .extremals import perron_kakeya

    n = check_int(n, "n", 2)
    fam = perron_kakeya(delta)
    star = fam.dilated(dilation)
    slope_max = max(abs(t.direction[0] / t.direction[1]) for t in fam.tubes)
    lam = 0.95 * math.tan(SHEAR_LIMIT) / slope_max
    side = dilation + delta
    d = n - 1
    V, c, K = [], [], []
    for t in star.tubes:
        corners = t.corners()
        X1, X3 = corners[:, 1], lam * corners[:, 0]
        s = lam * t.direction[0] / t.direction[1]
        c1 = t.center[1]
        tvals = X3 - s * (X1 - c1)
        V.append(np.append(np.append(-s, np.zeros(d - 1)), 1.0))
        c.append(np.append(c1, np.zeros(d - 1)))
        K.append((tvals.min(), tvals.max()))
    V = np.array(V)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    coll = PlateCollection(V, np.arange(len(V)), np.array(c), np.full(len(V), side), K,
                           [f"kakeya{j}" for j in range(len(V))],
                           {"kind": "kakeya", "delta": delta, "lambda": lam, "tubes": len(V)})
    hz = min(k[1] - k[0] for k in K) / spacing_ratio
    spacing = np.full(n, spacing_ratio * hz)
    spacing[-1] = hz
    if n > 2:
        spacing[1:-1] = side / 2
    grid = coll.grid(spacing)
    # A: the unit tubes under the same map, extended across the middle coordinates
    centers = grid.centers()
    planar = np.column_stack([centers[:, -1] / lam, centers[:, 0]])
    in_base = np.all(np.abs(centers[:, 1:-1]) <= side / 2, axis=1) if n > 2 else np.ones(len(centers), bool)
    A = (fam.contains(planar) & in_base).reshape(grid.shape)
    E = (coll.rasterize(grid, np.ones(len(coll))) > 0) & ~A
    sel = Selection(coll, grid, coll.owners(grid, np.arange(len(coll), 0, -1, dtype=float)))
    seq = adjoint_sequence(coll, sel, E)
    seq.meta.update({"kind": "kakeya adversary", "A_measure": float(A.sum() * grid.cell_volume),
                     "E_measure": float(E.sum() * grid.cell_volume)})
    return seq, grid, A
