"""Geometry of the Grassmannian Gr(d, n).

Subspaces are stored as orthonormal bases. The metric is the operator norm
of the difference of orthogonal projections, principal angles come from an
SVD of the cross-Gram matrix, and the module also provides maximal delta-nets,
near-orthogonal subsets with explicit repairs, frequency cones and the greedy
delta-cluster decomposition.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from ._validation import as_generator, check_dims, check_positive, check_vector, unit_vector
from .errors import DomainError, ShapeError

ZERO_ANGLE_TOL = 1e-9
CONE_CONSTANT = 2.0**-2
CLUSTER_CONE_CONSTANT = 2.0**-4


def orthonormalize(matrix):
    """Orthonormal basis of the column span of ``matrix`` (n x d, full rank)."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    q, r = np.linalg.qr(matrix)
    diag = np.diag(r)
    if np.any(np.abs(diag) <= 1e-12 * max(1.0, np.abs(r).max())):
        raise DomainError("columns are linearly dependent")
    return q * np.sign(diag)


class Subspace:
    """A point of Gr(d, n) held as an n x d orthonormal basis.

    Parameters
    ----------
    basis : array_like, shape (n, d) or (n,)
        Spanning vectors. They are orthonormalized unless ``orthonormal`` is
        True, in which case they are trusted as given.
    """

    __slots__ = ("_basis",)

    def __init__(self, basis, orthonormal=False):
        basis = np.array(basis, dtype=float)
        if basis.ndim == 1:
            basis = basis[:, None]
        if basis.ndim != 2 or basis.shape[1] > basis.shape[0] or basis.shape[1] < 1:
            raise ShapeError(f"basis must be n x d with 1 <= d <= n, got {basis.shape}")
        if not np.all(np.isfinite(basis)):
            raise DomainError("basis has non-finite entries")
        if not orthonormal:
            basis = orthonormalize(basis)
        basis.setflags(write=False)
        self._basis = basis

    @property
    def basis(self):
        return self._basis

    @property
    def n(self):
        return self._basis.shape[0]

    @property
    def d(self):
        return self._basis.shape[1]

    @property
    def projection_matrix(self):
        return self._basis @ self._basis.T

    def project(self, x):
        """Orthogonal projection of vectors ``x`` (shape (..., n)) onto the subspace."""
        x = np.asarray(x, dtype=float)
        return (x @ self._basis) @ self._basis.T

    def project_norm(self, x):
        """|Pi x| for vectors x of shape (..., n)."""
        return np.linalg.norm(np.asarray(x, dtype=float) @ self._basis, axis=-1)

    def complement(self):
        """Orthogonal complement, or raises for d = n."""
        if self.d == self.n:
            raise DomainError("the complement of the whole space is trivial")
        return Subspace(complement_basis(self._basis), orthonormal=True)

    def rotate(self, rotation):
        return Subspace(np.asarray(rotation, dtype=float) @ self._basis, orthonormal=True)

    def contains(self, vector, tol=1e-10):
        v = check_vector(vector, self.n)
        return np.linalg.norm(v - self.project(v)) <= tol * max(1.0, np.linalg.norm(v))

    def to_list(self):
        """Basis entries in column-major order."""
        return [float(x) for x in self._basis.T.ravel()]

    @classmethod
    def from_list(cls, values, n, d):
        arr = np.asarray(values, dtype=float).reshape(d, n).T
        return cls(arr, orthonormal=True)

    @classmethod
    def coordinate(cls, n, axes):
        """Span of the standard basis vectors with the given indices."""
        axes = [axes] if np.isscalar(axes) else list(axes)
        return cls(np.eye(n)[:, axes], orthonormal=True)

    @classmethod
    def random(cls, d, n, seed=None):
        """Sample from the rotation-invariant probability measure on Gr(d, n)."""
        d, n = check_dims(d, n)
        rng = as_generator(seed)
        return cls(rng.standard_normal((n, d)))

    def __repr__(self):
        return f"Subspace(d={self.d}, n={self.n})"


def complement_basis(basis):
    """Orthonormal basis of the orthogonal complement of span(basis)."""
    n, d = basis.shape
    q, _ = np.linalg.qr(np.hstack([basis, np.eye(n)]))
    comp = q[:, d:n]
    comp = comp - basis @ (basis.T @ comp)
    return orthonormalize(comp)


def _check_pair(a, b):
    if a.n != b.n:
        raise ShapeError(f"ambient dimensions differ: {a.n} vs {b.n}")
    if a.d != b.d:
        raise ShapeError(f"subspace dimensions differ: {a.d} vs {b.d}")


def metric_distance(a, b):
    """Operator norm of the difference of the orthogonal projections onto a and b."""
    _check_pair(a, b)
    diff = a.projection_matrix - b.projection_matrix
    # evaluate both orders so the result is symmetric bit for bit
    value = max(float(np.max(np.abs(np.linalg.eigvalsh(diff)))), float(np.max(np.abs(np.linalg.eigvalsh(-diff)))))
    return min(value, 1.0)


def pairwise_distances(bases):
    """Matrix of metric distances for stacked bases of shape (N, n, d)."""
    bases = np.asarray(bases, dtype=float)
    N, n, d = bases.shape
    if d == 1:
        u = bases[:, :, 0]
        c = np.clip(np.abs(u @ u.T), 0.0, 1.0)
        out = np.sqrt(np.maximum(1.0 - c * c, 0.0))
        np.fill_diagonal(out, 0.0)
        return out
    proj = np.einsum("kia,kja->kij", bases, bases)
    out = np.zeros((N, N))
    for i in range(N):
        diff = proj[i][None] - proj[i + 1:]
        if diff.shape[0]:
            vals = np.abs(np.linalg.eigvalsh(diff)).max(axis=1)
            out[i, i + 1:] = vals
            out[i + 1:, i] = vals
    return np.minimum(out, 1.0)


@dataclass(frozen=True)
class PrincipalDecomposition:
    """Principal angles and canonical bases of a pair of subspaces.

    ``angles`` are ascending, ``basis_s``/``basis_t`` hold the canonical
    vectors s_j, t_j as columns, ``basis_z`` spans span(sigma, tau) with the
    columns s_1..s_d followed by the unit vectors z_j for nonzero angles, and
    ``m`` is the number of zero angles.
    """

    angles: np.ndarray
    basis_s: np.ndarray
    basis_t: np.ndarray
    basis_z: np.ndarray
    m: int
    cosines: np.ndarray

    @property
    def largest(self):
        return float(self.angles[-1])

    @property
    def extra(self):
        """The z_j for the nonzero angles, as columns."""
        return self.basis_z[:, self.basis_s.shape[1]:]


def principal_angles(a, b, tol=ZERO_ANGLE_TOL):
    """Principal angles and canonical bases of the pair (a, b)."""
    _check_pair(a, b)
    check_positive(tol, "tol")
    u, cos, vt = np.linalg.svd(a.basis.T @ b.basis)
    s_vec = a.basis @ u
    t_vec = b.basis @ vt.T
    resid = t_vec - a.basis @ (a.basis.T @ t_vec)
    sin = np.linalg.norm(resid, axis=0)
    proj = np.einsum("ij,ij->j", s_vec, t_vec)
    angles = np.arctan2(sin, np.abs(proj))
    # canonical vectors may come back with t_j pointing against s_j
    sign = np.where(proj < 0, -1.0, 1.0)
    t_vec = t_vec * sign
    order = np.argsort(angles, kind="stable")
    angles, s_vec, t_vec, resid, sin = angles[order], s_vec[:, order], t_vec[:, order], resid[:, order] * sign[order], sin[order]
    cos = np.cos(angles)
    m = int(np.sum(angles <= tol))
    z_cols = []
    for j in range(m, a.d):
        z_cols.append(resid[:, j] / sin[j])
    z = np.column_stack([s_vec] + z_cols) if z_cols else s_vec.copy()
    if z_cols:
        # re-orthonormalize the z block against s and itself for numerical hygiene
        zb = np.column_stack(z_cols)
        zb = zb - s_vec @ (s_vec.T @ zb)
        q, r = np.linalg.qr(zb)
        z = np.column_stack([s_vec, q * np.sign(np.diag(r))])
    for arr in (angles, s_vec, t_vec, z, cos):
        arr.setflags(write=False)
    return PrincipalDecomposition(angles=angles, basis_s=s_vec, basis_t=t_vec, basis_z=z, m=m, cosines=cos)


class DirectionSet:
    """A finite subset of Gr(d, n).

    Parameters
    ----------
    elements : sequence of Subspace or array of shape (N, n, d)
    separation : float, optional
        Declared lower bound for pairwise distances; checked when ``validate``.
    provenance : {"net", "random", "explicit"}
    """

    PROVENANCES = ("net", "random", "explicit")

    def __init__(self, elements, separation=None, provenance="explicit", validate=True, n=None, d=None):
        if provenance not in self.PROVENANCES:
            raise DomainError(f"provenance must be one of {self.PROVENANCES}, got {provenance!r}")
        if isinstance(elements, np.ndarray) and elements.ndim == 3:
            bases = np.array(elements, dtype=float)
        else:
            elements = list(elements)
            if elements:
                first = elements[0]
                for e in elements:
                    if e.n != first.n or e.d != first.d:
                        raise ShapeError("all elements must lie in the same Grassmannian")
                bases = np.stack([e.basis for e in elements])
            else:
                if n is None or d is None:
                    raise ShapeError("an empty DirectionSet needs explicit n and d")
                bases = np.zeros((0, n, d))
        bases.setflags(write=False)
        self._bases = bases
        self.separation = None if separation is None else float(separation)
        self.provenance = provenance
        if validate and self.separation is not None and len(self) > 1:
            gap = self.min_separation()
            if gap < self.separation - 1e-12:
                raise DomainError(f"declared separation {self.separation} but minimum distance is {gap}")

    @property
    def bases(self):
        return self._bases

    @property
    def n(self):
        return self._bases.shape[1]

    @property
    def d(self):
        return self._bases.shape[2]

    def __len__(self):
        return self._bases.shape[0]

    def __getitem__(self, i):
        return Subspace(self._bases[i], orthonormal=True)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def elements(self):
        return list(self)

    def subset(self, indices, separation="keep"):
        sep = self.separation if separation == "keep" else separation
        return DirectionSet(self._bases[np.asarray(indices, dtype=int)], sep, self.provenance, validate=False,
                            n=self.n, d=self.d)

    def line_vectors(self):
        """Unit vectors representing the elements when d = 1 (the line) or d = n - 1 (the normal)."""
        if self.d == 1:
            return self._bases[:, :, 0]
        if self.d == self.n - 1:
            u, _, _ = np.linalg.svd(self._bases, full_matrices=True)
            return u[:, :, -1]
        raise DomainError("line representation needs d = 1 or d = n - 1")

    def min_separation(self):
        if len(self) < 2:
            return math.inf
        if min(self.d, self.n - self.d) == 1 and len(self) > 2000:
            vec = self.line_vectors()
            tree = cKDTree(np.vstack([vec, -vec]))
            _, nb = tree.query(vec, k=3)
            best = 0.0
            for col in (1, 2):
                other = np.vstack([vec, -vec])[nb[:, col]]
                dots = np.abs(np.einsum("ij,ij->i", vec, other))
                # the antipode of a point itself has |dot| = 1; skip self matches
                own = (nb[:, col] % len(vec)) == np.arange(len(vec))
                dots[own] = 0.0
                best = max(best, float(dots.max()))
            return math.sqrt(max(0.0, 1.0 - best * best))
        dist = pairwise_distances(self._bases)
        np.fill_diagonal(dist, np.inf)
        return float(dist.min())

    def project_norms(self, vectors):
        """|Pi_sigma v| for every element (rows) and vector (columns)."""
        vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
        coeff = np.einsum("kia,pi->kpa", self._bases, vectors)
        return np.linalg.norm(coeff, axis=2)

    def to_dict(self):
        return {
            "n": self.n,
            "d": self.d,
            "delta": self.separation,
            "provenance": self.provenance,
            "elements": [[float(x) for x in b.T.ravel()] for b in self._bases],
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict())
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, data):
        n, d = int(data["n"]), int(data["d"])
        elements = data["elements"]
        bases = np.array([np.asarray(e, dtype=float).reshape(d, n).T for e in elements]).reshape(len(elements), n, d)
        return cls(bases, data.get("delta"), data.get("provenance", "explicit"), validate=False, n=n, d=d)

    @classmethod
    def from_json(cls, text_or_path):
        text = text_or_path
        if not text_or_path.lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        return f"DirectionSet(N={len(self)}, d={self.d}, n={self.n}, separation={self.separation}, provenance={self.provenance!r})"


def random_direction_set(d, n, count, seed=None):
    rng = as_generator(seed)
    g = rng.standard_normal((count, n, d))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]
    return DirectionSet(q, None, "random", validate=False, n=n, d=d)


def _line_bases_from_vectors(vectors, d, n):
    """Bases for lines (d = 1) or hyperplanes (d = n - 1) given unit vectors."""
    if d == 1:
        return vectors[:, :, None].copy()
    # hyperplane with the given normal: Householder reflection maps e_1 to the normal
    out = np.empty((vectors.shape[0], n, n - 1))
    e1 = np.zeros(n)
    e1[0] = 1.0
    for k, u in enumerate(vectors):
        w = u - e1 if u[0] < 0 else u + e1
        w = w / np.linalg.norm(w)
        h = np.eye(n) - 2.0 * np.outer(w, w)
        out[k] = h[:, 1:]
    return out


def greedy_net(d, n, delta, seed=None, stop_after=None):
    """Random greedy maximal delta-separated subset of Gr(d, n).

    Candidates are drawn from the invariant measure and accepted when they are
    at distance >= delta from every accepted element. Sampling stops after
    ``stop_after`` consecutive rejections (default: 200 times the current
    cardinality).
    """
    d, n = check_dims(d, n)
    if d == n:
        raise DomainError("Gr(n, n) is a point; need d < n")
    delta = check_positive(delta, "delta")
    rng = as_generator(seed)
    if delta >= 1.0:
        return DirectionSet(random_direction_set(d, n, 1, rng).bases, delta, "net", validate=False)
    k = min(d, n - d)
    if k == 1:
        vectors = _greedy_lines(n, delta, rng, stop_after)
        bases = _line_bases_from_vectors(vectors, d, n)
    else:
        bases = _greedy_general(d, n, delta, rng, stop_after)
    return DirectionSet(bases, delta, "net", validate=False, n=n, d=d)


def _stop_rule(stop_after, count):
    return stop_after if stop_after is not None else 200 * max(count, 1)


def _greedy_sphere_lines(delta, rng, stop_after):
    # Same process as the plain sampler for lines in R^3, simulated exactly:
    # draws landing in pixels already known to be covered are certain
    # rejections, so their number between tested draws is geometric.
    cos_limit = math.sqrt(1.0 - delta * delta)
    chord = math.sqrt(2.0 - 2.0 * cos_limit) * (1.0 + 1e-9)
    raster = _CubeRaster(math.asin(delta))
    all_pix = np.arange(raster.covered.size)
    omega = raster.solid_angles(all_pix)
    sphere = 4.0 * math.pi
    open_pix = all_pix
    cum = np.cumsum(omega)
    accepted = []
    tree = None
    tree_pts = None
    tree_size = 0
    streak = 0
    while True:
        count = len(accepted)
        open_mass = cum[-1] / sphere
        batch = int(min(65536, count // 2 + 64))
        cand = raster.sample(open_pix, cum, batch, rng)
        skipped = rng.geometric(min(open_mass, 1.0), size=batch) - 1 if open_mass < 1.0 else np.zeros(batch, dtype=np.int64)
        free = np.ones(batch, dtype=bool)
        if tree is not None:
            dist, nearest = tree.query(cand, distance_upper_bound=chord)
            hit = np.isfinite(dist)
            if hit.any():
                dots = np.abs(np.einsum("ij,ij->i", cand[hit], tree_pts[nearest[hit]]))
                free[hit] = dots <= cos_limit
        recent = accepted[tree_size:]
        idx = np.nonzero(free)[0]
        if recent and idx.size:
            dots = np.abs(cand[idx] @ np.asarray(recent).T).max(axis=1)
            free[idx[dots > cos_limit]] = False
        # streak bookkeeping: only draws that survived the checks need a loop
        inc = skipped + (~free)
        prefix = np.concatenate([[0], np.cumsum(inc)])
        fresh = np.zeros((0, 3))
        stopped = False
        prev = 0
        for f in np.nonzero(free)[0]:
            total = streak + int(prefix[f] - prefix[prev]) + int(skipped[f])
            if total >= _stop_rule(stop_after, len(accepted)):
                stopped = True
                break
            u = cand[f]
            prev = f + 1
            if fresh.shape[0] and np.abs(fresh @ u).max() > cos_limit:
                streak = total + 1
                continue
            accepted.append(u)
            fresh = np.vstack([fresh, u[None]])
            streak = 0
        if not stopped:
            streak += int(prefix[batch] - prefix[prev])
            stopped = streak >= _stop_rule(stop_after, len(accepted))
        if stopped:
            break
        if len(accepted) - tree_size > max(64, tree_size // 32):
            pts = np.asarray(accepted)
            new = pts[tree_size:]
            tree_pts = np.vstack([pts, -pts])
            tree = cKDTree(tree_pts)
            tree_size = len(accepted)
            raster.mark(new)
            keep = ~raster.covered[open_pix]
            open_pix = open_pix[keep]
            if open_pix.size == 0:
                break
            cum = np.cumsum(omega[open_pix])
    return np.asarray(accepted)


def _greedy_lines(n, delta, rng, stop_after):
    # a line (or hyperplane normal) u; distance to v is sqrt(1 - (u.v)^2)
    cos_limit = math.sqrt(1.0 - delta * delta)
    chord = math.sqrt(2.0 - 2.0 * cos_limit) * (1.0 + 1e-9)
    accepted = []
    tree = tree_pts = None
    tree_size = 0
    streak = 0
    if n == 3 and delta < 0.5:
        return _greedy_sphere_lines(delta, rng, stop_after)
    raster = None
    marked = 0
    while True:
        count = len(accepted)
        stop = _stop_rule(stop_after, count)
        batch = int(min(65536, 4 * count + 64, max(64, (stop - streak) // 2 + 1)))
        cand = rng.standard_normal((batch, n))
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        free = np.ones(batch, dtype=bool)
        if raster is not None:
            free = ~raster.lookup(cand)
        if tree is not None and free.any():
            sub = np.nonzero(free)[0]
            dist, nearest = tree.query(cand[sub], distance_upper_bound=chord)
            hit = np.isfinite(dist)
            if hit.any():
                dots = np.abs(np.einsum("ij,ij->i", cand[sub[hit]], tree_pts[nearest[hit]]))
                free[sub[hit]] = dots <= cos_limit
        recent = accepted[tree_size:]
        idx = np.nonzero(free)[0]
        if recent and idx.size:
            dots = np.abs(cand[idx] @ np.asarray(recent).T).max(axis=1)
            idx = idx[dots <= cos_limit]
        fresh = np.zeros((0, n))
        stopped = False
        last = -1
        for i in idx:
            u = cand[i]
            if fresh.shape[0] and np.abs(fresh @ u).max() > cos_limit:
                continue
            if streak + (i - last - 1) >= _stop_rule(stop_after, len(accepted)):
                stopped = True
                break
            accepted.append(u)
            fresh = np.vstack([fresh, u[None]])
            streak = 0
            last = i
        if stopped:
            break
        streak += batch - last - 1
        if streak >= _stop_rule(stop_after, len(accepted)):
            break
        if len(accepted) - tree_size > max(64, tree_size // 32):
            pts = np.asarray(accepted)
            tree_pts = np.vstack([pts, -pts])
            tree = cKDTree(tree_pts)
            if raster is not None:
                raster.mark(pts[marked:])
                marked = len(pts)
            tree_size = len(accepted)
    return np.asarray(accepted)


class _CubeRaster:
    """Cube-map pixels of S^2 flagged when they lie wholly inside an accepted cap.

    Used only as a fast exact pre-filter: a candidate in a flagged pixel is
    certainly within the cap angle of an accepted direction.
    """

    def __init__(self, angle):
        self.angle = angle
        self.res = int(math.ceil(6.0 * math.sqrt(2.0) / angle))
        self.half = math.sqrt(2.0) / self.res * 1.01
        self.covered = np.zeros(6 * self.res * self.res, dtype=bool)

    def _locate(self, u):
        mag = np.abs(u)
        axis = np.argmax(mag, axis=1)
        top = np.take_along_axis(u, axis[:, None], axis=1)[:, 0]
        face = 2 * axis + (top < 0)
        # remaining two coordinates in increasing axis order
        first = np.where(axis == 0, u[:, 1], u[:, 0])
        second = np.where(axis == 2, u[:, 1], u[:, 2])
        scale = 0.5 * self.res / np.abs(top)
        i = np.minimum(((first * scale) + 0.5 * self.res).astype(np.int64), self.res - 1)
        j = np.minimum(((second * scale) + 0.5 * self.res).astype(np.int64), self.res - 1)
        return face, i, j, first / np.abs(top), second / np.abs(top)

    def pixel_bounds(self, pix):
        R = self.res
        f, rem = np.divmod(pix, R * R)
        i, j = np.divmod(rem, R)
        a0 = -1.0 + 2.0 * i / R
        b0 = -1.0 + 2.0 * j / R
        return f, a0, b0, 2.0 / R

    def solid_angles(self, pix):
        def corner(a, b):
            return np.arctan2(a * b, np.sqrt(1.0 + a * a + b * b))
        _, a0, b0, w = self.pixel_bounds(pix)
        a1, b1 = a0 + w, b0 + w
        return corner(a1, b1) - corner(a0, b1) - corner(a1, b0) + corner(a0, b0)

    def sample(self, pix, weights_cum, count, rng):
        """Uniform (solid-angle) samples from the union of the listed pixels."""
        out = []
        total = weights_cum[-1]
        need = count
        while need > 0:
            m = int(need * 1.6) + 16
            pick = np.searchsorted(weights_cum, rng.random(m) * total, side="right")
            pick = np.minimum(pick, len(pix) - 1)
            f, a0, b0, w = self.pixel_bounds(pix[pick])
            a = a0 + w * rng.random(m)
            b = b0 + w * rng.random(m)
            # density of solid angle in gnomonic coordinates is (1+a^2+b^2)^(-3/2)
            ac = np.minimum(np.abs(a0), np.abs(a0 + w)) * (a0 * (a0 + w) > 0)
            bc = np.minimum(np.abs(b0), np.abs(b0 + w)) * (b0 * (b0 + w) > 0)
            ratio = ((1.0 + ac * ac + bc * bc) / (1.0 + a * a + b * b)) ** 1.5
            keep = rng.random(m) < ratio
            f, a, b = f[keep][:need], a[keep][:need], b[keep][:need]
            axis = f // 2
            sign = np.where(f % 2 == 1, -1.0, 1.0)
            v = np.empty((f.size, 3))
            rows = np.arange(f.size)
            v[rows, axis] = sign
            first = np.where(axis == 0, 1, 0)
            second = np.where(axis == 2, 1, 2)
            v[rows, first] = a
            v[rows, second] = b
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            out.append(v)
            need -= f.size
        return np.vstack(out)

    def lookup(self, u):
        face, i, j, _, _ = self._locate(u)
        return self.covered[(face * self.res + i) * self.res + j]

    def mark(self, points):
        if len(points) == 0:
            return
        pts = np.vstack([points, -points])
        face, ci, cj, a, b = self._locate(pts)
        limit = math.cos(max(self.angle - self.half, 0.0)) if self.angle > self.half else 2.0
        if limit > 1.0:
            return
        R = self.res
        for p, f, i0, j0, aa, bb in zip(pts, face, ci, cj, a, b):
            w = int(math.ceil(self.angle * R * (1.0 + aa * aa + bb * bb) / 2.0)) + 1
            ii = np.arange(max(i0 - w, 0), min(i0 + w + 1, R))
            jj = np.arange(max(j0 - w, 0), min(j0 + w + 1, R))
            ga = (ii + 0.5) / R * 2.0 - 1.0
            gb = (jj + 0.5) / R * 2.0 - 1.0
            axis, sign = f // 2, (-1.0 if f % 2 else 1.0)
            others = [(1, 2), (0, 2), (0, 1)][axis]
            A, B = np.meshgrid(ga, gb, indexing="ij")
            norm = np.sqrt(1.0 + A * A + B * B)
            dot = (p[axis] * sign + p[others[0]] * A + p[others[1]] * B) / norm
            ok = dot > limit
            if ok.any():
                I, J = np.meshgrid(ii, jj, indexing="ij")
                self.covered[(f * R + I[ok]) * R + J[ok]] = True


def _greedy_general(d, n, delta, rng, stop_after):
    k = min(d, n - d)
    radius = math.sqrt(2.0 * k) * delta * (1.0 + 1e-9)
    accepted_bases = []
    accepted_proj = []
    streak = 0
    tree = None
    tree_size = 0
    while True:
        stop = _stop_rule(stop_after, len(accepted_bases))
        batch = int(min(8192, max(32, (stop - streak) // 2 + 1)))
        g = rng.standard_normal((batch, n, d))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]
        proj = np.einsum("kia,kja->kij", q, q).reshape(batch, n * n)
        stopped = False
        last = -1
        for i in range(batch):
            p = proj[i]
            near = []
            if tree is not None:
                near = tree.query_ball_point(p, radius)
            near = list(near) + list(range(tree_size, len(accepted_proj)))
            ok = True
            if near:
                cand = np.asarray([accepted_proj[j] for j in near]).reshape(-1, n, n)
                vals = np.abs(np.linalg.eigvalsh(p.reshape(n, n)[None] - cand)).max(axis=1)
                ok = bool(np.all(vals >= delta))
            if not ok:
                continue
            if streak + (i - last - 1) >= _stop_rule(stop_after, len(accepted_bases)):
                stopped = True
                break
            accepted_bases.append(q[i])
            accepted_proj.append(p)
            streak = 0
            last = i
        if stopped:
            break
        streak += batch - last - 1
        if streak >= _stop_rule(stop_after, len(accepted_bases)):
            break
        if len(accepted_proj) - tree_size > 64:
            tree = cKDTree(np.asarray(accepted_proj))
            tree_size = len(accepted_proj)
    return np.asarray(accepted_bases).reshape(len(accepted_bases), n, d)


def uniform_line_net(delta):
    """Explicit delta-separated set of lines in R^2 at equally spaced angles.

    The angular step is the smallest of the form pi/K with sin(pi/K) >= delta,
    so the set is delta-separated and every line is within angle pi/(2K) of it.
    """
    delta = check_positive(delta, "delta")
    if delta >= 1:
        count = 1
    else:
        count = max(1, int(math.floor(math.pi / math.asin(delta))))
        while count > 1 and math.sin(math.pi / count) < delta:
            count -= 1
    angles = np.arange(count) * math.pi / count
    bases = np.stack([np.cos(angles), np.sin(angles)], axis=1)[:, :, None]
    return DirectionSet(bases, delta if count > 1 else None, "net", validate=False, n=2, d=1)


def line_mesh_net(mesh):
    """Lines in R^2 at equally spaced angles whose covering radius is at most ``mesh``."""
    mesh = check_positive(mesh, "mesh")
    count = max(2, int(math.ceil(math.pi / (2.0 * math.asin(min(mesh, 1.0))))))
    angles = np.arange(count) * math.pi / count
    bases = np.stack([np.cos(angles), np.sin(angles)], axis=1)[:, :, None]
    sep = math.sin(math.pi / count)
    return DirectionSet(bases, sep, "net", validate=False, n=2, d=1)


@dataclass(frozen=True)
class NearOrthogonalResult:
    indices: np.ndarray
    subset: DirectionSet
    repaired: list
    normalized: bool


def repair_orthogonal(sigma, xi):
    """The subspace a_sigma: sigma rotated within span(sigma, xi) so that it is orthogonal to xi.

    With b_1 the normalized projection of the unit vector xi onto sigma and
    b_2, ..., b_d completing an orthonormal basis of sigma, b_1 is replaced by
    the normalized component of b_1 orthogonal to xi.
    """
    xi = np.asarray(xi, dtype=float)
    coeff = sigma.basis.T @ xi
    u = float(np.linalg.norm(coeff))
    if u <= 1e-15:
        return sigma
    b1 = sigma.basis @ (coeff / u)
    rest = sigma.basis - np.outer(b1, b1 @ sigma.basis)
    c1 = b1 - u * xi
    c1 /= np.linalg.norm(c1)
    if sigma.d == 1:
        return Subspace(c1[:, None], orthonormal=True)
    # orthonormal basis of sigma ∩ b1^perp from the deflated columns
    uu, sv, _ = np.linalg.svd(rest, full_matrices=False)
    others = uu[:, : sigma.d - 1]
    return Subspace(np.column_stack([c1, others]), orthonormal=True)


def near_orthogonal_subset(sigma_set, xi, delta):
    """Elements sigma with |Pi_sigma xi| < delta/4, each paired with its repair a_sigma."""
    delta = check_positive(delta, "delta")
    xi, normalized = unit_vector(xi, sigma_set.n)
    norms = sigma_set.project_norms(xi)[:, 0] if len(sigma_set) else np.zeros(0)
    idx = np.nonzero(norms < delta / 4.0)[0]
    repaired = [repair_orthogonal(sigma_set[i], xi) for i in idx]
    return NearOrthogonalResult(idx, sigma_set.subset(idx), repaired, normalized)


def cone_membership(sigma, delta, eta, constant=CONE_CONSTANT):
    """Whether eta lies in the two-sheeted cone |Pi_sigma eta| < constant * delta * |eta|."""
    eta = check_vector(eta, sigma.n, "eta")
    norm = np.linalg.norm(eta)
    if norm == 0:
        raise DomainError("eta must be nonzero")
    return bool(sigma.project_norm(eta) < constant * delta * norm)


def cone_matrix(sigma_set, delta, etas, constant=CONE_CONSTANT):
    """Boolean matrix [element, eta] of cone membership for unit vectors ``etas``."""
    etas = np.atleast_2d(np.asarray(etas, dtype=float))
    norms = np.linalg.norm(etas, axis=1)
    return sigma_set.project_norms(etas) < constant * delta * norms[None, :]


def sphere_mesh(n, mesh, max_points=400_000):
    """Unit vectors whose covering radius on S^{n-1} is about ``mesh`` (antipodes not removed).

    Returns the points and the mesh actually used (coarsened when the point
    budget would be exceeded).
    """
    mesh = check_positive(mesh, "mesh")
    if n == 1:
        return np.array([[1.0], [-1.0]]), mesh
    if n == 2:
        count = int(math.ceil(2 * math.pi / mesh))
        t = (np.arange(count) + 0.5) * 2 * math.pi / count
        return np.stack([np.cos(t), np.sin(t)], axis=1), mesh
    used = mesh
    while True:
        if n == 3:
            count = int(math.ceil(4 * math.pi / (used * used * 0.75)))
        else:
            step = used / math.sqrt(n - 1)
            per_axis = int(math.ceil(2.0 / step)) + 1
            count = 2 * n * per_axis ** (n - 1)
        if count <= max_points:
            break
        used *= 1.25
    if n == 3:
        i = np.arange(count) + 0.5
        z = 1.0 - 2.0 * i / count
        phi = math.pi * (1.0 + math.sqrt(5.0)) * i
        r = np.sqrt(1.0 - z * z)
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1), used
    grid = np.linspace(-1.0, 1.0, per_axis)
    mesh_pts = np.stack(np.meshgrid(*([grid] * (n - 1)), indexing="ij"), axis=-1).reshape(-1, n - 1)
    faces = []
    for axis in range(n):
        for sign in (-1.0, 1.0):
            pts = np.insert(mesh_pts, axis, sign, axis=1)
            faces.append(pts)
    pts = np.vstack(faces)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True), used


def pair_minimizer(a_basis, b_basis, iterations=50):
    """Unit vector approximately minimizing max(|Pi_a x|, |Pi_b x|) by local descent.

    Starts from the bottom eigenvector of Pi_a + Pi_b, which minimizes the sum
    of squares, then runs projected subgradient steps on the maximum.
    """
    pa = a_basis @ a_basis.T
    pb = b_basis @ b_basis.T
    _, vecs = np.linalg.eigh(pa + pb)
    x = vecs[:, 0]
    def objective(v):
        return max(v @ pa @ v, v @ pb @ v)
    best = objective(x)
    step = 0.5
    for _ in range(iterations):
        if best <= 1e-30:
            break
        fa, fb = x @ pa @ x, x @ pb @ x
        grad = 2 * (pa @ x if fa >= fb else pb @ x)
        grad = grad - (grad @ x) * x
        gnorm = np.linalg.norm(grad)
        if gnorm < 1e-15:
            break
        improved = False
        while step > 1e-8:
            y = x - step * grad / gnorm * math.sqrt(best)
            y /= np.linalg.norm(y)
            val = objective(y)
            if val < best:
                x, best, improved = y, val, True
                step = min(1.0, step * 1.5)
                break
            step *= 0.5
        if not improved:
            break
    return x


@dataclass(frozen=True)
class CandidatePolicy:
    """How the candidate pool for bad-frequency search is assembled."""

    mesh_fraction: float = 0.25
    random_factor: int = 32
    pair_minimizers: bool = True
    max_mesh_points: int = 400_000
    seed: int = 0

    def build(self, sigma_set, delta):
        rng = as_generator(self.seed)
        n = sigma_set.n
        parts = []
        mesh_pts, used = sphere_mesh(n, self.mesh_fraction * delta, self.max_mesh_points)
        # a random rotation keeps pools from different seeds independent
        rot = np.linalg.qr(rng.standard_normal((n, n)))[0]
        parts.append(mesh_pts @ rot.T)
        count = self.random_factor * len(sigma_set)
        if count:
            r = rng.standard_normal((count, n))
            parts.append(r / np.linalg.norm(r, axis=1, keepdims=True))
        if self.pair_minimizers:
            b = sigma_set.bases
            pairs = [pair_minimizer(b[i], b[j]) for i in range(len(b)) for j in range(i + 1, len(b))]
            if pairs:
                parts.append(np.asarray(pairs))
        pool = np.vstack(parts) if parts else np.zeros((0, n))
        return pool, used


@dataclass(frozen=True)
class ClusterDecomposition:
    sigma0: DirectionSet
    clusters: list
    threshold: int
    steps: int
    delta: float
    constant: float
    pool_size: int
    mesh_used: float
    labels: np.ndarray = field(repr=False)

    def cluster_sets(self):
        return [c for c, _ in self.clusters]


def overlap_threshold(N, d, n):
    if n - d <= 0:
        raise DomainError("need d < n")
    return int(math.ceil(N ** ((n - d - 1) / (n - d)) - 1e-12))


def cluster_decompose(sigma_set, delta, candidates=None, constant=CLUSTER_CONE_CONSTANT):
    """Greedy extraction of delta-clusters.

    While some candidate frequency lies in more than t = ceil(N^{(n-d-1)/(n-d)})
    of the residual cones, the candidate with the largest count is selected and
    the elements whose cone contains it are removed as one cluster.
    """
    delta = check_positive(delta, "delta")
    policy = candidates if candidates is not None else CandidatePolicy()
    N = len(sigma_set)
    d, n = sigma_set.d, sigma_set.n
    if N == 0:
        empty = DirectionSet([], None, sigma_set.provenance, n=n, d=d)
        return ClusterDecomposition(empty, [], 0, 0, delta, constant, 0, 0.0, np.zeros(0, dtype=int))
    t = overlap_threshold(N, d, n)
    pool, used = policy.build(sigma_set, delta)
    member = cone_matrix(sigma_set, delta, pool, constant).T  # pool x N
    residual = np.ones(N, dtype=bool)
    labels = np.zeros(N, dtype=int)
    clusters = []
    steps = 0
    limit = N**d
    while residual.any():
        counts = member[:, residual].sum(axis=1)
        j = int(np.argmax(counts))
        if counts[j] <= t:
            break
        take = residual & member[j]
        steps += 1
        if steps > limit:
            raise RuntimeError("cluster extraction exceeded N^d steps")
        clusters.append((sigma_set.subset(np.nonzero(take)[0]), pool[j].copy()))
        labels[take] = len(clusters)
        residual &= ~take
    sigma0 = sigma_set.subset(np.nonzero(residual)[0])
    return ClusterDecomposition(sigma0, clusters, t, steps, delta, constant, pool.shape[0], used, labels)


def certify_cluster(cluster, xi, delta):
    """Check that each element is within delta/3 of a subspace orthogonal to xi.

    Returns (ok, largest distance to the repaired subspace).
    """
    res = near_orthogonal_subset(cluster, xi, delta)
    if len(res.indices) != len(cluster):
        return False, math.inf
    worst = 0.0
    xi = np.asarray(xi, float) / np.linalg.norm(xi)
    for i, rep in zip(res.indices, res.repaired):
        if rep.project_norm(xi) > 1e-10:
            return False, math.inf
        worst = max(worst, metric_distance(rep, cluster[i]))
    return worst < delta / 3.0, worst


def overlap_audit(sigma_set, delta, pool, constant=CLUSTER_CONE_CONSTANT, threshold=None):
    """Largest number of cones containing a pool vector, and whether it is within the threshold."""
    if threshold is None:
        threshold = overlap_threshold(max(len(sigma_set), 1), sigma_set.d, sigma_set.n)
    if len(sigma_set) == 0:
        return 0, True
    worst = 0
    for start in range(0, pool.shape[0], 20000):
        m = cone_matrix(sigma_set, delta, pool[start:start + 20000], constant)
        worst = max(worst, int(m.sum(axis=0).max()))
    return worst, worst <= threshold


class GreedyNet(BaseEstimator):
    """Estimator wrapper around :func:`greedy_net`.

    ``fit`` ignores its arguments and stores the net in ``net_``.
    """

    def __init__(self, d=1, n=2, delta=0.1, stop_after=None, random_state=None):
        self.d = d
        self.n = n
        self.delta = delta
        self.stop_after = stop_after
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.net_ = greedy_net(self.d, self.n, self.delta, self.random_state, self.stop_after)
        self.cardinality_ = len(self.net_)
        return self


class ClusterDecomposer(BaseEstimator):
    """Estimator wrapper around :func:`cluster_decompose`; ``fit`` takes a DirectionSet."""

    def __init__(self, delta=0.1, constant=CLUSTER_CONE_CONSTANT, mesh_fraction=0.25, random_factor=32,
                 pair_minimizers=True, random_state=0):
        self.delta = delta
        self.constant = constant
        self.mesh_fraction = mesh_fraction
        self.random_factor = random_factor
        self.pair_minimizers = pair_minimizers
        self.random_state = random_state

    def fit(self, X, y=None):
        if not isinstance(X, DirectionSet):
            raise DomainError("ClusterDecomposer.fit expects a DirectionSet")
        seed = self.random_state if isinstance(self.random_state, int) else 0
        policy = CandidatePolicy(self.mesh_fraction, self.random_factor, self.pair_minimizers, seed=seed)
        self.decomposition_ = cluster_decompose(X, self.delta, policy, self.constant)
        self.labels_ = self.decomposition_.labels
        return self

    def predict(self, X=None):
        """Cluster label per element of the fitted set (0 means the residual set)."""
        return self.labels_
