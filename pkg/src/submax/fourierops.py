"""Frequency-side averages, cutoffs and the audits built on them.

Everything here is a Fourier multiplier on the periodic lattice of a
GridFunction. Frequencies are angular (``f(x) = sum fhat(xi) e^{i x.xi}``).
Smooth multipliers are sampled pointwise; cone and sector cutoffs are sharp
indicators.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.integrate import quad
from scipy.special import jv
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import as_generator, check_int, check_positive
from .errors import DomainError, ShapeError
from .grassmann import DirectionSet, Subspace, metric_distance
from .gridops import GridFunction

PROFILE_RADIUS = 2.0**-8
ALIAS_FRACTION = 0.45
CONE_CONSTANTS = (2.0**-2, 2.0**-4)
ANN = (2.0**-4, 2.0**-2)
ANN_PLUS = (2.0**-5, 2.0**-1)


def _bump(t):
    """exp(-1 / (1 - t^2)) on |t| < 1, zero elsewhere (t may be an array of norms)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = t < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


class BumpProfile:
    """Radial bump on R^d supported in ``radius * B_d`` with unit integral."""

    def __init__(self, d, radius=PROFILE_RADIUS):
        self.d = check_int(d, "d", 1)
        self.radius = check_positive(radius, "radius")
        # surface area of S^{d-1} times the radial integral
        surface = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
        radial, _ = quad(lambda r: math.exp(-1.0 / (1.0 - r * r)) * r ** (d - 1), 0.0, 1.0,
                         epsabs=1e-15, epsrel=1e-13, limit=200)
        self.constant = 1.0 / (surface * radial * radius**d)

    def __call__(self, norms):
        """Profile value at points of the given Euclidean norm."""
        return self.constant * _bump(np.abs(norms) / self.radius)

    @property
    def sup(self):
        return self.constant * math.exp(-1.0)

    def __repr__(self):
        return f"BumpProfile(d={self.d}, radius={self.radius:g})"


def smooth_cutoff(r):
    """Radial Phi with 1 on |xi| <= 1, 0 on |xi| >= 2, smooth in between."""
    r = np.asarray(r, dtype=float)
    a = np.where(r < 2.0, np.exp(-1.0 / np.maximum(2.0 - r, 1e-300)), 0.0)
    b = np.where(r > 1.0, np.exp(-1.0 / np.maximum(r - 1.0, 1e-300)), 0.0)
    return np.where(r <= 1.0, 1.0, np.where(r >= 2.0, 0.0, a / np.maximum(a + b, 1e-300)))


@dataclass
class SpectralField:
    """FFT of a GridFunction on its periodic lattice."""

    values: np.ndarray
    origin: np.ndarray
    h: float

    @classmethod
    def from_grid(cls, f, workers=None):
        return cls(sfft.fftn(f.values, workers=workers), np.array(f.origin), f.h)

    @property
    def shape(self):
        return self.values.shape

    @property
    def n(self):
        return self.values.ndim

    @property
    def nyquist(self):
        return math.pi / self.h

    def frequencies(self):
        """Per-axis angular frequencies, broadcastable against the field."""
        out = []
        for ax, m in enumerate(self.shape):
            k = 2 * math.pi * sfft.fftfreq(m, self.h)
            shape = [1] * self.n
            shape[ax] = m
            out.append(k.reshape(shape))
        return out

    def norm_xi(self):
        return np.sqrt(sum(k * k for k in self.frequencies()))

    def projected_norm(self, sigma):
        """|Pi_sigma xi| on the lattice."""
        freqs = self.frequencies()
        total = 0.0
        for j in range(sigma.d):
            b = sigma.basis[:, j]
            comp = sum(b[i] * freqs[i] for i in range(self.n))
            total = total + comp * comp
        return np.sqrt(np.broadcast_to(total, self.shape))

    def apply(self, multiplier):
        """Multiply by an even multiplier sampled on the lattice.

        On even-length axes the Nyquist frequency has no sampled partner of
        opposite sign, so the samples there are averaged with their lattice
        reflection; elsewhere that average is the identity.
        """
        m = np.broadcast_to(np.asarray(multiplier, dtype=float), self.shape)
        if any(k % 2 == 0 for k in self.shape):
            reflected = m
            for ax in range(self.n):
                reflected = np.roll(np.flip(reflected, axis=ax), 1, axis=ax)
            m = 0.5 * (m + reflected)
        return SpectralField(self.values * m, self.origin, self.h)

    def to_grid(self, workers=None, check_real=True):
        out = sfft.ifftn(self.values, workers=workers)
        if check_real:
            scale = max(np.abs(out).max(), 1e-300)
            if np.abs(out.imag).max() > 1e-8 * scale:
                raise DomainError("inverse transform is not real; multiplier is not even")
        return GridFunction(out.real, self.origin, self.h)

    def l2_norm(self):
        """Continuum L^2 norm of the corresponding grid function (Parseval)."""
        total = np.sum(np.abs(self.values) ** 2) / self.values.size
        return float(math.sqrt(total * self.h**self.n))


def _check_sigma(f, sigma):
    if sigma.n != f.n:
        raise ShapeError("subspace and grid dimensions differ")


def _check_alias(support, spec, what):
    if support > ALIAS_FRACTION * spec.nyquist:
        raise DomainError(
            f"{what} needs frequencies up to {support:.4g}, beyond {ALIAS_FRACTION} x Nyquist "
            f"= {ALIAS_FRACTION * spec.nyquist:.4g}; refine the grid"
        )


_PROFILES = {}


def profile(d):
    if d not in _PROFILES:
        _PROFILES[d] = BumpProfile(d)
    return _PROFILES[d]


def average_multiplier(spec, sigma, s):
    """``phi_d(s Pi_sigma xi)`` on the lattice of ``spec``."""
    s = check_positive(s, "s")
    _check_alias(PROFILE_RADIUS / s, spec, "the average")
    return profile(sigma.d)(s * spec.projected_norm(sigma))


def high_multiplier(spec, sigma, s, delta):
    """Multiplier of ``A^{>delta}``: ``phi_d(s Pi xi) Phi(4 s delta xi)``."""
    delta = check_positive(delta, "delta")
    # Phi only truncates, so it is exempt from the aliasing guard
    return average_multiplier(spec, sigma, s) * smooth_cutoff(4 * s * delta * spec.norm_xi())


def fourier_average(f, sigma, s, workers=None):
    """Smooth subspace average ``A_{sigma,s} f``."""
    _check_sigma(f, sigma)
    spec = SpectralField.from_grid(f, workers)
    return spec.apply(average_multiplier(spec, sigma, s)).to_grid(workers)


def fourier_maximal(f, Sigma, S, workers=None):
    """``sup |A_{sigma,s} f|`` over sigma in Sigma and s in S."""
    spec = SpectralField.from_grid(f, workers)
    out = np.zeros(f.shape)
    elements = list(Sigma)
    if not elements or len(S) == 0:
        raise DomainError("Sigma and S must be nonempty")
    for sigma in elements:
        _check_sigma(f, sigma)
        for s in S:
            g = spec.apply(average_multiplier(spec, sigma, s)).to_grid(workers)
            np.maximum(out, np.abs(g.values), out=out)
    return f.with_values(out)


def low_high_split(f, sigma, s, delta, workers=None):
    """``(A^{>delta} f, A^{<delta} f)`` with ``A^{>delta}`` the ``Phi(4 s delta xi)`` part.

    ``A^{>delta}`` is the part averaged over plates of eccentricity delta, so
    it carries the frequencies ``|xi| <= 1 / (2 s delta)``; the remainder is
    computed as ``m (1 - Phi)`` so that the two add to ``A_{sigma,s} f`` in
    frequency arithmetic.
    """
    _check_sigma(f, sigma)
    spec = SpectralField.from_grid(f, workers)
    m = average_multiplier(spec, sigma, s)
    cut = smooth_cutoff(4 * s * check_positive(delta, "delta") * spec.norm_xi())
    high = spec.apply(m * cut).to_grid(workers)
    low = spec.apply(m * (1.0 - cut)).to_grid(workers)
    return high, low


def cone_mask(spec, sigma, delta, constant=CONE_CONSTANTS[0]):
    """Indicator of ``{xi != 0 : |Pi_sigma xi| < constant delta |xi|}``."""
    if not any(abs(constant - c) < 1e-15 for c in CONE_CONSTANTS):
        raise DomainError(f"cone constant must be one of {CONE_CONSTANTS}")
    r = spec.norm_xi()
    mask = spec.projected_norm(sigma) < constant * delta * r
    mask &= r > 0
    return mask


def cone_cutoff(f, sigma, delta, constant=CONE_CONSTANTS[0], workers=None):
    """Sharp frequency restriction of f to the two-sheeted cone around sigma-perp."""
    _check_sigma(f, sigma)
    spec = SpectralField.from_grid(f, workers)
    return spec.apply(cone_mask(spec, sigma, check_positive(delta, "delta"), constant)).to_grid(workers)


def annulus_mask(spec, delta, bounds=ANN):
    """``{lo < delta |xi| < hi}``; ``bounds`` is ``ANN`` or ``ANN_PLUS``."""
    r = delta * spec.norm_xi()
    return (r > bounds[0]) & (r < bounds[1])


def sector_mask(spec, tau, delta):
    """``O_{tau,delta} = {xi in Ann+(delta) : |Pi_tau xi| <= 2 delta |xi|}``."""
    return annulus_mask(spec, delta, ANN_PLUS) & (spec.projected_norm(tau) <= 2 * delta * spec.norm_xi())


# ----------------------------------------------------------------------------
# audits


def ball_average_multiplier(k, t):
    """Fourier transform of the normalized indicator of B_k at |eta| = t: Gamma(k/2+1) (2/t)^{k/2} J_{k/2}(t)."""
    t = np.asarray(t, dtype=float)
    nu = k / 2.0
    out = np.ones_like(t)
    nz = t > 1e-8
    tz = t[nz]
    out[nz] = math.gamma(nu + 1) * (2.0 / tz) ** nu * jv(nu, tz)
    # series for small arguments: 1 - t^2 / (2k + 4) ... keeps the value exact at 0
    out[~nz] = 1.0 - t[~nz] ** 2 / (2 * k + 4)
    return out


def plate_average_multiplier(spec, tau, scale, delta):
    """Multiplier of the average over ``x + scale T_delta(tau)``."""
    along = spec.projected_norm(tau)
    across = np.sqrt(np.maximum(spec.norm_xi() ** 2 - along**2, 0.0))
    return ball_average_multiplier(tau.d, scale * along) * ball_average_multiplier(spec.n - tau.d, scale * delta * across)


def tailed_plate_majorant(f, tau, scale, delta, tol=1e-12, workers=None):
    """``sum_k 2^{-kn}`` of the average of |f| over ``x + 2^k scale T_delta(tau)`` (periodic lattice).

    Plate averages are exact multipliers (products of normalized ball
    transforms); the series is truncated once ``2^{-kn}`` drops below ``tol``.
    """
    n = f.n
    spec = SpectralField(sfft.fftn(np.abs(f.values), workers=workers), f.origin, f.h)
    total = np.zeros(spec.shape)
    k = 0
    while 2.0 ** (-k * n) >= tol:
        total = total + 2.0 ** (-k * n) * plate_average_multiplier(spec, tau, scale * 2.0**k, delta)
        k += 1
    return spec.apply(total).to_grid(workers)


@dataclass
class SwitchDefect:
    value: float
    difference_l2: float
    majorant_l2: float
    distance: float
    delta: float
    normalization: str = "||A_sigma - A_tau|| / (sup phi_d * ||tailed plate majorant||), plates at 2^8 s"

    def __float__(self):
        return self.value

    def to_dict(self):
        return asdict(self)


def switch_defect(f, sigma, tau, s, delta, workers=None, detail=False):
    """Normalized size of ``A^{>delta}_{sigma,s} f - A^{>delta}_{tau,s} f``.

    The numerator is the L^2 norm of the difference. The denominator is
    ``sup phi_d`` times the L^2 norm of the tailed plate majorant of f along
    tau, with plates at the kernel's own spatial scale ``2^8 s`` (the profile
    is supported in a ball of radius ``2^{-8}``).
    """
    _check_sigma(f, sigma)
    _check_sigma(f, tau)
    delta = check_positive(delta, "delta")
    dist = metric_distance(sigma, tau)
    if dist > delta * (1 + 1e-12) or delta > 1:
        raise DomainError(f"need d(sigma, tau) = {dist:.4g} <= delta <= 1")
    spec = SpectralField.from_grid(f, workers)
    diff = spec.apply(high_multiplier(spec, sigma, s, delta) - high_multiplier(spec, tau, s, delta))
    num = diff.l2_norm()
    maj = tailed_plate_majorant(f, tau, s / PROFILE_RADIUS, delta, workers=workers)
    den = profile(sigma.d).sup * maj.norm(2)
    res = SwitchDefect(num / den if den > 0 else 0.0, num, den, dist, delta)
    return res if detail else res.value


def cone_support_defect(f, sigma, s, delta, workers=None):
    """``||A^{<delta} f - A^{<delta} Gamma_{sigma,delta} f||_2 / ||f||_2``."""
    spec = SpectralField.from_grid(f, workers)
    m = average_multiplier(spec, sigma, s) * (1 - smooth_cutoff(4 * s * delta * spec.norm_xi()))
    gamma = cone_mask(spec, sigma, delta)
    diff = spec.apply(m * (1 - gamma))
    norm = spec.l2_norm()
    return diff.l2_norm() / norm if norm > 0 else 0.0


def sector_overlap_audit(f, net, delta, workers=None, check_separation=True):
    """``sum_tau ||O_{tau,delta} f||^2 / (delta^{-d(n-d-1)} ||f||^2)`` over a delta-separated net."""
    if not isinstance(net, DirectionSet):
        net = DirectionSet(list(net), validate=False)
    delta = check_positive(delta, "delta")
    if check_separation and len(net) > 1 and net.min_separation() < delta * (1 - 1e-9):
        raise DomainError(f"net separation {net.min_separation():.4g} is below delta = {delta:.4g}")
    if net.n != f.n:
        raise ShapeError("net and grid dimensions differ")
    spec = SpectralField.from_grid(f, workers)
    _check_alias(ANN_PLUS[1] / delta, spec, "the outer annulus")
    power = np.abs(spec.values) ** 2
    ann = annulus_mask(spec, delta, ANN_PLUS)
    r = spec.norm_xi()
    # only annulus points can contribute; restrict once
    pts = [k[ann] if k.shape == ann.shape else np.broadcast_to(k, ann.shape)[ann] for k in spec.frequencies()]
    pts = np.stack(pts, axis=1)
    pw = power[ann]
    rr = r[ann]
    total = 0.0
    for tau in net:
        proj = np.linalg.norm(pts @ tau.basis, axis=1)
        total += float(pw[proj <= 2 * delta * rr].sum())
    fnorm2 = float(power.sum())
    d, n = net.d, net.n
    return total / (delta ** (-d * (n - d - 1)) * fnorm2) if fnorm2 > 0 else 0.0


def random_band_limited(shape, h, cutoff, seed=None, annulus=None, origin=None):
    """Real random field with spectrum in ``|xi| <= cutoff`` (or in the annulus ``(lo, hi)``)."""
    rng = as_generator(seed)
    shape = tuple(int(m) for m in shape)
    white = rng.standard_normal(shape)
    spec = SpectralField(sfft.fftn(white), np.zeros(len(shape)) if origin is None else np.asarray(origin), h)
    r = spec.norm_xi()
    mask = (r > annulus[0]) & (r < annulus[1]) if annulus is not None else r <= cutoff
    return spec.apply(mask).to_grid()


# ----------------------------------------------------------------------------
# planar almost orthogonality


def _unit_angles(U):
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        return U
    return np.arctan2(U[:, 1], U[:, 0])


@dataclass
class AO2DReport:
    lhs: float
    rhs: float
    C: float
    u_term: float
    v_terms: list
    gamma_terms: list
    smallest_C: float
    degenerate: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def ratio(self):
        return self.lhs / self.rhs if self.rhs > 0 else (0.0 if self.lhs == 0 else math.inf)

    def to_dict(self):
        out = asdict(self)
        out["ratio"] = self.ratio
        return out


def _line(angle):
    return Subspace(np.array([math.cos(angle), math.sin(angle)]))


def _maximal_norm(spec, angles, S, workers):
    if len(angles) == 0:
        return 0.0
    out = None
    for a in angles:
        sigma = _line(a)
        for s in S:
            g = np.abs(sfft.ifftn(spec.values * average_multiplier(spec, sigma, s), workers=workers).real)
            out = g if out is None else np.maximum(out, g)
    return float(math.sqrt(np.sum(out**2) * spec.h**2))


def _gamma_mask(spec, a0, a1):
    """Frequencies whose direction (mod pi) lies between the normals of u_j and u_{j+1}."""
    kx, ky = spec.frequencies()
    kx, ky = np.broadcast_arrays(kx, ky)
    phi = np.mod(np.arctan2(ky, kx) - (a0 + math.pi / 2), math.pi)
    width = a1 - a0
    mask = phi <= width if width < math.pi else np.ones_like(phi, dtype=bool)
    mask &= (kx != 0) | (ky != 0)
    return mask


def ao2d_experiment(f, U, V, S, C=32.0, workers=None):
    """Both sides of the planar almost-orthogonality inequality for ``A_{V,S}``.

    ``U`` holds N+1 directions (angles or unit vectors) in counterclockwise
    order; ``V`` is a list of N direction lists, ``V[j]`` inside the cone from
    ``U[j]`` to ``U[j+1]``. The report includes ``||A_{V_j,S} Gamma_j f||`` for
    the sharp cone restrictions Gamma_j and the smallest C that makes the
    inequality hold for this f.
    """
    if f.n != 2:
        raise DomainError("the planar experiment needs n = 2")
    ua = _unit_angles(U)
    if ua.size < 2:
        raise DomainError("U needs at least two directions")
    ua = np.unwrap(ua)
    if np.any(np.diff(ua) <= 0) or ua[-1] - ua[0] >= 2 * math.pi:
        raise DomainError("U must be strictly counterclockwise within one turn")
    if len(V) != ua.size - 1:
        raise DomainError("V must have one direction list per gap of U")
    va = []
    for j, Vj in enumerate(V):
        angles = _unit_angles(Vj) if len(Vj) else np.zeros(0)
        rel = np.mod(angles - ua[j], 2 * math.pi)
        if np.any(rel > ua[j + 1] - ua[j] + 1e-12):
            raise DomainError(f"V[{j}] leaves the cone between U[{j}] and U[{j + 1}]")
        va.append(ua[j] + rel)
    spec = SpectralField.from_grid(f, workers)
    all_v = np.concatenate(va) if va else np.zeros(0)
    lhs = _maximal_norm(spec, all_v, S, workers)
    u_term = _maximal_norm(spec, ua, S, workers)
    v_terms = [_maximal_norm(spec, a, S, workers) for a in va]
    gamma_terms = []
    for j, a in enumerate(va):
        restricted = spec.apply(_gamma_mask(spec, ua[j], ua[j + 1]))
        gamma_terms.append(_maximal_norm(restricted, a, S, workers))
    vmax = max(v_terms) if v_terms else 0.0
    rhs = C * u_term + vmax
    smallest = max(0.0, (lhs - vmax) / u_term) if u_term > 0 else (0.0 if lhs <= vmax else math.inf)
    return AO2DReport(lhs, rhs, float(C), u_term, v_terms, gamma_terms, smallest, degenerate=all_v.size == 0)


# ----------------------------------------------------------------------------
# estimator


class FourierAverage(TransformerMixin, BaseEstimator):
    """``A_{sigma,s}`` (or its ``>delta`` part when ``delta`` is set) on GridFunctions."""

    def __init__(self, sigma=None, s=1.0, delta=None, workers=None):
        self.sigma = sigma
        self.s = s
        self.delta = delta
        self.workers = workers

    def fit(self, X, y=None):
        if not isinstance(X, GridFunction):
            raise TypeError(f"expected a GridFunction, got {type(X).__name__}")
        if self.sigma is None or self.sigma.n != X.n:
            raise ShapeError("sigma must be a subspace of the grid's space")
        spec = SpectralField(np.zeros(X.shape), X.origin, X.h)
        _check_alias(PROFILE_RADIUS / check_positive(self.s, "s"), spec, "the average")
        self.n_features_in_ = X.n
        return self

    def transform(self, X):
        if self.delta is None:
            return fourier_average(X, self.sigma, self.s, self.workers)
        return low_high_split(X, self.sigma, self.s, self.delta, self.workers)[0]
