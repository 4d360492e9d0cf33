"""Flat ``key = value`` experiment configuration.

One setting per line; ``#`` starts a comment; ``include PATH`` splices
another file in place (relative to the including file). Later settings
override earlier ones. Values are parsed as bool, int, float (``2^-3``
and ``1/16`` are accepted), comma-separated lists of those, or strings.
"""

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

from .errors import ValidationError

KINDS = {
    "net": "net-cardinality",
    "angles": "principal-angles",
    "intersect": "intersection-volume",
    "maxavg": "maxavg-log",
    "nikodym": "nikodym-weak22",
    "kakeya": "kakeya-l2",
    "cluster": "cluster-steps",
    "extremal": "cm-quotient",
    "carleson": "codim1-embedding",
    "scaling": "fit-only",
}
SWEEPS = ("delta", "N", "M", "V", "pairs")
MODELS = ("power", "log", "sqrtlog", "none")
DEFAULT_SWEEP = {"maxavg": "N", "cluster": "N", "extremal": "M", "carleson": "V", "angles": "pairs"}
DEFAULT_MODEL = {"maxavg": "log", "nikodym": "sqrtlog", "kakeya": "sqrtlog", "angles": "none", "cluster": "none"}

_POWER = re.compile(r"^([+-]?\d+(?:\.\d*)?)\^([+-]?\d+)$")
_FRACTION = re.compile(r"^[+-]?\d+/\d+$")


def parse_value(text):
    text = text.strip()
    if "," in text:
        return [parse_value(t) for t in text.split(",") if t.strip()]
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    m = _POWER.match(text)
    if m:
        return float(m.group(1)) ** int(m.group(2))
    if _FRACTION.match(text):
        return float(Fraction(text))
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_settings(path, _seen=None):
    """Settings dict of a config file with includes expanded."""
    path = Path(path).resolve()
    seen = set() if _seen is None else _seen
    if path in seen:
        raise ValidationError(f"include cycle at {path}")
    seen = seen | {path}
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_settings(lines, path.parent, seen, str(path))


def parse_settings(lines, base=".", _seen=frozenset(), name="<config>"):
    if isinstance(lines, str):
        lines = lines.splitlines()
    out, problems = {}, []
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include ") or line.startswith("include\t"):
            out.update(read_settings(Path(base) / line.split(None, 1)[1].strip(), set(_seen)))
            continue
        if "=" not in line:
            problems.append(f"{name}:{no}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_.]*", key):
            problems.append(f"{name}:{no}: bad key {key!r}")
            continue
        out[key] = parse_value(value)
    if problems:
        raise ValidationError(problems)
    return out


def _as_list(v):
    if v is None:
        return []
    return list(v) if isinstance(v, list) else [v]


@dataclass
class ExperimentConfig:
    """Validated experiment description.

    ``values`` is the sweep (delta, N, M, #V or number of pairs), ``h`` the
    grid spacing (None for the kind's default), ``options`` every other
    setting, passed to the experiment as is.
    """

    kind: str
    d: int = 1
    n: int = 2
    sweep: str = "delta"
    values: list = field(default_factory=list)
    h: float = None
    seed: int = 0
    seeds: int = 1
    density: int = 2
    scales: list = field(default_factory=list)
    model: str = "power"
    budget: float = 120.0
    options: dict = field(default_factory=dict)

    KNOWN = ("kind", "d", "n", "sweep", "values", "h", "seed", "seeds", "density", "scales", "model", "budget")

    @classmethod
    def from_settings(cls, settings, kind=None):
        s = dict(settings)
        if kind is not None:
            s.setdefault("kind", kind)
        problems = []
        if "kind" not in s:
            problems.append("missing 'kind'")
        else:
            short = {v: k for k, v in KINDS.items()}.get(s["kind"], s["kind"])
            s.setdefault("sweep", DEFAULT_SWEEP.get(short, "delta"))
            s.setdefault("model", DEFAULT_MODEL.get(short, "power"))
        kw = {k: s.pop(k) for k in cls.KNOWN if k in s}
        kw["values"] = _as_list(kw.get("values"))
        kw["scales"] = _as_list(kw.get("scales"))
        kw["options"] = s
        if problems:
            raise ValidationError(problems)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, kind=None):
        return cls.from_settings(read_settings(path), kind)

    def validate(self):
        """Raise ValidationError listing every violation."""
        p = []
        if self.kind not in KINDS and self.kind not in KINDS.values():
            p.append(f"unknown kind {self.kind!r}")
        for name in ("d", "n", "seeds", "density"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                p.append(f"{name} must be a positive integer, got {v!r}")
        if isinstance(self.d, int) and isinstance(self.n, int) and self.d >= self.n:
            p.append(f"need d < n, got d={self.d}, n={self.n}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2**64:
            p.append(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.sweep not in SWEEPS:
            p.append(f"sweep must be one of {', '.join(SWEEPS)}, got {self.sweep!r}")
        if self.model not in MODELS:
            p.append(f"model must be one of {', '.join(MODELS)}, got {self.model!r}")
        if self.kind not in ("scaling", KINDS["scaling"]):
            if not self.values:
                p.append("values must be a nonempty list")
            elif not all(isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0 for v in self.values):
                p.append("values must be positive numbers")
            elif any(b <= a for a, b in zip(self.values, self.values[1:])) and any(
                    b >= a for a, b in zip(self.values, self.values[1:])):
                p.append("values must be sorted (strictly increasing or decreasing)")
            elif self.sweep == "delta" and self.values and max(self.values) > 0.5:
                p.append("delta values must lie in (0, 1/2]")
        if self.h is not None:
            if not isinstance(self.h, (int, float)) or self.h <= 0:
                p.append(f"h must be positive, got {self.h!r}")
            elif self.sweep == "delta" and self.values and all(isinstance(v, (int, float)) for v in self.values):
                if self.h > min(self.values) / 2 * (1 + 1e-12):
                    p.append(f"grid spacing h={self.h} does not resolve delta={min(self.values)} (need h <= delta/2)")
        if not isinstance(self.budget, (int, float)) or self.budget < 0 or math.isnan(self.budget):
            p.append(f"budget must be a nonnegative number of seconds, got {self.budget!r}")
        if p:
            raise ValidationError(p)
        return self

    @property
    def kind_name(self):
        return KINDS.get(self.kind, self.kind)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        """Stable hash of the configuration, used to match checkpoints."""
        text = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]
