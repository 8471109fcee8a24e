"""Unit-cell geometry and space-group symmetry.

Cartesian frame convention: ``a`` along x, ``b`` in the xy-plane, ``c`` completing
a right-handed set.  Fractional row vectors map to Cartesian as ``p @ cell.matrix``.

Symmetry operations are exact: an integer rotation matrix plus a rational
translation reduced into [0, 1).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

DEDUPE_TOL = 1e-4


class SymopParseError(ValueError):
    pass


@dataclass(frozen=True)
class UnitCell:
    a: float
    b: float
    c: float
    alpha: float = 90.0
    beta: float = 90.0
    gamma: float = 90.0

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise ValueError(f"cell lengths must be positive: {self.lengths}")
        if not all(0.0 < x < 180.0 for x in self.angles):
            raise ValueError(f"cell angles must lie in (0, 180): {self.angles}")
        if not self.volume > 1e-6 * self.a * self.b * self.c:
            raise ValueError(f"cell metric is not positive definite: {self}")

    @property
    def lengths(self) -> tuple[float, float, float]:
        return (self.a, self.b, self.c)

    @property
    def angles(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)

    @cached_property
    def matrix(self) -> np.ndarray:
        """Rows are the a, b, c lattice vectors in Cartesian Å."""
        al, be, ga = (math.radians(x) for x in self.angles)
        ca, cb, cg, sg = math.cos(al), math.cos(be), math.cos(ga), math.sin(ga)
        cy = (ca - cb * cg) / sg
        cz2 = 1.0 - cb * cb - cy * cy
        cz = math.sqrt(cz2) if cz2 > 0 else float("nan")
        return np.array(
            [
                [self.a, 0.0, 0.0],
                [self.b * cg, self.b * sg, 0.0],
                [self.c * cb, self.c * cy, self.c * cz],
            ]
        )

    @cached_property
    def inverse_matrix(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)

    @property
    def metric(self) -> np.ndarray:
        m = self.matrix
        return m @ m.T

    @property
    def reciprocal_metric(self) -> np.ndarray:
        return np.linalg.inv(self.metric)

    @cached_property
    def volume(self) -> float:
        al, be, ga = (math.radians(x) for x in self.angles)
        ca, cb, cg = math.cos(al), math.cos(be), math.cos(ga)
        v2 = 1 - ca * ca - cb * cb - cg * cg + 2 * ca * cb * cg
        return self.a * self.b * self.c * math.sqrt(v2) if v2 > 0 else 0.0

    @property
    def heights(self) -> np.ndarray:
        """Interplanar spacings of the (100), (010), (001) planes."""
        return 1.0 / np.linalg.norm(self.inverse_matrix, axis=0)

    def isclose(self, other: "UnitCell", rtol: float = 1e-3) -> bool:
        return all(
            abs(x - y) <= rtol * max(abs(x), abs(y))
            for x, y in zip(self.lengths + self.angles, other.lengths + other.angles)
        )


def frac_to_cart(cell: UnitCell, p) -> np.ndarray:
    return np.asarray(p, dtype=float) @ cell.matrix


def cart_to_frac(cell: UnitCell, r) -> np.ndarray:
    return np.asarray(r, dtype=float) @ cell.inverse_matrix


def wrap(p) -> np.ndarray:
    """Reduce fractional coordinates into [0, 1)."""
    p = np.asarray(p, dtype=float)
    w = p - np.floor(p)
    return np.where(w >= 1.0, 0.0, w)


def d_spacing(cell: UnitCell, hkl) -> float:
    h = np.asarray(hkl, dtype=float)
    if not np.any(h):
        raise ValueError("d-spacing undefined for hkl = (0,0,0)")
    return float(1.0 / math.sqrt(h @ cell.reciprocal_metric @ h))


# --------------------------------------------------------------------------
# symmetry operations


def _frac_mod1(t: Fraction) -> Fraction:
    return t - math.floor(t)


@dataclass(frozen=True)
class SymmetryOp:
    rotation: tuple[tuple[int, int, int], ...]
    translation: tuple[Fraction, Fraction, Fraction]

    def __post_init__(self):
        rot = tuple(tuple(int(v) for v in row) for row in self.rotation)
        tr = tuple(_frac_mod1(Fraction(t)) for t in self.translation)
        if len(rot) != 3 or any(len(r) != 3 for r in rot) or len(tr) != 3:
            raise ValueError("symmetry operation needs a 3x3 rotation and a 3-vector translation")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)
        if round(abs(np.linalg.det(np.array(rot, dtype=float)))) != 1:
            raise ValueError(f"rotation part must have determinant +-1: {rot}")

    @classmethod
    def identity(cls) -> "SymmetryOp":
        return cls(((1, 0, 0), (0, 1, 0), (0, 0, 1)), (0, 0, 0))

    @classmethod
    def inversion(cls) -> "SymmetryOp":
        return cls(((-1, 0, 0), (0, -1, 0), (0, 0, -1)), (0, 0, 0))

    @property
    def R(self) -> np.ndarray:
        return np.array(self.rotation, dtype=float)

    @property
    def t(self) -> np.ndarray:
        return np.array([float(x) for x in self.translation])

    @property
    def is_identity(self) -> bool:
        return self == SymmetryOp.identity()

    @property
    def determinant(self) -> int:
        return int(round(np.linalg.det(self.R)))

    def __matmul__(self, other: "SymmetryOp") -> "SymmetryOp":
        """Composition: ``(self @ other)(x) == self(other(x))`` modulo lattice translations."""
        r1, r2 = self.rotation, other.rotation
        rot = tuple(tuple(sum(r1[i][k] * r2[k][j] for k in range(3)) for j in range(3)) for i in range(3))
        tr = tuple(sum(r1[i][k] * other.translation[k] for k in range(3)) + self.translation[i] for i in range(3))
        return SymmetryOp(rot, tr)

    def inverse(self) -> "SymmetryOp":
        rinv = np.rint(np.linalg.inv(self.R)).astype(int)
        tr = tuple(-sum(int(rinv[i, k]) * self.translation[k] for k in range(3)) for i in range(3))
        return SymmetryOp(tuple(map(tuple, rinv)), tr)

    def __call__(self, p) -> np.ndarray:
        return apply_symop(self, p)

    def to_xyz(self) -> str:
        return format_symop_xyz(self)

    def __str__(self) -> str:
        return self.to_xyz()


def apply_symop(op: SymmetryOp, p, wrapped: bool = True) -> np.ndarray:
    """Apply ``op`` to fractional point(s) ``p`` (shape (3,) or (n, 3))."""
    q = np.asarray(p, dtype=float) @ op.R.T + op.t
    return wrap(q) if wrapped else q


_TERM_RE = re.compile(r"([+-]?)([^+-]+)")
_NUM_RE = re.compile(r"^(\d+(?:\.\d*)?|\.\d+)(?:/(\d+(?:\.\d*)?))?$")


def _parse_number(tok: str, whole: str) -> Fraction:
    m = _NUM_RE.match(tok)
    if not m:
        raise SymopParseError(f"unparseable token {tok!r} in symmetry operation {whole!r}")
    num = Fraction(m.group(1))
    if m.group(2) is not None:
        den = Fraction(m.group(2))
        if den == 0:
            raise SymopParseError(f"zero denominator in {whole!r}")
        num /= den
    return num.limit_denominator(48)


def parse_symop_xyz(s: str) -> SymmetryOp:
    """Parse a CIF/SHELX style triplet such as ``'-y, x-y, z+2/3'``."""
    text = s.strip().strip("'\"").replace(" ", "").lower()
    parts = text.split(",")
    if len(parts) != 3:
        raise SymopParseError(f"symmetry operation needs three components: {s!r}")
    rot = [[0, 0, 0] for _ in range(3)]
    tr = [Fraction(0)] * 3
    axes = {"x": 0, "y": 1, "z": 2}
    for row, part in enumerate(parts):
        if not part:
            raise SymopParseError(f"empty component in symmetry operation {s!r}")
        pos = 0
        for m in _TERM_RE.finditer(part):
            if m.start() != pos:
                raise SymopParseError(f"unparseable token {part[pos:m.start()]!r} in {s!r}")
            pos = m.end()
            sign = -1 if m.group(1) == "-" else 1
            body = m.group(2)
            if body[-1] in axes:
                coef = body[:-1].rstrip("*")
                c = _parse_number(coef, s) if coef else Fraction(1)
                if c.denominator != 1:
                    raise SymopParseError(f"non-integer rotation coefficient {body!r} in {s!r}")
                rot[row][axes[body[-1]]] += sign * int(c)
            else:
                tr[row] += sign * _parse_number(body, s)
        if pos != len(part):
            raise SymopParseError(f"unparseable token {part[pos:]!r} in {s!r}")
    try:
        return SymmetryOp(tuple(map(tuple, rot)), tuple(tr))
    except ValueError as exc:
        raise SymopParseError(f"{exc} (from {s!r})") from None


def format_symop_xyz(op: SymmetryOp) -> str:
    out = []
    for row, t in zip(op.rotation, op.translation):
        s = ""
        for coef, ax in zip(row, "xyz"):
            if coef == 0:
                continue
            sign = "-" if coef < 0 else ("+" if s else "")
            mag = "" if abs(coef) == 1 else str(abs(coef))
            s += f"{sign}{mag}{ax}"
        if t:
            s += f"+{t}" if s else f"{t}"
        out.append(s or "0")
    return ",".join(out)


CENTERING_VECTORS = {
    1: [(0, 0, 0)],
    2: [(0, 0, 0), (Fraction(1, 2),) * 3],
    3: [(0, 0, 0), (Fraction(2, 3), Fraction(1, 3), Fraction(1, 3)), (Fraction(1, 3), Fraction(2, 3), Fraction(2, 3))],
    4: [(0, 0, 0), (0, Fraction(1, 2), Fraction(1, 2)), (Fraction(1, 2), 0, Fraction(1, 2)), (Fraction(1, 2), Fraction(1, 2), 0)],
    5: [(0, 0, 0), (0, Fraction(1, 2), Fraction(1, 2))],
    6: [(0, 0, 0), (Fraction(1, 2), 0, Fraction(1, 2))],
    7: [(0, 0, 0), (Fraction(1, 2), Fraction(1, 2), 0)],
}


def expand_latt(symm: Sequence[SymmetryOp], latt: int) -> list[SymmetryOp]:
    """Full operation list from SHELX ``SYMM`` cards and a ``LATT`` code.

    Identity is implicit in ``symm``.  Positive ``latt`` adds the inversion
    centre; ``abs(latt)`` picks the centring (1=P 2=I 3=R 4=F 5=A 6=B 7=C).
    """
    n = abs(int(latt))
    if n not in CENTERING_VECTORS:
        raise ValueError(f"unknown LATT code {latt}")
    base = [SymmetryOp.identity()] + [op for op in symm if not op.is_identity]
    if latt > 0:
        inv = SymmetryOp.inversion()
        base = base + [inv @ op for op in base]
    out: list[SymmetryOp] = []
    for v in CENTERING_VECTORS[n]:
        shift = SymmetryOp(SymmetryOp.identity().rotation, v)
        for op in base:
            out.append(shift @ op)
    return out


def closure_violations(ops: Sequence[SymmetryOp]) -> list[tuple[int, int]]:
    """Index pairs whose product is missing from ``ops``."""
    opset = set(ops)
    return [(i, j) for i, a in enumerate(ops) for j, b in enumerate(ops) if (a @ b) not in opset]


def is_group(ops: Sequence[SymmetryOp]) -> bool:
    opset = set(ops)
    return (
        SymmetryOp.identity() in opset
        and not closure_violations(ops)
        and all(op.inverse() in opset for op in ops)
    )


# --------------------------------------------------------------------------
# structures


@dataclass(frozen=True)
class Site:
    label: str
    element: str
    frac: tuple[float, float, float]
    occupancy: float = 1.0
    u_iso: float = 0.03
    u_iso_defaulted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "frac", tuple(float(x) for x in self.frac))
        if not 0.0 < self.occupancy <= 1.0:
            raise ValueError(f"site {self.label}: occupancy {self.occupancy} outside (0, 1]")


@dataclass(frozen=True)
class CrystalStructure:
    cell: UnitCell
    symops: tuple[SymmetryOp, ...] = field(default_factory=lambda: (SymmetryOp.identity(),))
    sites: tuple[Site, ...] = ()
    name: str = "structure"
    wavelength: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "symops", tuple(self.symops))
        object.__setattr__(self, "sites", tuple(self.sites))

    @property
    def frac(self) -> np.ndarray:
        return np.array([s.frac for s in self.sites], dtype=float).reshape(-1, 3)

    @property
    def cart(self) -> np.ndarray:
        return frac_to_cart(self.cell, self.frac)

    @property
    def elements(self) -> list[str]:
        return [s.element for s in self.sites]

    def heavy(self) -> "CrystalStructure":
        return replace(self, sites=tuple(s for s in self.sites if s.element != "H"))

    def with_sites(self, sites: Iterable[Site]) -> "CrystalStructure":
        return replace(self, sites=tuple(sites))


def frac_distance(a, b) -> np.ndarray:
    """Largest per-axis periodic fractional separation."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return np.abs(d - np.rint(d)).max(axis=-1)


def expand_equivalents(s: CrystalStructure, tol: float = DEDUPE_TOL) -> list[tuple[int, int, np.ndarray]]:
    """Orbit of every site under the symmetry operations, one entry per distinct position."""
    out = []
    for i, site in enumerate(s.sites):
        seen: list[np.ndarray] = []
        for k, op in enumerate(s.symops):
            p = apply_symop(op, site.frac)
            if seen and frac_distance(np.array(seen), p).min() < tol:
                continue
            seen.append(p)
            out.append((i, k, p))
    return out
