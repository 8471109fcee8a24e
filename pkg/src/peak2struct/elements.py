"""Element symbols, the classifier vocabulary and shipped per-element tables."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

import numpy as np

SYMBOLS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni "
    "Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe "
    "Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg "
    "Tl Pb Bi Po At Rn"
).split()

ATOMIC_NUMBER = {s: z for z, s in enumerate(SYMBOLS) if z > 0}

NOISE = "NOISE"

# 83 non-hydrogen element classes (Li..At) ordered by atomic number, NOISE last,
# so argmax-first ties resolve to the lowest atomic number.
ELEMENT_CLASSES = tuple(SYMBOLS[3:86]) + (NOISE,)
CLASS_INDEX = {s: i for i, s in enumerate(ELEMENT_CLASSES)}
NUM_ELEMENT_CLASSES = len(ELEMENT_CLASSES)

# hydrogen-count classes 0..4
NUM_H_CLASSES = 5

# acceptors considered for X-H...A orientation
ACCEPTORS = frozenset({"N", "O", "F", "Cl"})


class UnknownElementError(KeyError):
    pass


def normalize_symbol(s: str) -> str:
    """Map type symbols like ``CL``, ``c1``, ``O2-`` or ``Fe3+`` to a bare symbol."""
    letters = "".join(ch for ch in s if ch.isalpha())
    if not letters:
        raise UnknownElementError(s)
    if letters.upper() == NOISE:
        return NOISE
    for n in (2, 1):
        cand = letters[:n].capitalize()
        if cand in ATOMIC_NUMBER:
            return cand
    raise UnknownElementError(s)


def atomic_number(symbol: str) -> int:
    try:
        return ATOMIC_NUMBER[symbol]
    except KeyError:
        raise UnknownElementError(symbol) from None


def _data_lines(name: str):
    text = resources.files("peak2struct.data").joinpath(name).read_text()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            yield line.split()


@lru_cache(maxsize=None)
def covalent_radii() -> dict[str, float]:
    return {row[0]: float(row[2]) for row in _data_lines("covalent_radii.txt")}


def covalent_radius(symbol: str) -> float:
    try:
        return covalent_radii()[symbol]
    except KeyError:
        raise UnknownElementError(f"no covalent radius for element {symbol!r}") from None


@lru_cache(maxsize=None)
def scattering_coefficients() -> dict[str, np.ndarray]:
    """Cromer-Mann coefficients as ``[a1..a4, b1..b4, c]`` per element."""
    return {row[0]: np.array([float(x) for x in row[1:10]]) for row in _data_lines("scattering_factors.txt")}


def form_factor(symbol: str, stol: np.ndarray) -> np.ndarray:
    """X-ray form factor at ``sin(theta)/lambda`` (1/Å)."""
    try:
        c = scattering_coefficients()[symbol]
    except KeyError:
        raise UnknownElementError(f"no scattering-factor coefficients for element {symbol!r}") from None
    s2 = np.asarray(stol, dtype=float) ** 2
    return c[8] + sum(c[i] * np.exp(-c[4 + i] * s2) for i in range(4))
