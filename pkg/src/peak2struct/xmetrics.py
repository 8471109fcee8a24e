"""Structure factors, R1, goodness of fit and model-versus-expert comparison.

Conventions: R1 is computed on amplitudes with the least-squares scale
``k = sum|Fo||Fc| / sum|Fc|^2``; S is computed on F^2 with weights ``1/sigma^2``.
Neither solution is refined before comparison.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .cif_io import ReflectionSet
from .elements import form_factor
from .lattice import CrystalStructure

DEFAULT_FLAG_THRESHOLD = 0.005


@dataclass
class StructureFactorSet:
    fc: np.ndarray  # complex, one per reflection
    reflections: ReflectionSet

    def __post_init__(self):
        if len(self.fc) != len(self.reflections):
            raise ValueError("structure factor count differs from reflection count")

    @property
    def amplitudes(self) -> np.ndarray:
        return np.abs(self.fc)


def stol_squared(s: CrystalStructure, hkl: np.ndarray) -> np.ndarray:
    """(sin(theta)/lambda)^2 = 1 / (4 d^2) for each reflection."""
    h = np.asarray(hkl, dtype=float).reshape(-1, 3)
    return np.einsum("ij,jk,ik->i", h, s.cell.reciprocal_metric, h) / 4.0


def expanded_atoms(s: CrystalStructure):
    """Per (site, operation) fractional position with its site's element, occupancy and U_iso."""
    frac = s.frac
    xyz, el, occ, u = [], [], [], []
    for op in s.symops:
        xyz.append(frac @ op.R.T + op.t)
        el += [site.element for site in s.sites]
        occ += [site.occupancy for site in s.sites]
        u += [site.u_iso for site in s.sites]
    if not xyz:
        return np.zeros((0, 3)), [], np.zeros(0), np.zeros(0)
    return np.concatenate(xyz).reshape(-1, 3), el, np.array(occ, dtype=float), np.array(u, dtype=float)


def structure_factors(s: CrystalStructure, refl: ReflectionSet) -> StructureFactorSet:
    """Fc(hkl) summed over every site and every symmetry operation (no special-position reduction)."""
    if refl.wavelength is None:
        raise ValueError("reflection set has no wavelength")
    hkl = refl.hkl.astype(float)
    s2 = stol_squared(s, hkl)
    xyz, el, occ, u = expanded_atoms(s)
    types = sorted(set(el))
    ftab = np.array([form_factor(t, np.sqrt(s2)) for t in types]).reshape(len(types), len(hkl))
    tidx = np.array([types.index(e) for e in el], dtype=np.int64)
    if not len(xyz):
        return StructureFactorSet(np.zeros(len(hkl), dtype=complex), refl)
    fc = kernels.structure_factor_sum(
        np.ascontiguousarray(hkl), np.ascontiguousarray(s2), np.ascontiguousarray(xyz),
        tidx, np.ascontiguousarray(occ), np.ascontiguousarray(u), np.ascontiguousarray(ftab),
    )
    return StructureFactorSet(np.asarray(fc, dtype=complex), refl)


def observed_amplitudes(fo2) -> np.ndarray:
    return np.sqrt(np.clip(np.asarray(fo2, dtype=float), 0.0, None))


def scale_factor(fo, fc) -> float:
    fo = np.abs(np.asarray(fo, dtype=float))
    fc = np.abs(np.asarray(fc))
    if fo.size == 0:
        raise ValueError("no reflections")
    den = float(np.sum(fc * fc))
    if den <= 0:
        raise ValueError("all calculated amplitudes are zero")
    return float(np.sum(fo * fc)) / den


def r1(fo, fc, k: float, mask=None) -> float:
    fo = np.abs(np.asarray(fo, dtype=float))
    fc = np.abs(np.asarray(fc))
    if mask is not None:
        fo, fc = fo[mask], fc[mask]
    den = float(np.sum(fo))
    if den <= 0:
        raise ValueError("sum of observed amplitudes is zero")
    return float(np.sum(np.abs(fo - k * fc))) / den


def goodness_of_fit(fo2, sigma, fc, k: float, n_params: int) -> float:
    fo2 = np.asarray(fo2, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    fc = np.abs(np.asarray(fc))
    n = fo2.size
    if n <= n_params:
        raise ValueError(f"{n} reflections cannot support {n_params} parameters")
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive for every reflection")
    w = 1.0 / (sigma * sigma)
    resid = fo2 - (k * k) * (fc * fc)
    return math.sqrt(float(np.sum(w * resid * resid)) / (n - n_params))


def n_parameters(s: CrystalStructure) -> int:
    """xyz + U_iso per non-hydrogen site plus one overall scale (riding H add none)."""
    return 4 * sum(1 for site in s.sites if site.element != "H") + 1


@dataclass
class Metrics:
    k: float
    r1: float
    s: float


def evaluate_fit(s: CrystalStructure, refl: ReflectionSet, observed_only: bool = False, n_params=None) -> Metrics:
    fc = structure_factors(s, refl).amplitudes
    fo = observed_amplitudes(refl.fo2)
    k = scale_factor(fo, fc)
    mask = refl.fo2 >= 2.0 * refl.sigma if observed_only else None
    npar = n_parameters(s) if n_params is None else n_params
    return Metrics(k, r1(fo, fc, k, mask), goodness_of_fit(refl.fo2, refl.sigma, fc, k, npar))


@dataclass
class ComparisonVerdict:
    r1_model: float
    r1_expert: float
    s_model: float
    s_expert: float
    flagged: bool
    margin: float
    threshold: float = DEFAULT_FLAG_THRESHOLD

    def to_record(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def compare_solutions(
    model_s: CrystalStructure,
    expert_s: CrystalStructure,
    refl: ReflectionSet,
    threshold: float = DEFAULT_FLAG_THRESHOLD,
) -> ComparisonVerdict:
    """Score both solutions against the same data; flag when the expert's R1 is worse by more than ``threshold``."""
    if not model_s.cell.isclose(expert_s.cell, 1e-3):
        raise ValueError("model and expert solutions have different unit cells")
    m = evaluate_fit(model_s, refl)
    e = evaluate_fit(expert_s, refl)
    margin = e.r1 - m.r1
    return ComparisonVerdict(m.r1, e.r1, m.s, e.s, bool(margin > threshold), margin, threshold)


# --------------------------------------------------------------------------
# synthetic data


def reflection_indices(s: CrystalStructure, d_min: float) -> np.ndarray:
    """One hemisphere of hkl with d >= d_min, in deterministic order."""
    hmax = [int(math.floor(L / d_min)) + 1 for L in s.cell.lengths]
    grid = np.stack(
        np.meshgrid(*(np.arange(-m, m + 1) for m in hmax), indexing="ij"), -1
    ).reshape(-1, 3)
    half = (grid[:, 0] > 0) | ((grid[:, 0] == 0) & (grid[:, 1] > 0)) | ((grid[:, 0] == 0) & (grid[:, 1] == 0) & (grid[:, 2] > 0))
    grid = grid[half]
    s2 = stol_squared(s, grid)
    return grid[s2 <= 1.0 / (4.0 * d_min * d_min)]


def simulate_reflections(
    s: CrystalStructure,
    d_min: float = 0.8,
    wavelength: float = 0.71073,
    noise: float = 0.0,
    seed: int = 0,
) -> ReflectionSet:
    """Fo^2 = |Fc|^2 (plus optional relative Gaussian noise), sigma = 0.03 Fo^2 + 1."""
    hkl = reflection_indices(s, d_min)
    amp = structure_factors(s, ReflectionSet(hkl, np.zeros(len(hkl)), np.ones(len(hkl)), wavelength)).amplitudes
    fo2 = amp * amp
    sigma = 0.03 * fo2 + 1.0
    if noise > 0:
        rng = np.random.default_rng(seed)
        fo2 = fo2 + rng.normal(0.0, noise, size=fo2.shape) * sigma
    return ReflectionSet(hkl, fo2, sigma, wavelength)
