"""Hydrogen stage: per-atom H counts from the symmetry-aware graph, then riding placement.

The placement rules live in ``data/h_rules.txt`` (one line per parent element,
heavy-neighbour count and H count; see the header of that file for the
geometry keys).  Bonds are detected from ``data/covalent_radii.txt`` with a
0.4 Å tolerance over every symmetry and lattice image.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from . import kernels
from .elements import (
    ACCEPTORS,
    CLASS_INDEX,
    NUM_ELEMENT_CLASSES,
    NUM_H_CLASSES,
    UnknownElementError,
    atomic_number,
    covalent_radius,
)
from .graph import HBOND_AUX_RADIUS, NeighborGraph, _symmetry_copies, build_cutoff_graph
from .lattice import CrystalStructure, Site, cart_to_frac
from .model import ConfigError, ETModel, collate, ranked_classes

BOND_TOLERANCE = 0.4
TETRAHEDRAL = math.degrees(math.acos(-1.0 / 3.0))  # 109.47
_COS_T = 1.0 / 3.0  # cos(180 - 109.47)
_SIN_T = math.sqrt(8.0) / 3.0


class PlacementError(ValueError):
    pass


# --------------------------------------------------------------------------
# rule table


@dataclass(frozen=True)
class HRule:
    parent: str
    n_heavy: int
    n_h: int
    geometry: str
    bond_length: float
    u_factor: float


GEOMETRIES = ("methine", "sp2", "methylene", "methyl", "rotor", "terminal2", "linear", "tetra", "water")


@lru_cache(maxsize=1)
def h_rules() -> dict[tuple[str, int, int], HRule]:
    from importlib import resources

    text = resources.files("peak2struct.data").joinpath("h_rules.txt").read_text()
    rules = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        el, n, m, geom, d, u = line.split()
        if geom not in GEOMETRIES:
            raise ValueError(f"h_rules.txt: unknown geometry {geom!r}")
        rules[(el, int(n), int(m))] = HRule(el, int(n), int(m), geom, float(d), float(u))
    return rules


def rule_for(element: str, n_heavy: int, n_h: int) -> HRule:
    try:
        return h_rules()[(element, n_heavy, n_h)]
    except KeyError:
        parents = sorted({k[0] for k in h_rules()})
        if element not in parents:
            raise PlacementError(f"no hydrogen placement rules for parent element {element} (have {', '.join(parents)})") from None
        raise PlacementError(f"no rule for {element} with {n_heavy} heavy neighbours and {n_h} H") from None


# --------------------------------------------------------------------------
# neighbour environment


@dataclass(frozen=True)
class BondedNeighbor:
    site: int  # index into the structure's sites
    symop: int
    shift: tuple[int, int, int]
    cart: np.ndarray
    distance: float


class Environment:
    """Images of the heavy sites of ``s`` searchable around arbitrary Cartesian points."""

    def __init__(self, s: CrystalStructure):
        self.s = s
        self.heavy_idx = np.array([i for i, site in enumerate(s.sites) if site.element != "H"], dtype=int)
        frac = s.frac[self.heavy_idx] if len(self.heavy_idx) else np.zeros((0, 3))
        self.c_frac, c_site, self.c_op, _ = _symmetry_copies(frac, s.symops, include_symmetry=True)
        self.c_site = self.heavy_idx[c_site] if len(c_site) else c_site
        self.radius = {}
        for i in self.heavy_idx:
            el = s.sites[i].element
            if el not in self.radius:
                try:
                    self.radius[el] = covalent_radius(el)
                except (KeyError, UnknownElementError):
                    raise UnknownElementError(f"no covalent radius for element {el}") from None

    def near(self, point, radius: float, min_dist: float = 1e-6) -> list[BondedNeighbor]:
        if not len(self.c_frac):
            return []
        cell = self.s.cell
        centre = cart_to_frac(cell, np.asarray(point, dtype=float)).reshape(1, 3)
        _, cm, sh, disp, dist = kernels.lattice_neighbors(
            np.ascontiguousarray(centre), np.ascontiguousarray(self.c_frac), np.ascontiguousarray(cell.matrix),
            np.ascontiguousarray(cell.heights), float(radius), float(min_dist),
        )
        p = np.asarray(point, dtype=float)
        out = [
            BondedNeighbor(int(self.c_site[m]), int(self.c_op[m]), tuple(int(v) for v in n), p + d, float(r))
            for m, n, d, r in zip(cm, sh, disp, dist)
        ]
        out.sort(key=lambda b: (round(b.distance, 9), b.site, b.symop, b.shift))
        return out

    def bonded_at(self, point, element: str) -> list[BondedNeighbor]:
        r0 = self.radius.get(element)
        if r0 is None:
            r0 = covalent_radius(element)
        reach = r0 + max(self.radius.values(), default=0.0) + BOND_TOLERANCE
        return [
            b for b in self.near(point, reach)
            if b.distance < r0 + self.radius[self.s.sites[b.site].element] + BOND_TOLERANCE
        ]

    def bonded(self, i: int) -> list[BondedNeighbor]:
        site = self.s.sites[i]
        return self.bonded_at(self.s.cart[i], site.element)


def bonded_neighbors(s: CrystalStructure, i: int) -> list[BondedNeighbor]:
    """Heavy-atom images within ``r_cov(i) + r_cov(j) + 0.4`` Å of site ``i``, nearest first."""
    if not 0 <= i < len(s.sites):
        raise IndexError(f"site index {i} out of range")
    return Environment(s).bonded(i)


# --------------------------------------------------------------------------
# counts


@dataclass
class HCountPrediction:
    counts: np.ndarray  # (n_heavy,) int
    probs: np.ndarray  # (n_heavy, 5)

    def __len__(self):
        return len(self.counts)


def onehot_features(elements) -> np.ndarray:
    f = np.zeros((len(elements), NUM_ELEMENT_CLASSES))
    for r, el in enumerate(elements):
        if el not in CLASS_INDEX:
            raise UnknownElementError(f"element {el} is outside the model vocabulary")
        f[r, CLASS_INDEX[el]] = 1.0
    return f


def structure_graph(
    s: CrystalStructure,
    cutoff: float = 5.0,
    include_symmetry: bool = True,
    aux_radius: float = HBOND_AUX_RADIUS,
) -> NeighborGraph:
    """Graph over the heavy sites of ``s`` with element one-hot node features."""
    heavy = s.heavy()
    if not heavy.sites:
        raise ValueError("structure has no heavy atoms")
    return build_cutoff_graph(
        heavy.frac, heavy.cell, heavy.symops, cutoff, include_symmetry=include_symmetry,
        features=onehot_features(heavy.elements), aux_radius=aux_radius,
    )


def predict_h_counts(
    model: ETModel,
    s: CrystalStructure,
    include_symmetry: bool = True,
    aux_radius: float = HBOND_AUX_RADIUS,
) -> HCountPrediction:
    if model.config.feature_mode != "onehot" or model.config.num_classes != NUM_H_CLASSES:
        raise ConfigError("hydrogen counting needs a one-hot model with 5 count classes")
    graph = structure_graph(s, model.config.cutoff, include_symmetry, aux_radius)
    with torch.no_grad():
        out = model(collate([graph], model.dtype))
    real = np.flatnonzero(~graph.is_aux)
    probs = out.probabilities().double().numpy()[real]
    return HCountPrediction(ranked_classes(probs)[:, 0].astype(int), probs)


# --------------------------------------------------------------------------
# placement


@dataclass(frozen=True)
class HGeometry:
    parent: int
    cart: np.ndarray
    bond_length: float
    geometry: str


@dataclass
class HPlacement:
    structure: CrystalStructure
    hydrogens: list[HGeometry]
    errors: list[tuple[int, str]] = field(default_factory=list)
    groups: dict[int, list[int]] = field(default_factory=dict)  # parent -> new H site indices


def _unit(v) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n < 1e-8:
        raise PlacementError("degenerate neighbour geometry")
    return np.asarray(v, dtype=float) / n


def _perpendicular(a: np.ndarray, ref) -> np.ndarray:
    """Unit vector perpendicular to ``a`` pointing towards ``ref``, or a fixed fallback."""
    if ref is not None:
        p = ref - np.dot(ref, a) * a
        if np.linalg.norm(p) > 1e-6:
            return p / np.linalg.norm(p)
    for axis in np.eye(3):
        p = axis - np.dot(axis, a) * a
        if np.linalg.norm(p) > 0.5:
            return p / np.linalg.norm(p)
    raise PlacementError("cannot build a perpendicular direction")


def _heaviest(cands: list[BondedNeighbor], s: CrystalStructure) -> BondedNeighbor | None:
    if not cands:
        return None
    return min(cands, key=lambda b: (-atomic_number(s.sites[b.site].element), round(b.distance, 9), b.site, b.symop))


def _same(p, q, tol=1e-4) -> bool:
    return float(np.linalg.norm(np.asarray(p) - np.asarray(q))) < tol


def _directions(env: Environment, i: int, nbrs: list[BondedNeighbor], rule: HRule) -> list[np.ndarray]:
    s = env.s
    P = s.cart[i]
    geom = rule.geometry
    units = [_unit(b.cart - P) for b in nbrs]
    if geom in ("methine", "sp2"):
        return [-_unit(np.sum(units, axis=0))]
    if geom == "methylene":
        b = -_unit(units[0] + units[1])
        nrm = _unit(np.cross(units[0], units[1]))
        h = math.radians(TETRAHEDRAL) / 2
        return [math.cos(h) * b + math.sin(h) * nrm, math.cos(h) * b - math.sin(h) * nrm]
    if geom == "tetra":
        return [v / math.sqrt(3.0) for v in np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float)]
    if geom == "water":
        h = math.radians(104.5) / 2
        return [np.array([math.sin(h), 0, math.cos(h)]), np.array([-math.sin(h), 0, math.cos(h)])]

    A = nbrs[0].cart
    a = _unit(P - A)
    if geom == "linear":
        return [a]
    second = [b for b in env.bonded_at(A, s.sites[nbrs[0].site].element) if not _same(b.cart, P)]
    B = _heaviest(second, s)
    ref = None if B is None else B.cart - A
    if geom == "rotor":
        acc = _acceptor(env, i, nbrs, second)
        if acc is not None:
            v = acc.cart - P
            if np.linalg.norm(v - np.dot(v, a) * a) > 1e-6:
                return [_COS_T * a + _SIN_T * _perpendicular(a, v)]
        return [_COS_T * a - _SIN_T * _perpendicular(a, ref)]
    e1 = _perpendicular(a, ref)
    if geom == "terminal2":
        c, sn = math.cos(math.radians(60)), math.sin(math.radians(60))
        return [c * a + sn * e1, c * a - sn * e1]
    if geom == "methyl":
        e2 = np.cross(a, e1)
        out = []
        for phi in (180.0, 60.0, -60.0):
            f = math.radians(phi)
            out.append(_COS_T * a + _SIN_T * (math.cos(f) * e1 + math.sin(f) * e2))
        return out
    raise PlacementError(f"unknown geometry {geom}")


def _acceptor(env: Environment, i: int, nbrs, second) -> BondedNeighbor | None:
    """Nearest N/O/F/Cl within 3.2 Å of site i that is not a 1-2 or 1-3 neighbour."""
    P = env.s.cart[i]
    excluded = [b.cart for b in nbrs] + [b.cart for b in second]
    for b in nbrs[1:]:
        excluded += [c.cart for c in env.bonded_at(b.cart, env.s.sites[b.site].element)]
    for b in env.near(P, HBOND_AUX_RADIUS):
        if env.s.sites[b.site].element not in ACCEPTORS:
            continue
        if any(_same(b.cart, q) for q in excluded):
            continue
        return b
    return None


def _h_label(parent_label: str, j: int, m: int, taken: set[str]) -> str:
    tail = re.sub(r"^[A-Za-z]+", "", parent_label) or parent_label
    base = f"H{tail}" + ("" if m == 1 else "ABCD"[j])
    label, n = base, 1
    while label in taken:
        n += 1
        label = f"{base}_{n}"
    taken.add(label)
    return label


def _as_counts(counts, n: int) -> np.ndarray:
    c = counts.counts if isinstance(counts, HCountPrediction) else counts
    c = np.asarray(c, dtype=int).reshape(-1)
    if len(c) != n:
        raise ValueError(f"{len(c)} counts given for {n} heavy sites")
    if np.any(c < 0) or np.any(c >= NUM_H_CLASSES):
        raise ValueError(f"hydrogen counts must lie in 0..{NUM_H_CLASSES - 1}")
    return c


def place_hydrogens(s: CrystalStructure, counts) -> HPlacement:
    """Append riding hydrogens to the heavy sites of ``s``; ``counts`` is per heavy site, in site order.

    Atoms whose environment has no rule are skipped and reported in ``errors``.
    """
    heavy_idx = [i for i, site in enumerate(s.sites) if site.element != "H"]
    c = _as_counts(counts, len(heavy_idx))
    env = Environment(s)
    taken = {site.label for site in s.sites}
    new_sites, placed, errors, groups = [], [], [], {}
    for i, m in zip(heavy_idx, c):
        if m == 0:
            continue
        site = s.sites[i]
        try:
            nbrs = env.bonded(i)
            rule = rule_for(site.element, len(nbrs), int(m))
            dirs = _directions(env, i, nbrs, rule)
        except PlacementError as exc:
            errors.append((i, f"{site.label}: {exc}"))
            continue
        P = s.cart[i]
        groups[i] = []
        for j, d in enumerate(dirs):
            pos = P + rule.bond_length * d
            groups[i].append(len(s.sites) + len(new_sites))
            new_sites.append(Site(
                _h_label(site.label, j, int(m), taken), "H", tuple(cart_to_frac(s.cell, pos)),
                1.0, rule.u_factor * site.u_iso,
            ))
            placed.append(HGeometry(i, pos, rule.bond_length, rule.geometry))
    return HPlacement(s.with_sites(list(s.sites) + new_sites), placed, errors, groups)


# --------------------------------------------------------------------------
# residual support


@dataclass(frozen=True)
class GroupResidual:
    parent: int
    h_sites: tuple[int, ...]
    delta_r1: float  # R1(with group) - R1(without group)

    @property
    def supported(self) -> bool:
        return self.delta_r1 < 0


def hydrogen_groups(s: CrystalStructure) -> dict[int, list[int]]:
    """Assign every H site to its nearest heavy-atom image."""
    env = Environment(s)
    groups: dict[int, list[int]] = {}
    cart = s.cart
    for h, site in enumerate(s.sites):
        if site.element != "H":
            continue
        near = env.near(cart[h], 1.6)
        if not near:
            raise PlacementError(f"{site.label}: no heavy atom within 1.6 A")
        groups.setdefault(near[0].site, []).append(h)
    return dict(sorted(groups.items()))


def residual_check(s_with_h: CrystalStructure, refl, groups: dict[int, list[int]] | None = None) -> list[GroupResidual]:
    """Leave-one-group-out ΔR1 for every hydrogen group; negative means the data support the group."""
    from . import xmetrics

    groups = hydrogen_groups(s_with_h) if groups is None else groups
    fo = xmetrics.observed_amplitudes(refl.fo2)
    fc_all = xmetrics.structure_factors(s_with_h, refl).fc
    r_all = xmetrics.r1(fo, fc_all, xmetrics.scale_factor(fo, fc_all))
    out = []
    for parent, hs in groups.items():
        part = s_with_h.with_sites([s_with_h.sites[h] for h in hs])
        fc = fc_all - xmetrics.structure_factors(part, refl).fc
        r_without = xmetrics.r1(fo, fc, xmetrics.scale_factor(fo, fc))
        out.append(GroupResidual(int(parent), tuple(int(h) for h in hs), r_all - r_without))
    return out
