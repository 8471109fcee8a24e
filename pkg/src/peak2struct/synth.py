"""Synthetic molecular crystals for training and fixtures.

Molecules are random trees grown atom by atom from a small set of atom kinds,
each with its own idealised bond lengths and bond angles (sp3 C, carbonyl C,
nitrile C and N, planar N, ether/hydroxyl/carbonyl O, thioether S, terminal Cl).
A molecule is dropped at a general position of a space group and the cell is
enlarged until no intermolecular contact is shorter than ``MIN_CONTACT``.

Hydrogen-bond fixtures (``kind="hbond"``) use sp3 C, ether O and a terminal O
whose C-O distance never varies; the terminal O carries one H exactly when an
O/N of another molecule sits within 3.2 Å.  Such contacts are planted by putting
an inversion centre 1.35 Å beyond the O, so the partner is a symmetry image and
only a symmetry-aware graph can see it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import HBOND_AUX_RADIUS, build_cutoff_graph
from .lattice import CrystalStructure, Site, SymmetryOp, UnitCell, cart_to_frac, parse_symop_xyz
from .peaks import LabeledCloud, NoiseConfig, synthesize_cloud

MIN_CONTACT = 3.3
HBOND_GAP = 1.35  # O to inversion centre; O...O' = 2.7 Å
WAVELENGTH = 0.71073
ELEMENT_TASK = ("C", "N", "O", "S", "Cl")

SPACE_GROUPS = {
    "P1": ["x,y,z"],
    "P-1": ["x,y,z", "-x,-y,-z"],
    "P21/c": ["x,y,z", "-x,y+1/2,-z+1/2", "-x,-y,-z", "x,-y+1/2,z+1/2"],
    "P212121": ["x,y,z", "-x+1/2,-y,z+1/2", "-x,y+1/2,-z+1/2", "x+1/2,-y+1/2,-z"],
    "C2/c": [
        "x,y,z", "-x,y,-z+1/2", "-x,-y,-z", "x,-y,z+1/2",
        "x+1/2,y+1/2,z", "-x+1/2,y+1/2,-z+1/2", "-x+1/2,-y+1/2,-z", "x+1/2,-y+1/2,z+1/2",
    ],
}
_SYSTEM = {"P1": "triclinic", "P-1": "triclinic", "P21/c": "monoclinic", "P212121": "orthorhombic", "C2/c": "monoclinic"}


def space_group_ops(name: str) -> tuple[SymmetryOp, ...]:
    return tuple(parse_symop_xyz(t) for t in SPACE_GROUPS[name])


# --------------------------------------------------------------------------
# atom kinds

# element, number of bond directions, angle between them (deg), H valence
_KINDS = {
    "C3": ("C", 4, 109.4712206, 4),
    "C2": ("C", 3, 120.0, 3),  # carbonyl carbon, one slot taken by =O
    "C1": ("C", 2, 180.0, 2),  # nitrile carbon
    "Nt": ("N", 1, 0.0, 0),  # nitrile nitrogen
    "N": ("N", 3, 120.0, 3),
    "Oe": ("O", 2, 111.0, 0),
    "Oh": ("O", 1, 0.0, 1),
    "Oc": ("O", 1, 0.0, 0),
    "Ot": ("O", 1, 0.0, 0),  # hbond fixtures; count decided by contacts
    "S": ("S", 2, 100.0, 0),
    "Cl": ("Cl", 1, 0.0, 0),
}

_BONDS = {
    ("C3", "C3"): 1.53, ("C3", "C2"): 1.51, ("C2", "C2"): 1.50,
    ("C3", "C1"): 1.47, ("C1", "Nt"): 1.14,
    ("C3", "N"): 1.46, ("C2", "N"): 1.34,
    ("C3", "Oe"): 1.43, ("C2", "Oe"): 1.34,
    ("C3", "Oh"): 1.42, ("C2", "Oh"): 1.31,
    ("C2", "Oc"): 1.22, ("C3", "Ot"): 1.30,
    ("C3", "S"): 1.81, ("C2", "S"): 1.76,
    ("C3", "Cl"): 1.78, ("C2", "Cl"): 1.79,
}

_CHILDREN = {
    "elements": {"C3": 0.40, "C2": 0.10, "C1": 0.03, "N": 0.12, "Oe": 0.06, "Oh": 0.09, "S": 0.10, "Cl": 0.10},
    "hbond": {"C3": 0.65, "Ot": 0.25, "Oe": 0.10},
}
# substituents of N, ether O and S; amides and esters dominate real organic crystals
_HETERO_CHILDREN = {
    "elements": {"N": {"C3": 0.45, "C2": 0.55}, "Oe": {"C3": 0.6, "C2": 0.4}, "S": {"C3": 0.75, "C2": 0.25}},
    "hbond": {"N": {"C3": 1.0}, "Oe": {"C3": 1.0}, "S": {"C3": 1.0}},
}
_FORCED_CHILD = {"C2": "Oc", "C1": "Nt"}


def bond_length(a: str, b: str) -> float:
    return _BONDS.get((a, b)) or _BONDS[(b, a)]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _cone(back: np.ndarray, n_dirs: int, angle: float, phase: float) -> list[np.ndarray]:
    """The ``n_dirs - 1`` bond directions making ``angle`` with ``back``, evenly spread in azimuth."""
    ref = np.array([1.0, 0, 0]) if abs(back[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = ref - np.dot(ref, back) * back
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(back, e1)
    t = math.radians(angle)
    out = []
    for k in range(n_dirs - 1):
        f = phase + 2 * math.pi * k / (n_dirs - 1)
        out.append(math.cos(t) * back + math.sin(t) * (math.cos(f) * e1 + math.sin(f) * e2))
    return out


@dataclass
class _Atom:
    kind: str
    pos: np.ndarray
    free: list  # unused bond directions
    capacity: int  # children still allowed
    required: int  # children still needed
    parent: int = -1
    degree: int = 0


@dataclass
class Molecule:
    kinds: list[str]
    cart: np.ndarray  # (n, 3) Å
    bonds: list[tuple[int, int]]

    @property
    def elements(self) -> list[str]:
        return [_KINDS[k][0] for k in self.kinds]

    def degrees(self) -> np.ndarray:
        d = np.zeros(len(self.kinds), dtype=int)
        for i, j in self.bonds:
            d[i] += 1
            d[j] += 1
        return d

    def h_counts(self) -> np.ndarray:
        """Intramolecular H counts; terminal ``Ot`` atoms get 0 here."""
        deg = self.degrees()
        out = []
        for k, d in zip(self.kinds, deg):
            valence = _KINDS[k][3]
            out.append(max(valence - d, 0) if k in ("C3", "C2", "C1", "N") else valence)
        return np.array(out, dtype=int)


def _capacity(kind: str, rng, root=False) -> tuple[int, int]:
    if kind == "C3":
        if root:
            return int(rng.choice([1, 2, 3], p=[0.3, 0.45, 0.25])), 0
        return int(rng.choice([0, 1, 2, 3], p=[0.3, 0.35, 0.25, 0.1])), 0
    if kind == "C2":
        return 1 + int(rng.random() < 0.5), 1
    if kind == "C1":
        return 1, 1
    if kind == "N":
        return 1 + int(rng.random() < 0.4), 1
    if kind in ("Oe", "S"):
        return 1, 1
    return 0, 0


def _pick(table: dict, rng) -> str:
    keys = list(table)
    p = np.array([table[k] for k in keys])
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def build_molecule(rng: np.random.Generator, n_min: int = 5, n_max: int = 12, kind: str = "elements",
                   max_restarts: int = 200) -> Molecule:
    """Grow a random acyclic molecule with ``n_min..n_max`` heavy atoms (a few more when open valences must be closed)."""
    for _ in range(max_restarts):
        mol = _grow(rng, int(rng.integers(n_min, n_max + 1)), kind)
        if mol is not None and len(mol.kinds) >= n_min:
            return mol
    raise RuntimeError("could not grow a molecule with the requested size")


def _grow(rng, target: int, mode: str) -> Molecule | None:
    back = random_rotation(rng)[:, 0]
    cap, req = _capacity("C3", rng, root=True)
    atoms = [_Atom("C3", np.zeros(3), [back] + _cone(back, 4, 109.4712206, rng.uniform(0, 2 * math.pi)), cap, req)]
    bonds: list[tuple[int, int]] = []
    for _ in range(20 * target):
        open_ = [i for i, a in enumerate(atoms) if a.capacity > 0 and a.free]
        needy = [i for i in open_ if atoms[i].required > 0]
        if len(atoms) >= target:
            if not needy:
                break
            p = needy[0]
        elif not open_:
            break
        else:
            p = needy[0] if needy and rng.random() < 0.5 else int(rng.choice(open_))
        pa = atoms[p]
        if pa.kind in _FORCED_CHILD and pa.required:
            ck = _FORCED_CHILD[pa.kind]
        elif len(atoms) >= target:
            ck = "C3"
        elif pa.kind in ("C3", "C2"):
            ck = _pick(_CHILDREN[mode], rng)
        else:
            ck = _pick(_HETERO_CHILDREN[mode][pa.kind], rng)
        if (pa.kind, ck) not in _BONDS and (ck, pa.kind) not in _BONDS:
            ck = "C3"
        L = bond_length(pa.kind, ck)
        el, nd, ang, _ = _KINDS[ck]
        placed = False
        for _try in range(12):
            d = pa.free[int(rng.integers(len(pa.free)))]
            pos = pa.pos + L * d
            if not _clear(atoms, p, pos):
                continue
            free = _cone(-d, nd, ang, rng.uniform(0, 2 * math.pi)) if nd > 1 else []
            if len(atoms) >= target:
                cap, req = (0, 0) if ck == "C3" else _capacity(ck, rng)
            else:
                cap, req = _capacity(ck, rng)
            atoms.append(_Atom(ck, pos, free, min(cap, len(free)), min(req, len(free)), parent=p))
            pa.free = [f for f in pa.free if f is not d]
            pa.capacity -= 1
            forced = _FORCED_CHILD.get(pa.kind)
            pa.required = pa.required if forced and ck != forced else max(pa.required - 1, 0)
            bonds.append((p, len(atoms) - 1))
            placed = True
            break
        if not placed:
            if pa.required:
                return None
            pa.capacity -= 1
    if any(a.required for a in atoms):
        return None
    return Molecule([a.kind for a in atoms], np.array([a.pos for a in atoms]), bonds)


def _clear(atoms: list[_Atom], parent: int, pos: np.ndarray) -> bool:
    near = {atoms[parent].parent} | {i for i, a in enumerate(atoms) if a.parent == parent}
    for i, a in enumerate(atoms):
        if i == parent:
            continue
        d = float(np.linalg.norm(a.pos - pos))
        limit = 2.25 if i in near else 2.9
        if d < limit:
            return False
    return True


# --------------------------------------------------------------------------
# packing


@dataclass
class SynthCrystal:
    structure: CrystalStructure  # heavy atoms only
    h_counts: np.ndarray  # per site
    kinds: list[str]
    space_group: str
    planted: tuple[int, ...] = ()  # sites given an H-bond partner by construction

    def with_hydrogens(self):
        from .hydrogens import place_hydrogens

        return place_hydrogens(self.structure, self.h_counts)


def _random_angles(system: str, rng) -> tuple[float, float, float]:
    if system == "triclinic":
        return tuple(float(x) for x in rng.uniform(80.0, 100.0, size=3))
    if system == "monoclinic":
        return 90.0, float(rng.uniform(92.0, 112.0)), 90.0
    return 90.0, 90.0, 90.0


def _contacts(s: CrystalStructure, radius: float):
    """Intermolecular (non-identity or shifted) heavy-atom contacts within ``radius``: (i, origin j, dist)."""
    g = build_cutoff_graph(s.frac, s.cell, s.symops, radius, include_symmetry=True, aux_radius=radius)
    ident = next(k for k, op in enumerate(s.symops) if op.is_identity)
    inter = (g.symop != ident) | np.any(g.shift != 0, axis=1)
    return g.src[inter], g.origin[g.dst[inter]], g.dist[inter]


def _structure(cell, ops, elements, cart, name) -> CrystalStructure:
    frac = cart_to_frac(cell, cart)
    counters: dict[str, int] = {}
    sites = []
    for el, f in zip(elements, frac):
        counters[el] = counters.get(el, 0) + 1
        sites.append(Site(f"{el}{counters[el]}", el, tuple(f), 1.0, 0.03))
    return CrystalStructure(cell, ops, sites, name, WAVELENGTH)


def pack_molecule(mol: Molecule, rng, space_group: str = "P-1", plant: int | None = None,
                  name: str = "synth", max_tries: int = 60) -> SynthCrystal:
    """Place ``mol`` in a cell of ``space_group``; ``plant`` (a terminal O index) puts an inversion centre beyond it."""
    ops = space_group_ops(space_group)
    if plant is not None and "-x,-y,-z" not in SPACE_GROUPS[space_group]:
        raise ValueError("planting an H-bond dimer needs an inversion centre at the origin")
    system = _SYSTEM[space_group]
    for _ in range(max_tries):
        rot = random_rotation(rng)
        cart = (mol.cart - mol.cart.mean(axis=0)) @ rot.T
        if plant is not None:
            parent = next(i for i, j in mol.bonds if j == plant)
            u = cart[plant] - cart[parent]
            u /= np.linalg.norm(u)
            cart = cart - (cart[plant] + HBOND_GAP * u)
            span = 2.0 * np.abs(cart).max(axis=0)
        else:
            span = cart.max(axis=0) - cart.min(axis=0)
        angles = _random_angles(system, rng)
        base = float(np.max(span)) + MIN_CONTACT + 0.5
        lengths = np.maximum(span + MIN_CONTACT + 0.5, 0.6 * base) * rng.uniform(1.0, 1.15, size=3)
        if len(ops) > 2 and plant is None:
            lengths = lengths * 1.25
        for _grow_step in range(12):
            cell = UnitCell(*lengths, *angles)
            if plant is None:
                offset = rng.uniform(0.0, 1.0, size=3) @ cell.matrix
                trial = cart + offset
            else:
                trial = cart
            s = _structure(cell, ops, mol.elements, trial, name)
            ok, partner_ok = _packing_ok(s, plant)
            if ok and partner_ok:
                counts = mol.h_counts()
                planted = _hbond_sites(s, mol)
                for i in planted:
                    counts[i] = 1
                return SynthCrystal(s, counts, list(mol.kinds), space_group, tuple(planted))
            if not partner_ok:
                break
            lengths = lengths * 1.1
    raise RuntimeError("could not pack molecule without clashes")


def _packing_ok(s: CrystalStructure, plant: int | None) -> tuple[bool, bool]:
    src, dst, dist = _contacts(s, MIN_CONTACT)
    for i, j, d in zip(src, dst, dist):
        if plant is not None and i == plant and j == plant and abs(d - 2 * HBOND_GAP) < 1e-6:
            continue
        if plant is not None and (i == plant or j == plant) and d < MIN_CONTACT:
            return False, False  # the dimer itself clashes; re-orient rather than grow
        return False, True
    return True, True


def _hbond_sites(s: CrystalStructure, mol: Molecule) -> list[int]:
    """Terminal ``Ot`` sites with an intermolecular O/N within 3.2 Å."""
    src, dst, dist = _contacts(s, HBOND_AUX_RADIUS)
    out = set()
    for i, j, d in zip(src, dst, dist):
        if mol.kinds[i] == "Ot" and s.sites[j].element in ("O", "N") and d <= HBOND_AUX_RADIUS:
            out.add(int(i))
    return sorted(out)


# --------------------------------------------------------------------------
# datasets


def random_crystal(seed: int, kind: str = "elements", index: int = 0, n_min: int = 5, n_max: int = 12) -> SynthCrystal:
    """One reproducible synthetic crystal; ``kind`` is ``"elements"`` or ``"hbond"``."""
    rng = np.random.default_rng([int(seed), int(index), 0 if kind == "elements" else 1])
    name = f"synth-{kind}-{seed}-{index}"
    for _ in range(50):
        mol = build_molecule(rng, n_min, n_max, kind)
        if kind == "hbond":
            terminal = [j for j, k in enumerate(mol.kinds) if k == "Ot"]
            if terminal and rng.random() < 0.7:
                return pack_molecule(mol, rng, "P-1", plant=int(rng.choice(terminal)), name=name)
            sg = str(rng.choice(["P1", "P-1", "P21/c"]))
        else:
            sg = str(rng.choice(list(SPACE_GROUPS), p=[0.15, 0.3, 0.35, 0.1, 0.1]))
        try:
            return pack_molecule(mol, rng, sg, name=name)
        except RuntimeError:
            continue
    raise RuntimeError("could not build a synthetic crystal")


def element_dataset(n: int, seed: int = 0, noise: NoiseConfig = NoiseConfig(), start: int = 0):
    """``n`` (crystal, labelled peak cloud) pairs over C, N, O, S, Cl."""
    out = []
    for idx in range(start, start + n):
        xtal = random_crystal(seed, "elements", idx)
        cloud = synthesize_cloud(xtal.structure, noise, seed=seed * 100003 + idx)
        out.append((xtal, LabeledCloud(cloud.cloud, cloud.labels, xtal.structure.name)))
    return out


def hbond_dataset(n: int, seed: int = 0, start: int = 0) -> list[SynthCrystal]:
    return [random_crystal(seed, "hbond", idx) for idx in range(start, start + n)]


def large_crystal(n_heavy: int = 370, seed: int = 0) -> SynthCrystal:
    """A P1 cell holding many molecules on a grid of boxes, about ``n_heavy`` heavy atoms in total."""
    rng = np.random.default_rng([int(seed), 370])
    mols, total = [], 0
    while total < n_heavy:
        m = build_molecule(rng, 6, 14, "elements")
        if total + len(m.kinds) > n_heavy:
            if n_heavy - total < 5:
                m = Molecule(m.kinds[: n_heavy - total], m.cart[: n_heavy - total],
                             [b for b in m.bonds if max(b) < n_heavy - total])
            else:
                continue
        mols.append(m)
        total += len(m.kinds)
    per_side = math.ceil(len(mols) ** (1.0 / 3.0))
    box = max(float(np.max(np.linalg.norm(m.cart - m.cart.mean(0), axis=1))) for m in mols) * 2 + MIN_CONTACT + 0.2
    cell = UnitCell(box * per_side, box * per_side, box * per_side, 90.0, 90.0, 90.0)
    elements, cart, kinds, counts = [], [], [], []
    for k, m in enumerate(mols):
        cz, r = divmod(k, per_side * per_side)
        cy, cx = divmod(r, per_side)
        centre = (np.array([cx, cy, cz]) + 0.5) * box
        cart.append((m.cart - m.cart.mean(0)) @ random_rotation(rng).T + centre)
        elements += m.elements
        kinds += m.kinds
        counts.append(m.h_counts())
    s = _structure(cell, (SymmetryOp.identity(),), elements, np.vstack(cart), f"synth-large-{seed}")
    return SynthCrystal(s, np.concatenate(counts), kinds, "P1")
