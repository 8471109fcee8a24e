"""Electron-density peak clouds: data model, labelling against expert models, simulation.

Dataset text format (``write_dataset`` / ``read_dataset``), one block per structure::

    # structure <id> cell <a> <b> <c> <alpha> <beta> <gamma>
    # symop <xyz triplet>            (one line per operation)
    <x> <y> <z> <height> <label> <id>  (one line per peak)

Blank lines and other ``#`` lines are ignored.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .elements import ELEMENT_CLASSES, NOISE, atomic_number
from .lattice import (
    CrystalStructure,
    SymmetryOp,
    UnitCell,
    cart_to_frac,
    expand_equivalents,
    frac_to_cart,
    parse_symop_xyz,
    wrap,
)

DEFAULT_MATCH_TOL = 0.5


class CellMismatchError(ValueError):
    pass


@dataclass
class PeakCloud:
    frac: np.ndarray
    heights: np.ndarray
    provenance: str = "measured"
    name: str = "peaks"
    names: list[str] = field(default_factory=list)
    cell: UnitCell | None = None
    symops: tuple[SymmetryOp, ...] = (SymmetryOp.identity(),)

    def __post_init__(self):
        self.frac = wrap(np.asarray(self.frac, dtype=float).reshape(-1, 3))
        self.heights = np.asarray(self.heights, dtype=float).reshape(-1)
        if len(self.heights) != len(self.frac):
            raise ValueError("peak positions and heights differ in length")
        if not np.all(np.isfinite(self.heights)):
            raise ValueError("peak heights must be finite")
        if not self.names:
            self.names = [f"Q{i + 1}" for i in range(len(self.heights))]
        self.symops = tuple(self.symops)

    def __len__(self):
        return len(self.heights)

    def subset(self, idx) -> "PeakCloud":
        idx = np.asarray(idx, dtype=int)
        return PeakCloud(
            self.frac[idx], self.heights[idx], self.provenance, self.name,
            [self.names[i] for i in idx], self.cell, self.symops,
        )


@dataclass
class LabeledCloud:
    cloud: PeakCloud
    labels: list[str]
    structure_id: str = ""

    def __post_init__(self):
        if len(self.labels) != len(self.cloud):
            raise ValueError(f"{len(self.labels)} labels for {len(self.cloud)} peaks")
        bad = [x for x in self.labels if x not in ELEMENT_CLASSES]
        if bad:
            raise ValueError(f"labels outside the element vocabulary: {sorted(set(bad))}")

    @property
    def class_indices(self) -> np.ndarray:
        return np.array([ELEMENT_CLASSES.index(x) for x in self.labels], dtype=int)


def normalize_heights(cloud: PeakCloud | np.ndarray) -> np.ndarray:
    """Heights relative to the strongest peak, in (0, 1]."""
    h = cloud.heights if isinstance(cloud, PeakCloud) else np.asarray(cloud, dtype=float)
    if h.size == 0:
        raise ValueError("cannot normalise an empty peak cloud")
    top = h.max()
    if not top > 0:
        raise ValueError("degenerate peak cloud: no positive height")
    return h / top


def _nearest_images(cell: UnitCell, peaks_frac: np.ndarray, images_frac: np.ndarray):
    """Minimum-image distance and lattice shift from every peak to every image."""
    d = images_frac[None, :, :] - peaks_frac[:, None, :]
    base = -np.rint(d)
    best = np.full(d.shape[:2], np.inf)
    best_shift = np.zeros(d.shape, dtype=int)
    for off in itertools.product((-1, 0, 1), repeat=3):
        shift = base + np.array(off)
        dist = np.linalg.norm(frac_to_cart(cell, d + shift), axis=-1)
        better = dist < best
        best = np.where(better, dist, best)
        best_shift[better] = shift[better].astype(int)
    return best, best_shift


def label_peaks(
    cloud: PeakCloud,
    expert: CrystalStructure,
    tol: float = DEFAULT_MATCH_TOL,
    structure_id: str | None = None,
) -> LabeledCloud:
    """Assign each peak the element of the closest expert heavy atom image within ``tol`` Å.

    Matching is greedy by ascending distance and one-to-one between peaks and
    atom images (an image is one symmetry copy at one lattice translation).
    """
    if cloud.cell is not None and not cloud.cell.isclose(expert.cell, 1e-3):
        raise CellMismatchError(f"peak cell {cloud.cell} differs from expert cell {expert.cell}")
    heavy = expert.heavy()
    labels = [NOISE] * len(cloud)
    if len(cloud) and heavy.sites:
        images = expand_equivalents(heavy)
        img_frac = np.array([p for _, _, p in images])
        dist, shift = _nearest_images(heavy.cell, cloud.frac, img_frac)
        cand = np.argwhere(dist <= tol)
        order = sorted(
            range(len(cand)), key=lambda c: (dist[cand[c][0], cand[c][1]], cand[c][0], cand[c][1])
        )
        used_peak: set[int] = set()
        used_image: set[tuple] = set()
        for c in order:
            p, m = cand[c]
            key = (int(m), *shift[p, m].tolist())
            if p in used_peak or key in used_image:
                continue
            used_peak.add(int(p))
            used_image.add(key)
            labels[p] = heavy.sites[images[m][0]].element
    return LabeledCloud(cloud, labels, structure_id if structure_id is not None else expert.name)


@dataclass(frozen=True)
class NoiseConfig:
    sigma_pos: float = 0.05
    sigma_height: float = 0.1
    spurious_rate: float = 0.05
    spurious_height: tuple[float, float] = (0.5, 2.5)


def synthesize_cloud(s: CrystalStructure, cfg: NoiseConfig = NoiseConfig(), seed: int = 0) -> LabeledCloud:
    """Simulated Q-peak list: one jittered peak per heavy site plus Poisson spurious peaks."""
    rng = np.random.default_rng(seed)
    heavy = [site for site in s.sites if site.element != "H"]
    n = len(heavy)
    cart = frac_to_cart(s.cell, np.array([site.frac for site in heavy]).reshape(-1, 3))
    cart = cart + rng.normal(0.0, cfg.sigma_pos, size=cart.shape) if cfg.sigma_pos > 0 else cart
    z = np.array([atomic_number(site.element) for site in heavy], dtype=float)
    eps = rng.normal(0.0, cfg.sigma_height, size=n) if cfg.sigma_height > 0 else np.zeros(n)
    heights = z * (1.0 + eps)
    n_noise = int(rng.poisson(cfg.spurious_rate * n)) if cfg.spurious_rate > 0 else 0
    noise_pos = rng.random((n_noise, 3))
    noise_h = rng.uniform(*cfg.spurious_height, size=n_noise)
    frac = np.vstack([cart_to_frac(s.cell, cart), noise_pos]) if n_noise else cart_to_frac(s.cell, cart)
    cloud = PeakCloud(
        frac,
        np.concatenate([heights, noise_h]),
        "synthetic",
        s.name,
        cell=s.cell,
        symops=s.symops,
    )
    labels = [site.element for site in heavy] + [NOISE] * n_noise
    return LabeledCloud(cloud, labels, s.name)


# --------------------------------------------------------------------------
# dataset files


def write_dataset(items: Iterable[LabeledCloud]) -> str:
    out = []
    for item in items:
        c = item.cloud
        if c.cell is None:
            raise ValueError(f"{item.structure_id}: cloud has no cell")
        cell = " ".join(repr(float(v)) for v in c.cell.lengths + c.cell.angles)
        sid = item.structure_id or c.name
        out.append(f"# structure {sid} cell {cell}")
        out += [f"# symop {op.to_xyz()}" for op in c.symops]
        for p, h, lab in zip(c.frac, c.heights, item.labels):
            x, y, z = (float(v) for v in p)
            out.append(f"{x!r} {y!r} {z!r} {float(h)!r} {lab} {sid}")
    return "\n".join(out) + "\n"


def read_dataset(text: str) -> list[LabeledCloud]:
    items: list[LabeledCloud] = []
    cur = None

    def flush():
        if cur is not None:
            cloud = PeakCloud(
                np.array(cur["pos"]).reshape(-1, 3), np.array(cur["h"]), "synthetic", cur["id"],
                cell=cur["cell"], symops=tuple(cur["ops"]) or (SymmetryOp.identity(),),
            )
            items.append(LabeledCloud(cloud, cur["labels"], cur["id"]))

    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            toks = line[1:].split()
            if toks[:1] == ["structure"]:
                flush()
                cur = {"id": toks[1], "cell": UnitCell(*map(float, toks[3:9])), "ops": [], "pos": [], "h": [], "labels": []}
            elif toks[:1] == ["symop"] and cur is not None:
                cur["ops"].append(parse_symop_xyz(" ".join(toks[1:])))
            continue
        toks = line.split()
        if cur is None or len(toks) != 6:
            raise ValueError(f"dataset line {lineno}: expected 'x y z height label id' after a structure header")
        cur["pos"].append([float(t) for t in toks[:3]])
        cur["h"].append(float(toks[3]))
        cur["labels"].append(toks[4])
    flush()
    return items

