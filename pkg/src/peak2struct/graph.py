"""Periodic, symmetry-aware cutoff graphs.

Edge convention: edge ``(src=i, dst=j)`` lists node ``j`` as a neighbour of the
centre ``i``; its ``disp`` is ``r_j - r_i`` in Cartesian Å and messages flow
``j -> i``.  For a real neighbour the neighbour position is
``x_j + shift`` (fractional); for an auxiliary node it is ``op_k(x_site) + shift``
with ``op_k`` a non-identity operation.  Auxiliary nodes are never centres, so
they feed messages into real atoms but carry no prediction target.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .lattice import DEDUPE_TOL, SymmetryOp, UnitCell, frac_distance

HBOND_AUX_RADIUS = 3.2
DEFAULT_CUTOFF = 5.0
MIN_DIST = 1e-8


@dataclass
class NeighborGraph:
    features: np.ndarray  # (n_nodes, d)
    pos: np.ndarray  # (n_nodes, 3) Cartesian
    is_aux: np.ndarray  # (n_nodes,) bool
    origin: np.ndarray  # (n_nodes,) index of the input position each node copies
    src: np.ndarray
    dst: np.ndarray
    disp: np.ndarray  # (n_edges, 3)
    shift: np.ndarray  # (n_edges, 3) int
    symop: np.ndarray  # (n_edges,) int
    cutoff: float

    @property
    def n_nodes(self) -> int:
        return len(self.pos)

    @property
    def n_real(self) -> int:
        return int((~self.is_aux).sum())

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @property
    def dist(self) -> np.ndarray:
        return np.linalg.norm(self.disp, axis=1)

    def edge_keys(self, decimals: int = 9) -> list[tuple]:
        """Implementation-independent edge identities, for multiset comparisons."""
        out = []
        for s, d, k, n, v in zip(self.src, self.dst, self.symop, self.shift, self.disp):
            out.append((int(self.origin[s]), int(self.origin[d]), int(k), *map(int, n), *np.round(v, decimals)))
        return out


def _identity_index(symops) -> int:
    for k, op in enumerate(symops or ()):
        if op.is_identity:
            return k
    return 0


def _symmetry_copies(frac: np.ndarray, symops, include_symmetry: bool, tol: float = DEDUPE_TOL):
    """Distinct (mod lattice) copies ``op_k(x_j)``; identity copies are the input points verbatim."""
    ident = _identity_index(symops)
    c_frac, c_site, c_op = [], [], []
    for j, x in enumerate(frac):
        kept = [x]
        c_frac.append(x)
        c_site.append(j)
        c_op.append(ident)
        if not include_symmetry:
            continue
        for k, op in enumerate(symops):
            if k == ident:
                continue
            p = x @ op.R.T + op.t
            if frac_distance(np.array(kept), p).min() < tol:
                continue
            kept.append(p)
            c_frac.append(p)
            c_site.append(j)
            c_op.append(k)
    return np.array(c_frac, dtype=float).reshape(-1, 3), np.array(c_site, dtype=int), np.array(c_op, dtype=int), ident


def _features(features, n) -> np.ndarray:
    if features is None:
        return np.zeros((n, 1))
    f = np.asarray(features, dtype=float)
    return f.reshape(n, -1)


def _assemble(frac, cell, feats, ci, cj, ck, sh, disp, is_aux_edge, aux_radius, cutoff) -> NeighborGraph:
    """Shared tail of both builders: create auxiliary nodes, sort edges."""
    n = len(frac)
    dist = np.linalg.norm(disp, axis=1)
    pos = np.asarray(frac, dtype=float).reshape(-1, 3) @ cell.matrix
    aux_edges = np.flatnonzero(is_aux_edge)
    edge_key = {int(e): (int(cj[e]), int(ck[e]), *map(int, sh[e])) for e in aux_edges}
    first: dict[tuple, int] = {}
    for e in aux_edges:
        if dist[e] <= aux_radius + 1e-12:
            first.setdefault(edge_key[int(e)], int(e))
    node_of = {key: n + idx for idx, key in enumerate(sorted(first))}
    keep = ~is_aux_edge
    dst = np.where(keep, cj, -1)
    for e in aux_edges:
        node = node_of.get(edge_key[int(e)])
        if node is not None:
            keep[e] = True
            dst[e] = node
    aux_pos = [pos[ci[first[key]]] + disp[first[key]] for key in sorted(first)]
    aux_origin = [key[0] for key in sorted(first)]
    all_pos = np.vstack([pos] + ([np.array(aux_pos)] if aux_pos else []))
    origin = np.concatenate([np.arange(n), np.array(aux_origin, dtype=int)])
    is_aux = np.concatenate([np.zeros(n, bool), np.ones(len(aux_origin), bool)])
    sel = np.flatnonzero(keep)
    src, dst, disp, sh, ck, dist = ci[sel], dst[sel], disp[sel], sh[sel], ck[sel], dist[sel]
    order = np.lexsort((ck, dst, sh[:, 2], sh[:, 1], sh[:, 0], dist, src))
    return NeighborGraph(
        features=feats[origin] if len(origin) else feats,
        pos=all_pos,
        is_aux=is_aux,
        origin=origin,
        src=src[order].astype(np.int64),
        dst=dst[order].astype(np.int64),
        disp=disp[order],
        shift=sh[order].astype(np.int64),
        symop=ck[order].astype(np.int64),
        cutoff=float(cutoff),
    )


def build_cutoff_graph(
    positions,
    cell: UnitCell,
    symops=None,
    cutoff: float = DEFAULT_CUTOFF,
    include_symmetry: bool = False,
    features=None,
    aux_radius: float | None = None,
) -> NeighborGraph:
    """Neighbour graph by lattice-translation enumeration over the cutoff-padded cell bound.

    With ``include_symmetry`` every distinct non-identity copy of an input point
    lying within ``aux_radius`` (default: ``cutoff``) of some input point becomes an
    auxiliary node linked to all centres within ``cutoff``.
    """
    if not cutoff > 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    frac = np.asarray(positions, dtype=float).reshape(-1, 3)
    symops = tuple(symops) if symops else (SymmetryOp.identity(),)
    aux_radius = cutoff if aux_radius is None else min(aux_radius, cutoff)
    feats = _features(features, len(frac))
    c_frac, c_site, c_op, ident = _symmetry_copies(frac, symops, include_symmetry)
    if len(frac) == 0:
        ci = cm = np.zeros(0, dtype=np.int64)
        sh, disp = np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3))
    else:
        ci, cm, sh, disp, _ = kernels.lattice_neighbors(
            np.ascontiguousarray(frac), np.ascontiguousarray(c_frac), np.ascontiguousarray(cell.matrix),
            np.ascontiguousarray(cell.heights), float(cutoff), MIN_DIST,
        )
    cj, ck = c_site[cm], c_op[cm]
    return _assemble(frac, cell, feats, ci, cj, ck, sh, disp, ck != ident, aux_radius, cutoff)


def brute_force_neighbors(
    positions,
    cell: UnitCell,
    symops=None,
    cutoff: float = DEFAULT_CUTOFF,
    include_symmetry: bool = False,
    features=None,
    aux_radius: float | None = None,
) -> NeighborGraph:
    """Reference builder: materialise every image in a ``(2R+1)^3`` supercell, then test all pairs."""
    if not cutoff > 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    frac = np.asarray(positions, dtype=float).reshape(-1, 3)
    symops = tuple(symops) if symops else (SymmetryOp.identity(),)
    aux_radius = cutoff if aux_radius is None else min(aux_radius, cutoff)
    feats = _features(features, len(frac))
    ident = _identity_index(symops)
    R = math.ceil(cutoff / float(np.min(cell.heights))) + 1
    # distinct copies per site, tested with an explicit per-pair loop
    images = []  # (site, op, frac)
    for j in range(len(frac)):
        mine = [frac[j]]
        images.append((j, ident, frac[j]))
        if include_symmetry:
            for k, op in enumerate(symops):
                if k == ident:
                    continue
                p = np.array([sum(op.rotation[r][c] * frac[j][c] for c in range(3)) + float(op.translation[r]) for r in range(3)])
                dup = False
                for q in mine:
                    d = p - q
                    if np.max(np.abs(d - np.round(d))) < DEDUPE_TOL:
                        dup = True
                        break
                if not dup:
                    mine.append(p)
                    images.append((j, k, p))
    shifts = np.array(list(itertools.product(range(-R, R + 1), repeat=3)), dtype=int)
    sup_site, sup_op, sup_shift, sup_frac = [], [], [], []
    for j, k, p in images:
        for n in shifts:
            sup_site.append(j)
            sup_op.append(k)
            sup_shift.append(n)
            sup_frac.append(p + n)
    sup_cart = np.array(sup_frac).reshape(-1, 3) @ cell.matrix
    centers = frac @ cell.matrix
    ci, cj, ck, sh, dv = [], [], [], [], []
    for i in range(len(frac)):
        diff = sup_cart - centers[i]
        d = np.sqrt((diff**2).sum(axis=1))
        for m in np.flatnonzero((d <= cutoff) & (d >= MIN_DIST)):
            ci.append(i)
            cj.append(sup_site[m])
            ck.append(sup_op[m])
            sh.append(sup_shift[m])
            dv.append(diff[m])
    ci = np.array(ci, dtype=np.int64)
    cj = np.array(cj, dtype=np.int64)
    ck = np.array(ck, dtype=np.int64)
    sh = np.array(sh, dtype=np.int64).reshape(-1, 3)
    dv = np.array(dv, dtype=float).reshape(-1, 3)
    return _assemble(frac, cell, feats, ci, cj, ck, sh, dv, ck != ident, aux_radius, cutoff)
