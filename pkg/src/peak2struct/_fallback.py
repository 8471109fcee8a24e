"""Pure numpy versions of the compiled kernels in ``_kernels.pyx`` (same signatures)."""

from __future__ import annotations

import numpy as np


def lattice_neighbors(centers, copies, cell, heights, cutoff, min_dist=1e-8):
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    copies = np.asarray(copies, dtype=float).reshape(-1, 3)
    cell = np.asarray(cell, dtype=float)
    ext = cutoff / np.asarray(heights, dtype=float)
    ci, mi, sh, dv = [], [], [], []
    for i in range(len(centers)):
        d = copies - centers[i]
        lo = np.ceil(-ext - d).astype(int).min(axis=0)
        hi = np.floor(ext - d).astype(int).max(axis=0)
        grid = np.stack(np.meshgrid(*(np.arange(lo[k], hi[k] + 1) for k in range(3)), indexing="ij"), -1)
        grid = grid.reshape(-1, 3)
        disp = (d[:, None, :] + grid[None, :, :]) @ cell
        r2 = (disp * disp).sum(axis=-1)
        jj, gg = np.nonzero((r2 <= cutoff * cutoff) & (r2 >= min_dist * min_dist))
        if len(jj):
            ci.append(np.full(len(jj), i))
            mi.append(jj)
            sh.append(grid[gg])
            dv.append(disp[jj, gg])
    if not ci:
        return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)), np.zeros(0))
    disp = np.concatenate(dv)
    return (
        np.concatenate(ci).astype(np.int64),
        np.concatenate(mi).astype(np.int64),
        np.concatenate(sh).astype(np.int64),
        disp,
        np.sqrt((disp * disp).sum(axis=1)),
    )


def structure_factor_sum(hkl, stol2, xyz, types, occ, u_iso, ftab, chunk=2048):
    hkl = np.asarray(hkl, dtype=float)
    xyz = np.asarray(xyz, dtype=float)
    types = np.asarray(types, dtype=np.int64)
    out = np.zeros(len(hkl), dtype=complex)
    for start in range(0, len(hkl), chunk):
        sl = slice(start, start + chunk)
        phase = 2.0 * np.pi * (hkl[sl] @ xyz.T)
        w = occ[None, :] * ftab[types][:, sl].T * np.exp(-8.0 * np.pi**2 * np.outer(stol2[sl], u_iso))
        out[sl] = (w * np.exp(1j * phase)).sum(axis=1)
    return out
