"""Readers and writers for CIF (subset), SHELX ``.res``/``.ins`` and HKLF-4 ``.hkl`` files."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .elements import UnknownElementError, normalize_symbol
from .lattice import (
    CrystalStructure,
    Site,
    SymmetryOp,
    SymopParseError,
    UnitCell,
    expand_latt,
    parse_symop_xyz,
)
from .peaks import PeakCloud

DEFAULT_U_ISO = 0.03


class CifParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class IncompleteCifError(KeyError):
    def __init__(self, tag: str):
        self.tag = tag
        super().__init__(f"incomplete CIF: missing {tag}")

    def __str__(self):
        return self.args[0]


class ResParseError(ValueError):
    pass


class HklParseError(ValueError):
    pass


# --------------------------------------------------------------------------
# CIF


@dataclass
class CifLoop:
    tags: list[str]
    rows: list[list[str]] = field(default_factory=list)

    def column(self, tag: str) -> list[str]:
        return [row[self.tags.index(tag)] for row in self.rows]


@dataclass
class CifBlock:
    name: str
    tags: dict[str, str] = field(default_factory=dict)
    loops: list[CifLoop] = field(default_factory=list)

    def find_loop(self, tag: str) -> CifLoop | None:
        tag = tag.lower()
        for loop in self.loops:
            if tag in (t.lower() for t in loop.tags):
                return loop
        return None

    def get(self, tag: str, default=None):
        low = tag.lower()
        for k, v in self.tags.items():
            if k.lower() == low:
                return v
        return default


@dataclass
class CifDocument:
    blocks: list[CifBlock] = field(default_factory=list)

    def __getitem__(self, name: str) -> CifBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)


def _tokenize(text: str):
    """Yield ``(token, line_number, quoted)``."""
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        lineno = i + 1
        if line.startswith(";"):
            buf = [line[1:]]
            i += 1
            while i < len(lines) and not lines[i].startswith(";"):
                buf.append(lines[i])
                i += 1
            if i >= len(lines):
                raise CifParseError("unterminated multi-line text field", lineno)
            value = "\n".join(buf)
            if value.startswith("\n"):
                value = value[1:]
            elif buf[0].strip() == "":
                value = "\n".join(buf[1:])
            yield value, lineno, True
            i += 1
            continue
        j, n = 0, len(line)
        while j < n:
            ch = line[j]
            if ch.isspace():
                j += 1
            elif ch == "#":
                break
            elif ch in "'\"":
                k = j + 1
                while True:
                    k = line.find(ch, k)
                    if k < 0:
                        raise CifParseError(f"unterminated quoted string {line[j:]!r}", lineno)
                    if k + 1 >= n or line[k + 1].isspace():
                        break
                    k += 1
                yield line[j + 1 : k], lineno, True
                j = k + 1
            else:
                k = j
                while k < n and not line[k].isspace():
                    k += 1
                yield line[j:k], lineno, False
                j = k
        i += 1


def parse_cif(text: str) -> CifDocument:
    doc = CifDocument()
    block: CifBlock | None = None
    tokens = list(_tokenize(text))
    pos = 0
    pending_tag: tuple[str, int] | None = None
    while pos < len(tokens):
        tok, lineno, quoted = tokens[pos]
        low = tok.lower()
        if pending_tag is not None:
            if not quoted and (tok.startswith("_") or low == "loop_" or low.startswith("data_")):
                raise CifParseError(f"tag {pending_tag[0]} has no value", pending_tag[1])
            block.tags[pending_tag[0]] = tok
            pending_tag = None
            pos += 1
            continue
        if not quoted and low.startswith("data_"):
            name = tok[5:]
            if any(b.name == name for b in doc.blocks):
                raise CifParseError(f"duplicate block name {name!r}", lineno)
            block = CifBlock(name)
            doc.blocks.append(block)
            pos += 1
            continue
        if block is None:
            raise CifParseError(f"content before first data_ block: {tok!r}", lineno)
        if not quoted and low == "loop_":
            pos += 1
            loop_line = lineno
            tags = []
            while pos < len(tokens) and not tokens[pos][2] and tokens[pos][0].startswith("_"):
                tags.append(tokens[pos][0])
                pos += 1
            if not tags:
                raise CifParseError("loop_ without tags", loop_line)
            values = []
            last_line = loop_line
            while pos < len(tokens):
                t, ln, q = tokens[pos]
                tl = t.lower()
                if not q and (t.startswith("_") or tl == "loop_" or tl.startswith("data_")):
                    break
                values.append(t)
                last_line = ln
                pos += 1
            if len(values) % len(tags):
                raise CifParseError(
                    f"loop with {len(tags)} tags has {len(values)} values (row length mismatch)", last_line
                )
            rows = [values[r : r + len(tags)] for r in range(0, len(values), len(tags))]
            block.loops.append(CifLoop(tags, rows))
            continue
        if not quoted and tok.startswith("_"):
            pending_tag = (tok, lineno)
            pos += 1
            continue
        raise CifParseError(f"unexpected value {tok!r}", lineno)
    if pending_tag is not None:
        raise CifParseError(f"tag {pending_tag[0]} has no value", pending_tag[1])
    return doc


_SPECIAL_START = set("_#$'\"[];")
_RESERVED = ("data_", "loop_", "save_", "global_", "stop_")


def _format_value(v: str) -> str:
    if "\n" in v:
        return f"\n;\n{v}\n;"
    if v == "":
        return "''"
    needs = any(c.isspace() for c in v) or v[0] in _SPECIAL_START or v.lower().startswith(_RESERVED)
    if not needs:
        return v
    if "' " not in v and not v.endswith("'"):
        return f"'{v}'"
    if '" ' not in v and not v.endswith('"'):
        return f'"{v}"'
    return f"\n;\n{v}\n;"


def write_cif(doc: CifDocument) -> str:
    out = []
    for block in doc.blocks:
        out.append(f"data_{block.name}")
        if block.tags:
            width = max(len(t) for t in block.tags)
            for tag, value in block.tags.items():
                out.append(f"{tag:<{width}} {_format_value(value)}")
        for loop in block.loops:
            out.append("")
            out.append("loop_")
            out.extend(f" {t}" for t in loop.tags)
            for row in loop.rows:
                out.append(" " + " ".join(_format_value(v) for v in row))
        out.append("")
    return "\n".join(out)


_SU_RE = re.compile(r"\(\d+\)$")


def cif_float(value: str) -> float:
    """Numeric CIF value with the standard-uncertainty suffix stripped."""
    v = _SU_RE.sub("", value.strip())
    if v in ("?", "."):
        raise ValueError(f"unknown numeric value {value!r}")
    return float(v)


_CELL_TAGS = (
    "_cell_length_a",
    "_cell_length_b",
    "_cell_length_c",
    "_cell_angle_alpha",
    "_cell_angle_beta",
    "_cell_angle_gamma",
)
_SYMOP_TAGS = ("_space_group_symop_operation_xyz", "_symmetry_equiv_pos_as_xyz")
_Q_LABEL = re.compile(r"^Q\d+$", re.IGNORECASE)


def _block_of(doc: CifDocument | CifBlock) -> CifBlock:
    if isinstance(doc, CifBlock):
        return doc
    if not doc.blocks:
        raise IncompleteCifError("data_ block")
    return doc.blocks[0]


def _cell_and_symops(block: CifBlock) -> tuple[UnitCell, list[SymmetryOp]]:
    vals = []
    for tag in _CELL_TAGS:
        v = block.get(tag)
        if v is None:
            raise IncompleteCifError(tag)
        vals.append(cif_float(v))
    cell = UnitCell(*vals)
    strings = None
    for tag in _SYMOP_TAGS:
        loop = block.find_loop(tag)
        if loop is not None:
            idx = [t.lower() for t in loop.tags].index(tag)
            strings = [row[idx] for row in loop.rows]
            break
        single = block.get(tag)
        if single is not None:
            strings = [single]
            break
    if strings is None:
        raise IncompleteCifError(" or ".join(_SYMOP_TAGS))
    ops = []
    for s in strings:
        try:
            ops.append(parse_symop_xyz(s))
        except SymopParseError as exc:
            raise SymopParseError(f"cannot interpret symmetry operation {s!r}: {exc}") from None
    return cell, ops


def _site_rows(block: CifBlock):
    loop = block.find_loop("_atom_site_fract_x")
    if loop is None:
        return None, []
    low = [t.lower() for t in loop.tags]
    for tag in ("_atom_site_label", "_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z"):
        if tag not in low:
            raise IncompleteCifError(tag)
    return low, loop.rows


def cif_to_structure(doc: CifDocument | CifBlock, include_peaks: bool = False) -> CrystalStructure:
    """Build a structure from the first block (or the given block).

    Rows labelled ``Qn`` or typed ``Q`` are peak records and are skipped unless
    ``include_peaks`` is set.
    """
    block = _block_of(doc)
    cell, ops = _cell_and_symops(block)
    low, rows = _site_rows(block)
    sites = []
    for row in rows:
        rec = dict(zip(low, row))
        label = rec["_atom_site_label"]
        type_sym = rec.get("_atom_site_type_symbol", label)
        if _is_peak(label, type_sym) and not include_peaks:
            continue
        try:
            element = normalize_symbol(type_sym)
        except UnknownElementError:
            raise IncompleteCifError(f"_atom_site_type_symbol (unrecognised {type_sym!r})") from None
        frac = tuple(cif_float(rec[f"_atom_site_fract_{a}"]) for a in "xyz")
        occ_raw = rec.get("_atom_site_occupancy", "?")
        occ = 1.0 if occ_raw in ("?", ".") else cif_float(occ_raw)
        u_raw = rec.get("_atom_site_u_iso_or_equiv", "?")
        b_raw = rec.get("_atom_site_b_iso_or_equiv", "?")
        defaulted = False
        if u_raw not in ("?", "."):
            u = cif_float(u_raw)
        elif b_raw not in ("?", "."):
            u = cif_float(b_raw) / (8 * math.pi**2)
        else:
            u, defaulted = DEFAULT_U_ISO, True
        sites.append(Site(label, element, frac, occ, u, defaulted))
    wl = block.get("_diffrn_radiation_wavelength")
    return CrystalStructure(
        cell=cell,
        symops=tuple(ops),
        sites=tuple(sites),
        name=block.name,
        wavelength=cif_float(wl) if wl not in (None, "?", ".") else None,
    )


def _is_peak(label: str, type_sym: str) -> bool:
    return type_sym.upper() == "Q" or bool(_Q_LABEL.match(label))


def cif_to_peaks(doc: CifDocument | CifBlock) -> tuple[CrystalStructure, PeakCloud]:
    """Peak list encoded in a CIF atom-site loop (``Qn`` labels, ``_atom_site_peak_height``)."""
    block = _block_of(doc)
    cell, ops = _cell_and_symops(block)
    low, rows = _site_rows(block)
    if "_atom_site_peak_height" not in (low or []):
        raise IncompleteCifError("_atom_site_peak_height")
    pos, heights, names = [], [], []
    for row in rows:
        rec = dict(zip(low, row))
        if not _is_peak(rec["_atom_site_label"], rec.get("_atom_site_type_symbol", "")):
            continue
        pos.append([cif_float(rec[f"_atom_site_fract_{a}"]) for a in "xyz"])
        heights.append(cif_float(rec["_atom_site_peak_height"]))
        names.append(rec["_atom_site_label"])
    s = cif_to_structure(block)
    cloud = PeakCloud(np.array(pos).reshape(-1, 3), np.array(heights), "measured", block.name, names, cell, tuple(ops))
    return s, cloud


def _num(x: float) -> str:
    return repr(float(x))


def structure_to_cif(s: CrystalStructure, peaks: PeakCloud | None = None) -> CifDocument:
    block = CifBlock(s.name or "structure")
    for tag, v in zip(_CELL_TAGS, s.cell.lengths + s.cell.angles):
        block.tags[tag] = _num(v)
    if s.wavelength is not None:
        block.tags["_diffrn_radiation_wavelength"] = _num(s.wavelength)
    block.loops.append(
        CifLoop(
            ["_space_group_symop_id", "_space_group_symop_operation_xyz"],
            [[str(i + 1), op.to_xyz()] for i, op in enumerate(s.symops)],
        )
    )
    if s.sites or peaks is not None:
        tags = [
            "_atom_site_label",
            "_atom_site_type_symbol",
            "_atom_site_fract_x",
            "_atom_site_fract_y",
            "_atom_site_fract_z",
            "_atom_site_occupancy",
            "_atom_site_U_iso_or_equiv",
        ]
        rows = [
            [site.label, site.element, *map(_num, site.frac), _num(site.occupancy), _num(site.u_iso)]
            for site in s.sites
        ]
        if peaks is not None:
            tags.append("_atom_site_peak_height")
            rows = [r + ["."] for r in rows]
            for name, p, h in zip(peaks.names, peaks.frac, peaks.heights):
                rows.append([name, "Q", *map(_num, p), "1.0", ".", _num(h)])
        block.loops.append(CifLoop(tags, rows))
    return CifDocument([block])


# --------------------------------------------------------------------------
# SHELX .res / .ins

SHELX_KEYWORDS = frozenset(
    """TITL CELL ZERR LATT SYMM SFAC DISP UNIT LAUE REM MORE TIME END HKLF OMIT SHEL BASF TWIN EXTI SWAT
    HOPE MERG SPEC RESI MOVE ANIS AFIX PART FREE DFIX DANG BUMP SAME SADI CHIV FLAT DELU SIMU DEFS ISOR
    NCSY SUMP L.S. CGLS BLOC DAMP STIR WGHT FVAR BOND CONF MPLA RTAB HTAB LIST ACTA SIZE TEMP WPDB FMAP
    GRID PLAN MOLE HFIX EQIV CONN BIND ABIN ANSC ANSR XNPD NEUT TREF PATT ESEL EGEN FRAG FEND EXYZ EADP
    RIGU SIMU STIR PRIG LONE""".split()
)


def _shelx_value(v: float, fvar: list[float]) -> float:
    """Decode SHELX fixed/free-variable encoding (10*m + p)."""
    m = int(abs(v) // 10)
    p = abs(v) - 10 * m
    if m <= 1:
        return p if m == 1 else v
    fv = fvar[m - 1] if m - 1 < len(fvar) else 1.0
    return p * fv if v > 0 else p * (1.0 - fv)


def _logical_lines(text: str) -> list[str]:
    out, buf = [], ""
    for raw in text.splitlines():
        line = raw.split("!", 1)[0].rstrip()
        if buf:
            line = buf + " " + line.strip()
            buf = ""
        if line.endswith("=") and not line.upper().startswith(("REM", "TITL")):
            buf = line[:-1]
            continue
        out.append(line)
    if buf:
        out.append(buf)
    return out


def parse_res(text: str) -> tuple[CrystalStructure, PeakCloud]:
    cell = None
    wavelength = None
    latt = 1
    symm: list[SymmetryOp] = []
    sfac: list[str] = []
    fvar: list[float] = []
    title = "res"
    sites: list[Site] = []
    peaks, heights, names = [], [], []
    last_u = DEFAULT_U_ISO
    for lineno, line in enumerate(_logical_lines(text), 1):
        toks = line.split()
        if not toks:
            continue
        key = toks[0].upper()
        if key in ("REM",) or key.startswith("REM"):
            continue
        if key == "TITL":
            title = " ".join(toks[1:]) or title
            continue
        if key == "CELL":
            try:
                vals = [float(x) for x in toks[1:8]]
                wavelength = vals[0]
                cell = UnitCell(*vals[1:7])
            except (ValueError, TypeError) as exc:
                raise ResParseError(f"line {lineno}: bad CELL card: {exc}") from None
            continue
        if key == "LATT":
            latt = int(toks[1])
            continue
        if key == "SYMM":
            symm.append(parse_symop_xyz(line.split(None, 1)[1]))
            continue
        if key == "SFAC":
            rest = toks[1:]
            if len(rest) > 1 and _is_number(rest[1]):
                sfac.append(normalize_symbol(rest[0]))
            else:
                sfac.extend(normalize_symbol(t) for t in rest)
            continue
        if key == "FVAR":
            fvar.extend(float(x) for x in toks[1:])
            continue
        if key in SHELX_KEYWORDS:
            continue
        if len(toks) < 5 or not all(_is_number(t) for t in toks[1:5]):
            continue
        name = toks[0]
        nums = [float(t) for t in toks[1:]]
        idx = int(nums[0])
        xyz = [_shelx_value(v, fvar) for v in nums[1:4]]
        if _Q_LABEL.match(name):
            peaks.append(xyz)
            heights.append(nums[-1])
            names.append(name)
            continue
        if not 1 <= idx <= len(sfac):
            raise ResParseError(f"line {lineno}: SFAC index {idx} out of range for atom {name} ({len(sfac)} SFAC types)")
        occ = _shelx_value(nums[4], fvar) if len(nums) > 4 else 1.0
        if len(nums) >= 11:
            u = float(np.mean(nums[5:8]))
        elif len(nums) > 5:
            u = nums[5]
            if u < 0:
                u = abs(u) * last_u
        else:
            u = DEFAULT_U_ISO
        element = sfac[idx - 1]
        if element != "H":
            last_u = u
        sites.append(Site(name, element, tuple(xyz), occ if occ > 0 else 1.0, u, len(nums) <= 5))
    if cell is None:
        raise ResParseError("missing CELL card")
    s = CrystalStructure(cell, tuple(expand_latt(symm, latt)), tuple(sites), title.split()[0], wavelength)
    cloud = PeakCloud(
        np.array(peaks, dtype=float).reshape(-1, 3), np.array(heights, dtype=float), "measured", s.name, names, cell, s.symops
    )
    return s, cloud


def _is_number(t: str) -> bool:
    try:
        float(t)
    except ValueError:
        return False
    return True


# --------------------------------------------------------------------------
# HKLF-4


@dataclass
class ReflectionSet:
    hkl: np.ndarray
    fo2: np.ndarray
    sigma: np.ndarray
    wavelength: float | None = None

    def __post_init__(self):
        self.hkl = np.asarray(self.hkl, dtype=int).reshape(-1, 3)
        self.fo2 = np.asarray(self.fo2, dtype=float).reshape(-1)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(-1)
        if not (len(self.hkl) == len(self.fo2) == len(self.sigma)):
            raise ValueError("hkl, Fo2 and sigma lengths differ")
        if np.any(self.sigma < 0):
            raise ValueError("negative sigma in reflection set")
        if len(self.hkl) and np.any(np.all(self.hkl == 0, axis=1)):
            raise ValueError("(0,0,0) is not a reflection")

    def __len__(self):
        return len(self.hkl)


_HKL_FIELDS = ((0, 4, int), (4, 8, int), (8, 12, int), (12, 20, float), (20, 28, float))


def _is_terminator(line: str) -> bool:
    # hand-edited files often write the 0 0 0 record without the fixed widths
    toks = line.split()[:3]
    try:
        return len(toks) == 3 and all(int(t) == 0 for t in toks)
    except ValueError:
        return False


def parse_hkl(text: str, wavelength: float | None = None) -> ReflectionSet:
    hkl, fo2, sig = [], [], []
    record = 0
    for line in text.splitlines():
        if not line.strip():
            continue
        record += 1
        if _is_terminator(line):
            break
        vals = []
        for start, stop, kind in _HKL_FIELDS:
            chunk = line[start:stop].strip()
            try:
                vals.append(kind(chunk))
            except ValueError:
                raise HklParseError(f"record {record}: field {line[start:stop]!r} is not numeric") from None
            if len(vals) == 3 and vals == [0, 0, 0]:
                break
        if vals[:3] == [0, 0, 0]:
            break
        hkl.append(vals[:3])
        fo2.append(vals[3])
        sig.append(vals[4])
    return ReflectionSet(np.array(hkl, dtype=int).reshape(-1, 3), fo2, sig, wavelength)


def write_hkl(refl: ReflectionSet) -> str:
    lines = [
        f"{h:4d}{k:4d}{l:4d}{f:8.2f}{s:8.2f}" for (h, k, l), f, s in zip(refl.hkl.tolist(), refl.fo2, refl.sigma)
    ]
    lines.append(f"{0:4d}{0:4d}{0:4d}{0.0:8.2f}{0.0:8.2f}")
    return "\n".join(lines) + "\n"


def write_res(s: CrystalStructure, peaks: PeakCloud | None = None, wavelength: float = 0.71073) -> str:
    """Minimal ``.res`` writer: explicit SYMM list with ``LATT -1``."""
    elements: list[str] = []
    for site in s.sites:
        if site.element not in elements:
            elements.append(site.element)
    if not elements:
        elements = ["C"]
    c = s.cell
    wl = s.wavelength if s.wavelength is not None else wavelength
    out = [
        f"TITL {s.name}",
        f"CELL {wl:.5f} {c.a:.6f} {c.b:.6f} {c.c:.6f} {c.alpha:.6f} {c.beta:.6f} {c.gamma:.6f}",
        "LATT -1",
    ]
    out += [f"SYMM {op.to_xyz()}" for op in s.symops if not op.is_identity]
    out.append("SFAC " + " ".join(elements))
    for site in s.sites:
        x, y, z = site.frac
        out.append(
            f"{site.label:<6}{elements.index(site.element) + 1:3d} {x:10.6f} {y:10.6f} {z:10.6f} "
            f"{10 + site.occupancy:9.5f} {site.u_iso:8.5f}"
        )
    if peaks is not None:
        for name, p, h in zip(peaks.names, peaks.frac, peaks.heights):
            out.append(f"{name:<6}  1 {p[0]:10.6f} {p[1]:10.6f} {p[2]:10.6f} 11.00000  0.05000 {h:8.4f}")
    out += ["HKLF 4", "END", ""]
    return "\n".join(out)

