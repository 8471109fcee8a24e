import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import REPRESENTATIVE, cell_for, group_ops
from peak2struct.cif_io import (
    CifLoop,
    CifParseError,
    HklParseError,
    IncompleteCifError,
    ReflectionSet,
    ResParseError,
    cif_float,
    cif_to_peaks,
    cif_to_structure,
    parse_cif,
    parse_hkl,
    parse_res,
    structure_to_cif,
    write_cif,
    write_hkl,
    write_res,
)
from peak2struct.lattice import CrystalStructure, Site, SymopParseError, UnitCell, is_group
from peak2struct.peaks import PeakCloud

COD_STYLE = """\
# a hand-written fixture in the layout used by COD entries
data_fixture
_journal_name_full 'Acta Cryst. E'
_chemical_formula_sum 'C4 H6 N O2'
_cell_length_a   7.1234(5)
_cell_length_b   9.876(1)
_cell_length_c   11.002(2)
_cell_angle_alpha 90
_cell_angle_beta  104.25(3)
_cell_angle_gamma 90
_symmetry_space_group_name_H-M 'P 21/c'
_publ_section_comment
;
Multi-line text with 'quotes' and _underscores_
spanning two lines.
;
loop_
 _space_group_symop_id
 _space_group_symop_operation_xyz
 1 'x, y, z'
 2 '-x, y+1/2, -z+1/2'
 3 '-x, -y, -z'
 4 'x, -y-1/2, z-1/2'
loop_
 _atom_site_label
 _atom_site_type_symbol
 _atom_site_fract_x
 _atom_site_fract_y
 _atom_site_fract_z
 _atom_site_U_iso_or_equiv
 _atom_site_occupancy
 C1 C 0.1000(3) 0.2000(2) 0.3000(2) 0.0312(5) 1
 N1 N 0.2500 0.1250 0.4000 0.0400 0.5
 O1 O 0.4 0.3 0.2 ? 1
 H1 H 0.15 0.25 0.35 0.05 1
loop_
 _atom_site_aniso_label
 _atom_site_aniso_U_11
 _atom_site_aniso_U_22
 C1 0.030(1) 0.032(1)
"""


def test_minimal_block():
    doc = parse_cif("data_x\n_cell_length_a 10.0\n")
    assert len(doc.blocks) == 1
    assert doc.blocks[0].name == "x"
    assert doc.blocks[0].tags["_cell_length_a"] == "10.0"


def test_cod_style_fixture():
    doc = parse_cif(COD_STYLE)
    b = doc["fixture"]
    assert len(b.find_loop("_space_group_symop_operation_xyz").rows) == 4
    assert b.get("_journal_name_full") == "Acta Cryst. E"
    assert "spanning two lines." in b.get("_publ_section_comment")
    aniso = b.find_loop("_atom_site_aniso_U_11")
    assert aniso.rows == [["C1", "0.030(1)", "0.032(1)"]]


def test_cif_to_structure_fixture():
    s = cif_to_structure(parse_cif(COD_STYLE))
    assert s.cell.a == pytest.approx(7.1234) and s.cell.beta == pytest.approx(104.25)
    assert len(s.symops) == 4 and is_group(s.symops)
    c1, n1, o1, h1 = s.sites
    assert (c1.label, c1.element, c1.frac, c1.occupancy) == ("C1", "C", (0.1, 0.2, 0.3), 1.0)
    assert c1.u_iso == pytest.approx(0.0312) and not c1.u_iso_defaulted
    assert n1.occupancy == 0.5
    assert o1.u_iso == 0.03 and o1.u_iso_defaulted
    assert h1.element == "H"


def test_single_site_defaults():
    text = """data_a
_cell_length_a 5
_cell_length_b 6
_cell_length_c 7
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
_symmetry_equiv_pos_as_xyz x,y,z
loop_
_atom_site_label
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
C1 C 0.1 0.2 0.3
"""
    s = cif_to_structure(parse_cif(text))
    (site,) = s.sites
    assert site.element == "C" and site.frac == (0.1, 0.2, 0.3) and site.occupancy == 1.0
    assert site.u_iso_defaulted


@pytest.mark.parametrize("tag", ["_cell_length_b", "_cell_angle_gamma"])
def test_missing_tag_named(tag):
    lines = [ln for ln in COD_STYLE.splitlines() if not ln.startswith(tag)]
    with pytest.raises(IncompleteCifError, match=tag):
        cif_to_structure(parse_cif("\n".join(lines)))


def test_missing_symops():
    text = COD_STYLE.replace("_space_group_symop_operation_xyz", "_space_group_symop_other")
    with pytest.raises(IncompleteCifError, match="symop|equiv"):
        cif_to_structure(parse_cif(text))


def test_bad_symop_names_string():
    text = COD_STYLE.replace("'-x, -y, -z'", "'-x, -y, -w'")
    with pytest.raises(SymopParseError, match="-w"):
        cif_to_structure(parse_cif(text))


def test_loop_row_mismatch_reports_line():
    text = "data_a\nloop_\n_a\n_b\n1 2\n3\n"
    with pytest.raises(CifParseError) as exc:
        parse_cif(text)
    assert exc.value.line == 6


def test_unterminated_text_field():
    with pytest.raises(CifParseError, match="unterminated"):
        parse_cif("data_a\n_t\n;\nnever closed\n")


def test_duplicate_block_names():
    with pytest.raises(CifParseError, match="duplicate"):
        parse_cif("data_a\n_x 1\ndata_a\n_y 2\n")


def test_su_suffix_stripped():
    assert cif_float("1.234(5)") == 1.234
    assert cif_float("-0.5") == -0.5
    with pytest.raises(ValueError):
        cif_float("?")


def test_semantic_round_trip_fixture():
    doc = parse_cif(COD_STYLE)
    again = parse_cif(write_cif(doc))
    assert again == doc


values = st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), min_size=0, max_size=12)


@given(st.lists(st.tuples(st.from_regex(r"_[a-z]{1,8}", fullmatch=True), values), min_size=1, max_size=6, unique_by=lambda t: t[0]),
       st.lists(st.lists(values, min_size=2, max_size=2), min_size=0, max_size=4))
def test_round_trip_random_documents(tags, rows):
    doc = parse_cif("data_r\n")
    block = doc.blocks[0]
    for t, v in tags:
        block.tags[t] = v
    if rows:
        block.loops.append(CifLoop(["_l_a", "_l_b"], rows))
    assert parse_cif(write_cif(doc)) == doc


def _structure(rng, number):
    cell = cell_for(number, rng)
    elements = ["C", "N", "O", "S", "Cl", "H"]
    sites = [
        Site(f"{el}{i}", el, tuple(rng.random(3)), float(rng.choice([1.0, 0.5, 0.25])), float(rng.uniform(0.01, 0.08)))
        for i, el in enumerate(rng.choice(elements, size=int(rng.integers(1, 9))))
    ]
    return CrystalStructure(cell, group_ops(number), sites, name=f"sg{number}")


@pytest.mark.parametrize("number", REPRESENTATIVE)
def test_structure_round_trip(number, rng):
    s = _structure(rng, number)
    back = cif_to_structure(parse_cif(write_cif(structure_to_cif(s))))
    assert back.cell.isclose(s.cell, 1e-9)
    assert back.symops == s.symops
    assert [x.element for x in back.sites] == [x.element for x in s.sites]
    assert [x.occupancy for x in back.sites] == [x.occupancy for x in s.sites]
    np.testing.assert_allclose(back.frac, s.frac, atol=1e-6)


def test_cif_text_is_bit_stable(rng):
    s = _structure(rng, 14)
    once = write_cif(structure_to_cif(s))
    twice = write_cif(structure_to_cif(cif_to_structure(parse_cif(once))))
    assert once == twice


def test_empty_structure_has_no_atom_loop():
    s = CrystalStructure(UnitCell(5, 6, 7))
    block = structure_to_cif(s).blocks[0]
    assert block.get("_cell_length_a") is not None
    assert block.find_loop("_atom_site_label") is None
    assert block.find_loop("_space_group_symop_operation_xyz") is not None
    assert cif_to_structure(parse_cif(write_cif(structure_to_cif(s)))).sites == ()


def test_cif_peaks_round_trip(rng):
    s = _structure(rng, 2)
    cloud = PeakCloud(rng.random((4, 3)), [3.0, 2.5, 1.25, 0.75], cell=s.cell)
    doc = parse_cif(write_cif(structure_to_cif(s.heavy(), cloud)))
    s2, c2 = cif_to_peaks(doc)
    np.testing.assert_allclose(c2.heights, cloud.heights)
    np.testing.assert_allclose(c2.frac, cloud.frac, atol=1e-6)
    assert len(cif_to_structure(doc).sites) == len(s.heavy().sites)


RES = """TITL test
CELL 0.71073 10 10 10 90 90 90
ZERR 4 0.001 0.001 0.001 0 0 0
LATT -1
SFAC C N O
UNIT 4 1 1
FVAR 1.0
C1    1  0.10000  0.20000  0.30000  11.00000  0.03000
N1    2  0.40000  0.50000  0.60000  11.00000  0.04000
Q1 1 0.1 0.2 0.3 11.0 0.05 3.21
Q2    1  0.70000  0.80000  0.90000  11.00000  0.05000   1.05
HKLF 4
END
"""


def test_parse_res_basic():
    s, cloud = parse_res(RES)
    assert s.cell.lengths == (10, 10, 10) and s.cell.angles == (90, 90, 90)
    assert s.wavelength == 0.71073
    assert len(s.symops) == 1
    assert [x.element for x in s.sites] == ["C", "N"]
    assert len(cloud) == 2
    np.testing.assert_allclose(cloud.frac[0], [0.1, 0.2, 0.3])
    assert cloud.heights.tolist() == [3.21, 1.05]
    assert cloud.names == ["Q1", "Q2"]


@pytest.mark.parametrize("latt,symm,expected", [(-1, [], 1), (1, [], 2), (-1, ["-x,y+1/2,-z+1/2"], 2),
                                                (1, ["-x,y+1/2,-z+1/2"], 4), (-7, ["-x,y,-z+1/2"], 4),
                                                (7, ["-x,y,-z+1/2"], 8), (2, [], 4), (-4, ["-x,-y,z"], 8)])
def test_res_operation_count(latt, symm, expected):
    text = RES.replace("LATT -1", f"LATT {latt}\n" + "".join(f"SYMM {t}\n" for t in symm))
    s, _ = parse_res(text)
    assert len(s.symops) == expected
    assert is_group(s.symops)


def test_res_errors():
    with pytest.raises(ResParseError, match="SFAC"):
        parse_res(RES.replace("N1    2", "N1    7"))
    with pytest.raises(ResParseError, match="CELL"):
        parse_res(RES.replace("CELL 0.71073 10 10 10 90 90 90\n", ""))


def test_res_round_trip(rng):
    s = _structure(rng, 14).heavy()
    cloud = PeakCloud(rng.random((3, 3)), [2.0, 1.5, 0.5])
    s2, c2 = parse_res(write_res(s, cloud))
    assert s2.symops == s.symops
    np.testing.assert_allclose(s2.frac, s.frac, atol=1e-6)
    np.testing.assert_allclose(c2.heights, cloud.heights, atol=1e-4)


def test_hkl_record():
    r = parse_hkl("   1   0   0  100.25    2.50\n   0   0   0    0.00    0.00\n")
    assert r.hkl.tolist() == [[1, 0, 0]]
    assert r.fo2.tolist() == [100.25] and r.sigma.tolist() == [2.5]


def test_hkl_terminator_only():
    assert len(parse_hkl("   0   0   0    0.00    0.00\n")) == 0
    assert len(parse_hkl("0 0 0 0.00 0.00\n")) == 0


def test_hkl_trailing_garbage():
    text = (
        "   1   2   3   45.67    1.23\n"
        "  -1  -2  -3   45.60    1.20   1\n"
        "  10 -11  12    0.50    0.60\n"
        "   0   0   0    0.00    0.00\n"
        "this is not a reflection\n  99  99  99 1.0 1.0\n"
    )
    r = parse_hkl(text)
    assert r.hkl.tolist() == [[1, 2, 3], [-1, -2, -3], [10, -11, 12]]
    assert r.fo2.tolist() == [45.67, 45.6, 0.5]
    assert r.sigma.tolist() == [1.23, 1.2, 0.6]


def test_hkl_fixed_width_without_spaces():
    # fields touch each other at full width
    r = parse_hkl("-100 200-300-1234.5612345.67\n   0   0   0    0.00    0.00\n")
    assert r.hkl.tolist() == [[-100, 200, -300]]
    assert r.fo2.tolist() == [-1234.56] and r.sigma.tolist() == [12345.67]


def test_hkl_bad_field_names_record():
    with pytest.raises(HklParseError, match="record 2"):
        parse_hkl("   1   0   0  100.25    2.50\n   1   x   0  100.25    2.50\n")


def test_hkl_write_is_fixed_width(rng):
    hkl = rng.integers(-20, 21, size=(30, 3))
    hkl = hkl[np.any(hkl != 0, axis=1)]
    refl = ReflectionSet(hkl, np.round(rng.uniform(0, 5000, len(hkl)), 2), np.round(rng.uniform(0.1, 50, len(hkl)), 2))
    text = write_hkl(refl)
    assert all(len(line) == 28 for line in text.splitlines())
    back = parse_hkl(text)
    assert back.hkl.tolist() == refl.hkl.tolist()
    assert back.fo2.tolist() == refl.fo2.tolist() and back.sigma.tolist() == refl.sigma.tolist()
    assert write_hkl(back) == text


def test_reflection_set_invariants():
    with pytest.raises(ValueError):
        ReflectionSet([[1, 0, 0]], [1.0], [-1.0])
    with pytest.raises(ValueError):
        ReflectionSet([[0, 0, 0]], [1.0], [1.0])
