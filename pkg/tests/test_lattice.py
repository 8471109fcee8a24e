import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import REPRESENTATIVE, cell_for, group_ops, space_groups
from peak2struct.lattice import (
    CrystalStructure,
    Site,
    SymmetryOp,
    SymopParseError,
    UnitCell,
    apply_symop,
    cart_to_frac,
    closure_violations,
    d_spacing,
    expand_equivalents,
    expand_latt,
    format_symop_xyz,
    frac_to_cart,
    is_group,
    parse_symop_xyz,
)

cells = st.builds(
    UnitCell,
    st.floats(2.0, 30.0), st.floats(2.0, 30.0), st.floats(2.0, 30.0),
    st.floats(60.0, 120.0), st.floats(60.0, 120.0), st.floats(60.0, 120.0),
)
points = st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3)


def _valid(a, b, c, al, be, ga):
    try:
        return UnitCell(a, b, c, al, be, ga)
    except ValueError:
        return None


def test_cubic_frac_to_cart():
    np.testing.assert_allclose(frac_to_cart(UnitCell(10, 10, 10), [0.5, 0.5, 0.5]), [5, 5, 5], atol=1e-12)


def test_origin_maps_to_origin():
    cell = UnitCell(6, 7, 8, 80, 95, 110)
    assert np.all(frac_to_cart(cell, [0, 0, 0]) == 0)


def test_orientation_convention():
    m = UnitCell(6, 7, 8, 80, 95, 110).matrix
    assert m[0, 1] == 0 and m[0, 2] == 0 and m[1, 2] == 0
    np.testing.assert_allclose(np.linalg.norm(m, axis=1), [6, 7, 8])


def test_triclinic_inverse(rng):
    cell = UnitCell(6, 7, 8, 80, 95, 110)
    p = rng.uniform(-1, 2, size=(100, 3))
    np.testing.assert_allclose(cart_to_frac(cell, frac_to_cart(cell, p)), p, atol=1e-10)


@given(st.tuples(*(st.floats(2.0, 30.0),) * 3, *(st.floats(50.0, 130.0),) * 3), points)
def test_frac_cart_inverse_property(params, p):
    cell = _valid(*params)
    if cell is None:
        return
    q = cart_to_frac(cell, frac_to_cart(cell, p))
    np.testing.assert_allclose(q, p, atol=1e-10)


def test_cell_angles_match_matrix():
    cell = UnitCell(6, 7, 8, 80, 95, 110)
    a, b, c = cell.matrix
    ang = lambda u, v: math.degrees(math.acos(u @ v / np.linalg.norm(u) / np.linalg.norm(v)))
    assert ang(b, c) == pytest.approx(80)
    assert ang(a, c) == pytest.approx(95)
    assert ang(a, b) == pytest.approx(110)


@pytest.mark.parametrize("bad", [(0, 1, 1, 90, 90, 90), (1, 1, 1, 0, 90, 90), (1, 1, 1, 90, 90, 180),
                                 (1, 1, 1, 120, 120, 120)])
def test_invalid_cells(bad):
    with pytest.raises(ValueError):
        UnitCell(*bad)


def test_apply_identity():
    np.testing.assert_allclose(apply_symop(SymmetryOp.identity(), [0.3, 0.4, 0.5]), [0.3, 0.4, 0.5])


def test_apply_inversion_wraps():
    np.testing.assert_allclose(apply_symop(parse_symop_xyz("-x,-y,-z"), [0.25, 0.25, 0.25]), [0.75] * 3)


def test_apply_screw():
    np.testing.assert_allclose(apply_symop(parse_symop_xyz("-x, y+1/2, -z+1/2"), [0.1, 0.2, 0.3]), [0.9, 0.7, 0.2])


def test_parse_identity():
    assert parse_symop_xyz("x,y,z") == SymmetryOp.identity()


def test_parse_hexagonal():
    op = parse_symop_xyz("-y,x-y,z+2/3")
    assert op.R.tolist() == [[0, -1, 0], [1, -1, 0], [0, 0, 1]]
    assert op.translation == (0, 0, Fraction(2, 3))


@pytest.mark.parametrize("a,b", [("y+1/2,x,z", "1/2+y,x,z"), ("-x+1/2,-y,z", "1/2-x,-y,z"),
                                 ("X, Y, Z", "x,y,z"), ("x,y,z+1", "x,y,z"), ("x,y,z-1/4", "x,y,z+3/4")])
def test_parse_equivalent_spellings(a, b):
    assert parse_symop_xyz(a) == parse_symop_xyz(b)


@pytest.mark.parametrize("bad", ["x,y", "x,y,q", "x,y,z/", "2x,y,z", "x,y,0", "x,y,1/0"])
def test_parse_errors(bad):
    with pytest.raises(SymopParseError):
        parse_symop_xyz(bad)


def test_parse_error_names_token():
    with pytest.raises(SymopParseError, match="q"):
        parse_symop_xyz("x,y,q")


def test_symop_round_trip_all_groups():
    n = 0
    for _, _, ops in space_groups():
        for t in ops:
            op = parse_symop_xyz(t)
            assert parse_symop_xyz(format_symop_xyz(op)) == op
            assert op.determinant in (1, -1)
            n += 1
    assert n > 4000


@pytest.mark.parametrize("number", REPRESENTATIVE)
def test_group_axioms(number):
    ops = group_ops(number)
    assert is_group(ops)
    assert not closure_violations(ops)


def test_missing_inverse_is_not_group():
    ops = [SymmetryOp.identity(), parse_symop_xyz("y,-x,z")]
    assert not is_group(ops)
    assert closure_violations(ops)


@pytest.mark.parametrize("number", REPRESENTATIVE)
def test_orbit_divides_group_order(number, rng):
    ops = group_ops(number)
    cell = cell_for(number, rng)
    sites = [Site("A", "C", tuple(rng.random(3))), Site("B", "C", (0, 0, 0)), Site("C", "C", (0.5, 0.5, 0.5))]
    s = CrystalStructure(cell, ops, sites)
    out = expand_equivalents(s)
    for i in range(3):
        orbit = [p for k, _, p in out if k == i]
        assert len(ops) % len(orbit) == 0
        d = np.array(orbit)[:, None] - np.array(orbit)[None]
        d = np.abs(d - np.rint(d)).max(-1) + np.eye(len(orbit))
        assert d.min() > 1e-4
    assert len([1 for k, _, _ in out if k == 0]) == len(ops)  # general position


def test_expand_examples():
    cell = UnitCell(5, 6, 7)
    p1 = CrystalStructure(cell, sites=[Site(f"C{i}", "C", (0.1 * i, 0.2, 0.3)) for i in range(3)])
    assert len(expand_equivalents(p1)) == 3
    inv = [SymmetryOp.identity(), SymmetryOp.inversion()]
    assert len(expand_equivalents(CrystalStructure(cell, inv, [Site("C1", "C", (0.1, 0.2, 0.3))]))) == 2
    assert len(expand_equivalents(CrystalStructure(cell, inv, [Site("C1", "C", (0, 0, 0))]))) == 1


def test_d_spacing_cubic():
    cell = UnitCell(10, 10, 10)
    assert d_spacing(cell, (1, 0, 0)) == pytest.approx(10.0)
    assert d_spacing(cell, (1, 1, 1)) == pytest.approx(10 / math.sqrt(3))


def test_d_spacing_reciprocal_basis_oracle(rng):
    cell = UnitCell(7.1, 9.3, 11.2, 90, 104.5, 90)
    a = cell.matrix
    recip = np.linalg.inv(a).T  # rows a*, b*, c*
    for hkl in rng.integers(-6, 7, size=(50, 3)):
        if not hkl.any():
            continue
        d = 1.0 / np.linalg.norm(hkl @ recip)
        assert d_spacing(cell, hkl) == pytest.approx(d, rel=1e-9, abs=0)


def test_d_spacing_zero():
    with pytest.raises(ValueError):
        d_spacing(UnitCell(5, 5, 5), (0, 0, 0))


@given(st.integers(0, len(REPRESENTATIVE) - 1), st.integers(0, 10**6))
def test_symop_isometry(idx, seed):
    rng = np.random.default_rng(seed)
    number = REPRESENTATIVE[idx]
    ops = group_ops(number)
    cell = cell_for(number, rng)
    op = ops[int(rng.integers(len(ops)))]
    p, q = rng.random((2, 3))
    before = np.linalg.norm(frac_to_cart(cell, p - q))
    after = np.linalg.norm(frac_to_cart(cell, apply_symop(op, p, wrapped=False) - apply_symop(op, q, wrapped=False)))
    assert after == pytest.approx(before, abs=1e-9)


def test_expand_latt_counts():
    symm = [parse_symop_xyz("-x,y+1/2,-z+1/2")]
    assert len(expand_latt([], -1)) == 1
    assert len(expand_latt(symm, 1)) == 4
    assert len(expand_latt(symm, -7)) == 4
    assert len(expand_latt(symm, 7)) == 8
    assert is_group(expand_latt(symm, 7))
    assert len(expand_latt([], 3)) == 6
    assert len(expand_latt([], -4)) == 4


def test_latt_rejects_unknown():
    with pytest.raises(ValueError):
        expand_latt([], 9)


def test_occupancy_bounds():
    with pytest.raises(ValueError):
        Site("C1", "C", (0, 0, 0), occupancy=0.0)
    with pytest.raises(ValueError):
        Site("C1", "C", (0, 0, 0), occupancy=1.2)
