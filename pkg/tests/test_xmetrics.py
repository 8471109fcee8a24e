import cmath
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import group_ops
from peak2struct.cif_io import ReflectionSet
from peak2struct.elements import ELEMENT_CLASSES, NOISE, UnknownElementError, atomic_number, form_factor
from peak2struct.hydrogens import place_hydrogens
from peak2struct.lattice import CrystalStructure, Site, UnitCell, cart_to_frac
from peak2struct.xmetrics import (
    compare_solutions,
    evaluate_fit,
    goodness_of_fit,
    n_parameters,
    r1,
    reflection_indices,
    scale_factor,
    simulate_reflections,
    structure_factors,
)


def _refl(hkl, wavelength=0.71073):
    hkl = np.asarray(hkl)
    return ReflectionSet(hkl, np.ones(len(hkl)), np.ones(len(hkl)), wavelength)


def _random_p1(rng, n=5):
    cell = UnitCell(*rng.uniform(5, 9, 3), *rng.uniform(75, 105, 3))
    els = ["C", "N", "O", "S", "Cl", "H"]
    sites = [Site(f"A{i}", els[i % len(els)], tuple(rng.random(3)), float(rng.uniform(0.5, 1.0)),
                  float(rng.uniform(0.01, 0.06))) for i in range(n)]
    return CrystalStructure(cell, sites=sites)


def inv_d2(cell, h, k, l):
    """Textbook triclinic 1/d^2 from cell parameters."""
    a, b, c = cell.lengths
    al, be, ga = (math.radians(x) for x in cell.angles)
    ca, cb, cg = math.cos(al), math.cos(be), math.cos(ga)
    sa, sb, sg = math.sin(al), math.sin(be), math.sin(ga)
    v2 = 1 - ca * ca - cb * cb - cg * cg + 2 * ca * cb * cg
    num = (h * h * sa * sa / (a * a) + k * k * sb * sb / (b * b) + l * l * sg * sg / (c * c)
           + 2 * k * l * (cb * cg - ca) / (b * c) + 2 * l * h * (cg * ca - cb) / (c * a)
           + 2 * h * k * (ca * cb - cg) / (a * b))
    return num / v2


def direct_fc(s, hkl):
    """Loop over reflections, operations and sites with scalar maths only."""
    out = []
    for h, k, l in hkl:
        stol = 0.5 * math.sqrt(inv_d2(s.cell, h, k, l))
        total = 0j
        for op in s.symops:
            R = np.array(op.R, dtype=float)
            t = np.array([float(x) for x in op.translation])
            for site in s.sites:
                x = R @ np.array(site.frac) + t
                f = float(form_factor(site.element, np.array([stol]))[0])
                dw = math.exp(-8 * math.pi ** 2 * site.u_iso * stol * stol)
                total += site.occupancy * f * dw * cmath.exp(2j * math.pi * (h * x[0] + k * x[1] + l * x[2]))
        out.append(total)
    return np.array(out)


# --------------------------------------------------------------------------
# structure factors


def test_form_factor_forward_limit():
    # f(0) = sum a_i + c is close to the electron count of the neutral atom
    for el in [e for e in ELEMENT_CLASSES if e != NOISE] + ["H"]:
        assert float(form_factor(el, np.array([0.0]))[0]) == pytest.approx(atomic_number(el), abs=0.1)


def test_form_factor_decreases():
    s = np.linspace(0, 1.2, 30)
    f = form_factor("O", s)
    assert np.all(np.diff(f) < 0)


def test_unknown_scattering_element():
    s = CrystalStructure(UnitCell(5, 5, 5), sites=[Site("X", "Og", (0, 0, 0))])
    with pytest.raises(UnknownElementError, match="Og"):
        structure_factors(s, _refl([[1, 0, 0]]))


def test_missing_wavelength():
    s = CrystalStructure(UnitCell(5, 5, 5), sites=[Site("C1", "C", (0, 0, 0))])
    with pytest.raises(ValueError, match="wavelength"):
        structure_factors(s, _refl([[1, 0, 0]], wavelength=None))


def test_origin_atom_is_real_positive(rng):
    s = CrystalStructure(UnitCell(6, 7, 8, 80, 95, 100), sites=[Site("S1", "S", (0, 0, 0))])
    fc = structure_factors(s, _refl(rng.integers(-5, 6, (40, 3)) + np.array([[0, 0, 6]]))).fc
    assert np.all(fc.imag == 0) and np.all(fc.real > 0)


def test_centrosymmetric_pair_is_real(rng):
    s = CrystalStructure(UnitCell(6, 7, 8), group_ops(2), [Site("C1", "C", tuple(rng.random(3))),
                                                           Site("N1", "N", tuple(rng.random(3)))])
    hkl = reflection_indices(s, 1.0)
    fc = structure_factors(s, _refl(hkl)).fc
    assert np.abs(fc.imag).max() < 1e-10


@pytest.mark.parametrize("seed", range(4))
def test_direct_summation_oracle_p1(seed):
    rng = np.random.default_rng(seed)
    s = _random_p1(rng)
    hkl = reflection_indices(s, 1.5)[:: max(1, len(reflection_indices(s, 1.5)) // 40)]
    ours = structure_factors(s, _refl(hkl)).fc
    np.testing.assert_allclose(ours, direct_fc(s, hkl), rtol=1e-9, atol=1e-9 * np.abs(ours).max())


def test_direct_summation_oracle_p21c(rng):
    s = CrystalStructure(UnitCell(7.2, 8.1, 9.3, 90, 104, 90), group_ops(14),
                         [Site("C1", "C", tuple(rng.random(3)), 1.0, 0.02), Site("O1", "O", tuple(rng.random(3)), 1.0, 0.04)])
    hkl = reflection_indices(s, 1.6)[::7]
    np.testing.assert_allclose(structure_factors(s, _refl(hkl)).fc, direct_fc(s, hkl), rtol=1e-9, atol=1e-9)


def test_friedel_pairs(rng):
    s = CrystalStructure(UnitCell(6, 6.5, 7), group_ops(2), [Site(f"C{i}", "C", tuple(rng.random(3))) for i in range(3)])
    hkl = reflection_indices(s, 1.2)
    a = structure_factors(s, _refl(hkl)).amplitudes
    b = structure_factors(s, _refl(-hkl)).amplitudes
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_reflection_indices_hemisphere():
    s = CrystalStructure(UnitCell(5, 6, 7, 90, 100, 90), sites=[Site("C1", "C", (0, 0, 0))])
    hkl = reflection_indices(s, 1.0)
    keys = {tuple(h) for h in hkl}
    assert not any(tuple(-np.array(h)) in keys for h in hkl)
    assert all(inv_d2(s.cell, *h) <= 1.0 + 1e-12 for h in hkl)
    # complete: every index inside the sphere appears once, up to Friedel
    count = 0
    for h in range(-6, 7):
        for k in range(-7, 8):
            for l in range(-8, 9):
                if (h, k, l) != (0, 0, 0) and inv_d2(s.cell, h, k, l) <= 1.0:
                    count += 1
    assert 2 * len(hkl) == count


# --------------------------------------------------------------------------
# scale, R1, S


def test_scale_examples():
    fc = np.array([3.0, 4.0, 5.0])
    assert scale_factor(fc, fc) == pytest.approx(1.0)
    assert scale_factor(2 * fc, fc) == pytest.approx(2.0)
    assert scale_factor([10, 5], [8, 5]) == pytest.approx(105 / 89, abs=1e-12)
    with pytest.raises(ValueError):
        scale_factor([1, 2], [0, 0])
    with pytest.raises(ValueError):
        scale_factor([], [])


def test_r1_examples():
    assert r1([3, 4], [3, 4], 1.0) == 0.0
    k = 105 / 89
    expected = (abs(10 - k * 8) + abs(5 - k * 5)) / 15
    assert r1([10, 5], [8, 5], k) == pytest.approx(expected, abs=1e-12)
    assert r1([10, 5], [8, 5], k) == pytest.approx(0.0974, abs=1e-4)
    with pytest.raises(ValueError):
        r1([0, 0], [1, 1], 1.0)


def test_r1_mask():
    assert r1([10, 5, 1], [10, 5, 3], 1.0, mask=np.array([True, True, False])) == 0.0


def test_gof_examples():
    assert goodness_of_fit([4, 9, 16], [1, 1, 1], [2, 3, 4], 1.0, 1) == 0.0
    # residuals of one sigma each over 3 - 1 degrees of freedom
    assert goodness_of_fit([5, 10, 17], [1, 1, 1], [2, 3, 4], 1.0, 1) == pytest.approx(math.sqrt(1.5), abs=1e-12)
    assert goodness_of_fit([6, 11, 18], [2, 2, 2], [2, 3, 4], 1.0, 1) == pytest.approx(math.sqrt(1.5), abs=1e-12)
    with pytest.raises(ValueError):
        goodness_of_fit([1, 2], [1, 1], [1, 1], 1.0, 2)
    with pytest.raises(ValueError):
        goodness_of_fit([1, 2, 3], [1, 0, 1], [1, 1, 1], 1.0, 1)


@given(st.lists(st.floats(0.5, 50), min_size=3, max_size=30), st.floats(0.1, 10))
def test_gof_sigma_scaling(fc, factor):
    fc = np.array(fc)
    fo2 = fc * fc * 1.1 + 0.3
    sig = np.full(len(fc), 0.7)
    a = goodness_of_fit(fo2, sig, fc, 1.0, 1)
    assert goodness_of_fit(fo2, sig * factor, fc, 1.0, 1) == pytest.approx(a / factor, rel=1e-10)


@given(st.integers(0, 10**6), st.floats(0.01, 100.0))
def test_r1_invariant_to_fo_scale(seed, scale):
    rng = np.random.default_rng(seed)
    fo, fc = rng.uniform(1, 20, 25), rng.uniform(1, 20, 25)
    a = r1(fo, fc, scale_factor(fo, fc))
    b = r1(scale * fo, fc, scale_factor(scale * fo, fc))
    assert b == pytest.approx(a, rel=1e-10, abs=1e-14)


def test_gof_decreases_as_fit_improves(rng):
    fc = rng.uniform(1, 10, 40)
    fo2 = fc * fc + rng.normal(0, 5, 40)
    sig = np.ones(40)
    values = []
    for t in np.linspace(0, 1, 6):
        fc_t = np.sqrt(np.clip((1 - t) * fc * fc + t * fo2, 0, None))
        values.append(goodness_of_fit(fo2, sig, fc_t, 1.0, 1))
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_n_parameters():
    s = CrystalStructure(UnitCell(5, 5, 5), sites=[Site("C1", "C", (0, 0, 0)), Site("H1", "H", (0.2, 0, 0))])
    assert n_parameters(s) == 5


# --------------------------------------------------------------------------
# self-consistency and comparison


def _molecule_crystal():
    cell = UnitCell(9.5, 10.2, 11.3, 90, 101.0, 90)
    cart = np.array([[1.0, 1.0, 1.0], [2.5, 1.1, 1.0], [3.1, 2.4, 1.2], [4.5, 2.6, 1.3], [2.4, 3.5, 1.0], [0.4, -0.3, 1.1]])
    els = ["C", "C", "N", "C", "O", "O"]
    frac = cart_to_frac(cell, cart)
    return CrystalStructure(cell, group_ops(14), [Site(f"{e}{i + 1}", e, tuple(f), 1.0, 0.03) for i, (e, f) in enumerate(zip(els, frac))])


def test_self_consistency():
    s = _molecule_crystal()
    refl = simulate_reflections(s, d_min=0.9)
    m = evaluate_fit(s, refl)
    assert m.r1 < 1e-10 and m.s < 1e-10 and m.k == pytest.approx(1.0, abs=1e-12)


def test_simulated_sigma_convention():
    s = _molecule_crystal()
    refl = simulate_reflections(s, d_min=1.2)
    np.testing.assert_allclose(refl.sigma, 0.03 * refl.fo2 + 1.0)
    noisy = simulate_reflections(s, d_min=1.2, noise=1.0, seed=3)
    assert not np.array_equal(noisy.fo2, refl.fo2)
    assert np.array_equal(simulate_reflections(s, d_min=1.2, noise=1.0, seed=3).fo2, noisy.fo2)


def test_observed_only_flag():
    s = _molecule_crystal()
    refl = simulate_reflections(s, d_min=1.0)
    refl.fo2[:5] = 0.0
    full, obs = evaluate_fit(s, refl), evaluate_fit(s, refl, observed_only=True)
    assert obs.r1 < full.r1


def _relabel(s, i, el):
    sites = list(s.sites)
    x = sites[i]
    sites[i] = Site(x.label, el, x.frac, x.occupancy, x.u_iso)
    return s.with_sites(sites)


def test_identical_not_flagged():
    s = _molecule_crystal()
    v = compare_solutions(s, s, simulate_reflections(s, d_min=0.9))
    assert v.margin == 0.0 and not v.flagged


def test_planted_n_to_c_flagged():
    truth = _molecule_crystal()
    v = compare_solutions(truth, _relabel(truth, 2, "C"), simulate_reflections(truth, d_min=0.9))
    assert v.flagged and v.margin > 0.005
    assert v.r1_model < 1e-10


def test_planted_missing_hydroxyl_h_flagged():
    base = _molecule_crystal()
    full = place_hydrogens(base, [0, 2, 0, 3, 0, 1]).structure
    refl = simulate_reflections(full, d_min=0.9)
    missing = full.with_sites([x for x in full.sites if x.label != "H6"])
    assert len(missing.sites) == len(full.sites) - 1
    v = compare_solutions(full, missing, refl)
    assert v.flagged


def test_comparison_needs_same_cell():
    s = _molecule_crystal()
    other = CrystalStructure(UnitCell(9.6, 10.2, 11.3, 90, 101.0, 90), s.symops, s.sites)
    with pytest.raises(ValueError, match="cell"):
        compare_solutions(s, other, simulate_reflections(s, d_min=1.5))


def test_verdict_record_is_json():
    s = _molecule_crystal()
    rec = json.loads(compare_solutions(s, s, simulate_reflections(s, d_min=1.5), threshold=0.01).to_record())
    assert rec["threshold"] == 0.01 and rec["flagged"] is False
