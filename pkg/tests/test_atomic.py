import numpy as np
import pytest

from qlsim.atomic import (
    GAUSS_TO_TESLA,
    TWO_PI,
    IonSpec,
    LowFieldWarning,
    ValidationError,
    ba137,
    breit_rabi_energy,
    build_manifold,
    format_half_integer,
    parse_half_integer,
    yb171,
)


def test_ion_spec_validation():
    with pytest.raises(ValidationError):
        IonSpec(nuclear_spin=0.7, hyperfine_constant=1.0, lande_gj=2.0)
    with pytest.raises(ValidationError):
        IonSpec(nuclear_spin=0.0, hyperfine_constant=1.0, lande_gj=2.0)
    with pytest.raises(ValidationError):
        IonSpec(nuclear_spin=0.5, hyperfine_constant=-1.0, lande_gj=2.0)
    with pytest.raises(ValidationError):
        IonSpec(nuclear_spin=0.5, hyperfine_constant=1.0, lande_gj=2.0,
                quantization_field=-1e-4)


def test_low_field_warning():
    # mu_B gJ Bq / hbar A >= 0.1 warns but still builds
    with pytest.warns(LowFieldWarning):
        spec = IonSpec(nuclear_spin=0.5, hyperfine_constant=TWO_PI * 1e6,
                       lande_gj=2.0, quantization_field=10e-4)
    build_manifold(spec)


def test_half_integer_formatting():
    assert format_half_integer(1.0) == "1"
    assert format_half_integer(-2.0) == "-2"
    assert format_half_integer(1.5) == "3/2"
    assert format_half_integer(-0.5) == "-1/2"
    assert parse_half_integer("3/2") == 1.5
    assert parse_half_integer("-1") == -1.0
    assert parse_half_integer("1.5") == 1.5
    with pytest.raises(ValidationError):
        parse_half_integer("0.3")


def test_yb_level_structure(yb):
    assert len(yb) == 4
    labels = [lv.label for lv in yb.levels]
    assert labels == ["1,-1", "1,0", "1,1", "0,0"]  # F desc, m_F asc
    b = {lv.label: lv.b_coeff for lv in yb.levels}
    assert b["0,0"] == pytest.approx(0.0, abs=1e-15)
    assert b["1,-1"] == pytest.approx(-0.5, abs=1e-15)
    assert b["1,0"] == pytest.approx(0.0, abs=1e-15)
    assert b["1,1"] == pytest.approx(0.5, abs=1e-15)


def test_ba_level_structure(ba):
    assert len(ba) == 8
    b = {lv.label: lv.b_coeff for lv in ba.levels}
    assert b["2,2"] == pytest.approx(0.5, abs=1e-15)
    assert b["2,1"] == pytest.approx(0.25, abs=1e-15)
    assert b["1,1"] == pytest.approx(-0.25, abs=1e-15)
    assert b["1,0"] == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("preset", [yb171, ba137])
def test_b_traceless(preset):
    # trace of Jz vanishes at any field
    manifold = build_manifold(preset(quantization_field=5 * GAUSS_TO_TESLA))
    assert abs(manifold.b_vector.sum()) < 1e-12


@pytest.mark.parametrize("preset", [yb171, ba137])
def test_b_reflection_symmetry_low_field(preset):
    # b(F, m) = -b(F, -m) within a manifold; exact at zero field, O(x) at
    # finite field where the Zeeman term breaks the m -> -m symmetry
    manifold = build_manifold(preset())
    for lv in manifold.levels:
        partner = manifold.level((lv.F, -lv.m_F))
        assert lv.b_coeff == pytest.approx(-partner.b_coeff, abs=1e-14)
    manifold = build_manifold(preset(quantization_field=1e-8))
    for lv in manifold.levels:
        partner = manifold.level((lv.F, -lv.m_F))
        assert lv.b_coeff == pytest.approx(-partner.b_coeff, abs=1e-6)


@pytest.mark.parametrize("preset", [yb171, ba137])
def test_b_low_field_limit(preset):
    # at 1e-8 T the deviation from +-m_F / (2 F+) is below 1e-6
    manifold = build_manifold(preset(quantization_field=1e-8))
    f_plus = manifold.f_plus
    for lv in manifold.levels:
        ideal = lv.manifold_sign * lv.m_F / (2 * f_plus)
        assert abs(lv.b_coeff - ideal) < 1e-6


def test_mf0_b_vanishes_at_zero_field():
    for preset in (yb171, ba137):
        manifold = build_manifold(preset())
        for lv in manifold.levels:
            if lv.m_F == 0.0:
                assert abs(lv.b_coeff) < 1e-15


def test_zero_field_hyperfine_energies():
    # F+ at +A I/2, F- at -A (I+1)/2, splitting A (2I+1)/2
    for preset, nuclear_spin in ((yb171, 0.5), (ba137, 1.5)):
        spec = preset()
        a = spec.hyperfine_constant
        up = breit_rabi_energy(spec, +1, 0.5 if nuclear_spin == 0.5 else 0.0)
        dn = breit_rabi_energy(spec, -1, 0.0)
        assert up == pytest.approx(a * nuclear_spin / 2, rel=1e-12)
        assert dn == pytest.approx(-a * (nuclear_spin + 1) / 2, rel=1e-12)
        assert up - dn == pytest.approx(a * (2 * nuclear_spin + 1) / 2, rel=1e-12)


def test_stretched_state_linear_slope():
    # stretched |1,+-1> of I=1/2 are product states: slope +-mu_B gJ / (2 hbar)
    b_field = 2 * GAUSS_TO_TESLA
    spec0 = yb171()
    spec = yb171(quantization_field=b_field)
    slope = spec.zeeman_rate / 2.0
    for m_f, sign in ((1.0, +1), (-1.0, -1)):
        shift = breit_rabi_energy(spec, +1, m_f) - breit_rabi_energy(spec0, +1, m_f)
        assert shift == pytest.approx(sign * slope, rel=1e-12)


def test_quadratic_zeeman_matches_diagonalization():
    # clock pair |1,0> vs |0,0> at small field, closed form vs numerics
    spec = yb171(quantization_field=1 * GAUSS_TO_TESLA)
    manifold = build_manifold(spec)
    for key, sign in (((1.0, 0.0), +1), ((0.0, 0.0), -1)):
        level = manifold.level(key)
        closed = breit_rabi_energy(spec, sign, 0.0)
        assert abs(level.energy - closed) / abs(closed) < 1e-10


@pytest.mark.parametrize("preset", [yb171, ba137])
@pytest.mark.parametrize("gauss", [0.0, 0.5, 2.0, 5.0, 10.0])
def test_diagonalization_vs_breit_rabi(preset, gauss):
    spec = preset(quantization_field=gauss * GAUSS_TO_TESLA)
    manifold = build_manifold(spec)
    scale = spec.hyperfine_constant * (spec.nuclear_spin + 0.5)
    for lv in manifold.levels:
        closed = breit_rabi_energy(spec, lv.manifold_sign, lv.m_F)
        assert abs(lv.energy - closed) <= 1e-10 * scale


def test_breit_rabi_stretched_manifold_selection():
    spec = yb171()
    with pytest.raises(ValidationError):
        breit_rabi_energy(spec, -1, 1.0)  # m_F = I + 1/2 only exists in F+
    with pytest.raises(ValidationError):
        breit_rabi_energy(spec, +1, 2.0)


@pytest.mark.parametrize("gauss", [0.0, 3.0, 10.0])
def test_basis_transform_unitary(gauss):
    manifold = build_manifold(ba137(quantization_field=gauss * GAUSS_TO_TESLA))
    u = manifold.basis_transform
    assert np.max(np.abs(u.T @ u - np.eye(u.shape[0]))) < 1e-12


def test_eigenvector_phase_convention():
    # positive overlap with the zero-field coupled states at any low field
    zero = build_manifold(ba137())
    dressed = build_manifold(ba137(quantization_field=5 * GAUSS_TO_TESLA))
    overlaps = np.diag(zero.basis_transform.T @ dressed.basis_transform)
    assert np.all(overlaps > 0.99)


def test_b_is_jz_expectation(ba):
    # b must equal <level| U_B^T Jz U_B |level> with Jz = diag(m_J)
    n_nuc = int(round(2 * ba.ion.nuclear_spin)) + 1
    jz = np.diag([0.5] * n_nuc + [-0.5] * n_nuc)
    dressed_jz = ba.basis_transform.T @ jz @ ba.basis_transform
    assert np.allclose(np.diag(dressed_jz), ba.b_vector, atol=1e-14)


def test_manifold_lookup_and_json(yb):
    assert yb.index_of("1,-1") == 0
    assert yb.index_of((0, 0)) == 3
    assert yb.index_of(2) == 2
    with pytest.raises(ValidationError):
        yb.index_of((3, 0))
    doc = yb.to_json_dict()
    assert set(doc) == {"ion", "levels"}
    assert set(doc["levels"][0]) == {"F", "mF", "energy_rad_s", "b"}
    assert doc["levels"][0]["F"] == 1.0 and doc["levels"][0]["mF"] == -1.0


def test_levels_immutable(yb):
    with pytest.raises(Exception):
        yb.levels[0].b_coeff = 1.0
