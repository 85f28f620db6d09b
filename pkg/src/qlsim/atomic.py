"""Hyperfine + Zeeman structure of the logic ion's S_1/2 ground manifold.

Builds the electron-nucleus Hamiltonian

    H = A (J . I) + (mu_B gJ Bq / hbar) Jz        [rad/s, hbar = 1]

for an electron spin J = 1/2 coupled to a nuclear spin I, diagonalizes it
exactly per m_F block, and exposes the dressed-level energies together with
the diagonal matrix elements b = <level| Jz |level> that every gate
calculation downstream consumes.

Units: all energies and coupling constants are angular frequencies (rad/s).
Magnetic fields are tesla. Configuration layers that accept ordinary
frequencies in Hz multiply by 2*pi before constructing an IonSpec.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import constants

TWO_PI = 2.0 * np.pi
GAUSS_TO_TESLA = 1e-4

# mu_B / hbar in rad/(s T)
MU_B_OVER_HBAR = constants.physical_constants["Bohr magneton"][0] / constants.hbar


class ValidationError(ValueError):
    """Non-physical or inconsistent input."""


class LowFieldWarning(UserWarning):
    """Quantization field outside the validated low-field regime."""


def _is_half_integer(x: float) -> bool:
    return abs(2.0 * x - round(2.0 * x)) < 1e-12


def format_half_integer(x: float) -> str:
    """Render a (half-)integer quantum number, e.g. 1 -> '1', 1.5 -> '3/2'."""
    n = round(2.0 * x)
    if abs(2.0 * x - n) > 1e-9:
        raise ValidationError(f"{x} is not a half-integer")
    return str(n // 2) if n % 2 == 0 else f"{n}/2"


def parse_half_integer(s: str) -> float:
    """Parse '1', '-2', '3/2' or '1.5' to a float quantum number."""
    value = float(Fraction(s.strip()))
    if not _is_half_integer(value):
        raise ValidationError(f"{s!r} is not a half-integer quantum number")
    return value


@dataclass(frozen=True)
class IonSpec:
    """Static parameters of the logic ion.

    nuclear_spin        I, half-integer >= 1/2
    hyperfine_constant  A, angular frequency (rad/s), > 0
    lande_gj            electronic g factor (dimensionless)
    quantization_field  Bq (tesla), >= 0
    """

    nuclear_spin: float
    hyperfine_constant: float
    lande_gj: float
    quantization_field: float = 0.0

    def __post_init__(self):
        if not _is_half_integer(self.nuclear_spin) or self.nuclear_spin < 0.5:
            raise ValidationError(
                f"nuclear spin must be a half-integer >= 1/2, got {self.nuclear_spin}"
            )
        if not self.hyperfine_constant > 0:
            raise ValidationError("hyperfine constant must be > 0")
        if self.quantization_field < 0:
            raise ValidationError("quantization field must be >= 0")
        ratio = self.zeeman_rate / self.hyperfine_constant
        if ratio >= 0.1:
            warnings.warn(
                f"mu_B gJ Bq / (hbar A) = {ratio:.3g} >= 0.1: outside the "
                "validated low-field regime",
                LowFieldWarning,
                stacklevel=2,
            )

    @property
    def zeeman_rate(self) -> float:
        """mu_B gJ Bq / hbar in rad/s."""
        return MU_B_OVER_HBAR * self.lande_gj * self.quantization_field

    @property
    def f_plus(self) -> float:
        return self.nuclear_spin + 0.5

    @property
    def f_minus(self) -> float:
        return self.nuclear_spin - 0.5

    @property
    def level_count(self) -> int:
        return int(round(4 * self.nuclear_spin + 2))

    def cache_key(self):
        return (
            self.nuclear_spin,
            self.hyperfine_constant,
            self.lande_gj,
            self.quantization_field,
        )


@dataclass(frozen=True)
class HyperfineLevel:
    """One dressed sublevel, adiabatically labeled by its zero-field F, m_F."""

    F: float
    m_F: float
    manifold_sign: int  # +1 for F+ = I + 1/2, -1 for F- = I - 1/2
    energy: float  # rad/s
    b_coeff: float  # <level| Jz |level>, dimensionless

    @property
    def label(self) -> str:
        return f"{format_half_integer(self.F)},{format_half_integer(self.m_F)}"

    @property
    def key(self) -> tuple[float, float]:
        return (self.F, self.m_F)


class HyperfineManifold:
    """Diagonalized level structure of one ion.

    Levels are ordered F descending, then m_F ascending; amplitude vectors
    elsewhere in the package index logic levels in exactly this order.
    ``basis_transform`` has columns giving each dressed level in the
    uncoupled |m_J, m_I> basis (m_J = +1/2 block first, m_I ascending
    within a block).
    """

    def __init__(self, ion: IonSpec, levels: tuple[HyperfineLevel, ...],
                 basis_transform: np.ndarray):
        self.ion = ion
        self.levels = levels
        self.basis_transform = basis_transform
        self._index = {lv.key: i for i, lv in enumerate(levels)}
        self.b_vector = np.array([lv.b_coeff for lv in levels])
        self.energies = np.array([lv.energy for lv in levels])

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def f_plus(self) -> float:
        return self.ion.f_plus

    def index_of(self, level) -> int:
        """Index for a level given as (F, m_F), 'F,mF' string, or index."""
        if isinstance(level, (int, np.integer)):
            if not 0 <= level < len(self.levels):
                raise ValidationError(f"level index {level} out of range")
            return int(level)
        if isinstance(level, str):
            f_str, m_str = level.split(",")
            level = (parse_half_integer(f_str), parse_half_integer(m_str))
        key = (float(level[0]), float(level[1]))
        try:
            return self._index[key]
        except KeyError:
            raise ValidationError(f"no level F={key[0]}, m_F={key[1]} in manifold") from None

    def level(self, level) -> HyperfineLevel:
        return self.levels[self.index_of(level)]

    def cache_key(self):
        return self.ion.cache_key()

    def to_json_dict(self) -> dict:
        """Document emitted by the dump-manifold subcommand."""
        return {
            "ion": {
                "nuclear_spin": self.ion.nuclear_spin,
                "hyperfine_constant_rad_s": self.ion.hyperfine_constant,
                "lande_gj": self.ion.lande_gj,
                "quantization_field_tesla": self.ion.quantization_field,
            },
            "levels": [
                {"F": lv.F, "mF": lv.m_F, "energy_rad_s": lv.energy, "b": lv.b_coeff}
                for lv in self.levels
            ],
        }


def _clebsch_column(I: float, m_F: float, sign: int) -> np.ndarray:
    """Zero-field coupled state |F(sign), m_F> over [(+1/2, m-1/2), (-1/2, m+1/2)].

    Condon-Shortley phases; entries for absent uncoupled partners are dropped
    by the caller.
    """
    up = np.sqrt((I + 0.5 + m_F) / (2 * I + 1))
    dn = np.sqrt((I + 0.5 - m_F) / (2 * I + 1))
    if sign > 0:
        return np.array([up, dn])
    return np.array([-dn, up])


def build_manifold(spec: IonSpec) -> HyperfineManifold:
    """Diagonalize the hyperfine + Zeeman Hamiltonian of the logic ion.

    The Hamiltonian commutes with F_z, so it is assembled and solved per
    m_F block (block size <= 2 for J = 1/2, any I). Eigenstates are labeled
    by adiabatic connection to the zero-field |F, m_F> states: within a
    block the upper branch is F+ and the lower branch F- (they never cross
    for A > 0). Each eigenvector's sign is fixed by requiring a positive
    overlap with its zero-field coupled state.
    """
    I = spec.nuclear_spin
    A = spec.hyperfine_constant
    zee = spec.zeeman_rate
    n_nuc = int(round(2 * I)) + 1
    dim = 2 * n_nuc

    def uncoupled_index(m_j: float, m_i: float) -> int:
        block = 0 if m_j > 0 else 1
        return block * n_nuc + int(round(m_i + I))

    found: dict[tuple[float, float], tuple[HyperfineLevel, np.ndarray]] = {}

    n_mf = int(round(2 * (I + 0.5))) + 1  # m_F from -(I+1/2) to I+1/2
    for k in range(n_mf):
        m_F = -(I + 0.5) + k
        members = []  # (m_j, m_i)
        if abs(m_F - 0.5) <= I + 1e-9:
            members.append((0.5, m_F - 0.5))
        if abs(m_F + 0.5) <= I + 1e-9:
            members.append((-0.5, m_F + 0.5))

        if len(members) == 1:
            m_j, m_i = members[0]
            energy = A * m_j * m_i + zee * m_j
            vec = np.array([1.0])
            signs = [1]
            eigvecs = [vec]
            energies = [energy]
        else:
            (mj1, mi1), (mj2, mi2) = members
            diag1 = A * mj1 * mi1 + zee * mj1
            diag2 = A * mj2 * mi2 + zee * mj2
            off = 0.5 * A * np.sqrt(I * (I + 1) - (m_F ** 2 - 0.25))
            block = np.array([[diag1, off], [off, diag2]])
            w, v = np.linalg.eigh(block)
            # eigh sorts ascending: index 1 is the F+ branch for A > 0
            signs = [1, -1]
            eigvecs = [v[:, 1], v[:, 0]]
            energies = [w[1], w[0]]

        for sign, vec, energy in zip(signs, eigvecs, energies):
            cg = _clebsch_column(I, m_F, sign)
            if len(members) == 1:
                cg = cg[:1] if members[0][0] > 0 else cg[1:]
            if np.dot(vec, cg) < 0:
                vec = -vec
            b = sum(v_k ** 2 * m_j for v_k, (m_j, _) in zip(vec, members))
            F = I + 0.5 if sign > 0 else I - 0.5
            column = np.zeros(dim)
            for v_k, (m_j, m_i) in zip(vec, members):
                column[uncoupled_index(m_j, m_i)] = v_k
            found[(F, m_F)] = (
                HyperfineLevel(F=F, m_F=m_F, manifold_sign=sign,
                               energy=float(energy), b_coeff=float(b)),
                column,
            )

    # ordering convention: F descending, m_F ascending
    keys = sorted(found, key=lambda fm: (-fm[0], fm[1]))
    levels = tuple(found[k][0] for k in keys)
    transform = np.column_stack([found[k][1] for k in keys])
    return HyperfineManifold(spec, levels, transform)


def breit_rabi_energy(spec: IonSpec, manifold_sign: int, m_F: float) -> float:
    """Closed-form eigenvalue for one sublevel; diagonalization cross-check.

    With the nuclear Zeeman term dropped,

        E(F+-, m) = -dW / (2(2I+1)) +- (dW/2) sqrt(1 + 4 m x/(2I+1) + x^2),

    dW = A (I + 1/2) and x = mu_B gJ Bq / (hbar dW). The stretched
    m_F = +-(I + 1/2) states exist only in F+.
    """
    I = spec.nuclear_spin
    if not _is_half_integer(m_F) or abs(m_F) > I + 0.5 + 1e-9:
        raise ValidationError(f"|m_F| must be <= I + 1/2, got {m_F}")
    if manifold_sign not in (1, -1):
        raise ValidationError("manifold_sign must be +1 or -1")
    if manifold_sign < 0 and abs(m_F) > I - 0.5 + 1e-9:
        raise ValidationError(
            f"stretched state m_F={m_F} exists only in the F+ manifold"
        )
    d_w = spec.hyperfine_constant * (I + 0.5)
    x = spec.zeeman_rate / d_w
    root = np.sqrt(1.0 + 4.0 * m_F * x / (2 * I + 1) + x * x)
    return -d_w / (2 * (2 * I + 1)) + manifold_sign * 0.5 * d_w * root


# Preset ion parameters. A and gJ are standard literature numbers for the
# S_1/2 ground manifolds; they are configuration defaults, not values taken
# from the modeled measurement scheme.

def yb171(quantization_field: float = 0.0) -> IonSpec:
    """171Yb+ (I = 1/2): hyperfine splitting 12.6428 GHz."""
    return IonSpec(
        nuclear_spin=0.5,
        hyperfine_constant=TWO_PI * 12.642812118e9,
        lande_gj=1.998,
        quantization_field=quantization_field,
    )


def ba137(quantization_field: float = 0.0) -> IonSpec:
    """137Ba+ (I = 3/2): hyperfine splitting 8.0377 GHz, A = splitting / 2."""
    return IonSpec(
        nuclear_spin=1.5,
        hyperfine_constant=TWO_PI * 4.018870834e9,
        lande_gj=2.0025,
        quantization_field=quantization_field,
    )


PRESETS = {"yb171": yb171, "ba137": ba137}
