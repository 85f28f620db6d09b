"""Geometric-phase gate dynamics, readout pulses and shelving.

The gate Hamiltonian in the rotating frame is

    H_g(t) = (Omega_g / 2) (Jz c_l + sigma_z c_r) (a+ e^{i delta t} + a e^{-i delta t})

with Jz taken diagonal in the dressed basis (entries b_coeff). Static error
terms H_em = eps a+a and H_eZ = Delta (Jz + sigma_z/2) can be switched on
during the gate window. Everything commutes with the logic-level projectors,
so the spin blocks never mix: both the closed-form propagator and the
numerical integrator work per (logic level, readout state) block.

Basis ordering of a SystemState amplitude vector: logic level slowest
(manifold order), readout qubit middle (|0>, |1>), Fock index fastest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from qlsim.atomic import TWO_PI, HyperfineManifold, ValidationError

NORM_TOL = 1e-9
TRUNCATION_TOL = 1e-8


class FockTruncationError(RuntimeError):
    """Population reached the top of the Fock ladder."""


class IntegratorError(RuntimeError):
    """Step-doubling did not converge to the requested tolerance."""


@dataclass(frozen=True)
class GateParams:
    """One geometric-phase-gate setting.

    Loop closure requires duration = 2 pi / detuning, and the entangling
    angle must satisfy
        target_dtheta = rabi^2 c_l c_r duration / (2 detuning F+),
    which ``gate_params_for`` guarantees by construction and
    ``check_closure`` re-verifies (F+ is supplied by the manifold).
    """

    rabi: float  # Omega_g, rad/s
    detuning: float  # delta, rad/s
    duration: float  # t_g, s
    c_l: float
    c_r: float
    fock_cutoff: int  # n_max
    target_dtheta: float  # radians

    def __post_init__(self):
        if self.rabi <= 0 or self.detuning <= 0 or self.duration <= 0:
            raise ValidationError("rabi, detuning and duration must be positive")
        if not (abs(self.c_l) <= 1 and abs(self.c_r) <= 1):
            raise ValidationError("participation factors must satisfy |c| <= 1")
        if self.fock_cutoff < 1:
            raise ValidationError("fock_cutoff must be >= 1")


def gate_params_for(dtheta: float, rabi: float, c_l: float, c_r: float,
                    f_plus: float, fock_cutoff: int = 20) -> GateParams:
    """Solve the closure conditions for (delta, t_g) at a target dtheta.

    delta = Omega_g sqrt(pi c_l c_r / (dtheta F+)) and t_g = 2 pi / delta.
    """
    if dtheta <= 0:
        raise ValidationError(
            "dtheta must be positive; negative rotations are realized via phi_y"
        )
    if rabi <= 0:
        raise ValidationError("rabi must be positive")
    if c_l * c_r <= 0:
        raise ValidationError("c_l * c_r must be positive")
    detuning = rabi * math.sqrt(math.pi * c_l * c_r / (dtheta * f_plus))
    return GateParams(
        rabi=rabi,
        detuning=detuning,
        duration=TWO_PI / detuning,
        c_l=c_l,
        c_r=c_r,
        fock_cutoff=fock_cutoff,
        target_dtheta=dtheta,
    )


def closure_residual(params: GateParams, f_plus: float) -> float:
    """Worst relative violation of the two closure conditions."""
    implied = (params.rabi ** 2 * params.c_l * params.c_r * params.duration
               / (2.0 * params.detuning * f_plus))
    loop = params.duration * params.detuning / TWO_PI - 1.0
    return max(abs(implied / params.target_dtheta - 1.0), abs(loop))


def check_closure(params: GateParams, f_plus: float, tol: float = 1e-12) -> None:
    residual = closure_residual(params, f_plus)
    if residual > tol:
        raise ValidationError(
            f"gate parameters violate loop closure (residual {residual:.3e})"
        )


@dataclass(frozen=True)
class ErrorModel:
    """Static noise during the gate window plus the shelving Rabi error."""

    mode_shift: float = 0.0  # eps, rad/s
    zeeman_shift: float = 0.0  # Delta, rad/s
    shelving_rabi_ratio: float = 1.0  # Omega'_s / Omega_s

    def __post_init__(self):
        for value in (self.mode_shift, self.zeeman_shift, self.shelving_rabi_ratio):
            if not np.isfinite(value):
                raise ValidationError("error model fields must be finite")
        if self.shelving_rabi_ratio < 0:
            raise ValidationError("shelving_rabi_ratio must be >= 0")

    @property
    def is_ideal_gate(self) -> bool:
        return self.mode_shift == 0.0 and self.zeeman_shift == 0.0


IDEAL = ErrorModel()


class SystemState:
    """Normalized amplitudes over (logic levels) x (readout qubit) x (Fock)."""

    __slots__ = ("manifold", "amplitudes", "fock_cutoff")

    def __init__(self, manifold: HyperfineManifold, amplitudes: np.ndarray,
                 fock_cutoff: int):
        self.manifold = manifold
        self.fock_cutoff = fock_cutoff
        amplitudes = np.asarray(amplitudes, dtype=complex).ravel()
        expected = len(manifold) * 2 * (fock_cutoff + 1)
        if amplitudes.size != expected:
            raise ValidationError(
                f"amplitude vector has length {amplitudes.size}, expected {expected}"
            )
        self.amplitudes = amplitudes

    @classmethod
    def from_level(cls, manifold: HyperfineManifold, level, fock_cutoff: int = 20,
                   readout: int = 0, fock: int = 0) -> "SystemState":
        amps = np.zeros((len(manifold), 2, fock_cutoff + 1), dtype=complex)
        amps[manifold.index_of(level), readout, fock] = 1.0
        return cls(manifold, amps, fock_cutoff)

    @classmethod
    def from_logic_amplitudes(cls, manifold: HyperfineManifold, coeffs,
                              fock_cutoff: int = 20) -> "SystemState":
        """Logic superposition with readout |0> and motional ground state."""
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.size != len(manifold):
            raise ValidationError("need one coefficient per logic level")
        amps = np.zeros((len(manifold), 2, fock_cutoff + 1), dtype=complex)
        amps[:, 0, 0] = coeffs / np.linalg.norm(coeffs)
        return cls(manifold, amps, fock_cutoff)

    def view(self) -> np.ndarray:
        return self.amplitudes.reshape(len(self.manifold), 2, self.fock_cutoff + 1)

    def copy(self) -> "SystemState":
        return SystemState(self.manifold, self.amplitudes.copy(), self.fock_cutoff)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def check_norm(self, tol: float = NORM_TOL) -> None:
        if abs(self.norm() - 1.0) > tol:
            raise ValidationError(f"state norm {self.norm()} deviates from 1")

    def logic_populations(self) -> np.ndarray:
        return np.sum(np.abs(self.view()) ** 2, axis=(1, 2))

    def level_population(self, level) -> float:
        return float(self.logic_populations()[self.manifold.index_of(level)])

    def readout_excited_population(self) -> float:
        return float(np.sum(np.abs(self.view()[:, 1, :]) ** 2))

    def top_fock_population(self) -> float:
        """Population of the top two Fock levels (truncation diagnostic)."""
        return float(np.sum(np.abs(self.view()[:, :, -2:]) ** 2))


def spin_flip_probability(theta) -> float:
    """sin^2(theta / 2)."""
    return np.sin(np.asarray(theta) / 2.0) ** 2


def rotation_angles(manifold: HyperfineManifold, dtheta: float, phi_y: float) -> np.ndarray:
    """Per-level readout rotation angle theta = phi_y + 2 F+ dtheta b.

    Reduces to phi_y +- dtheta m_F in the low-field limit where
    b -> +-m_F / (2 F+).
    """
    return phi_y + 2.0 * manifold.f_plus * dtheta * manifold.b_vector


def _ry(theta: float) -> np.ndarray:
    """exp(i theta sigma_y / 2) in the (|0>, |1>) readout basis."""
    c, s = math.cos(theta / 2.0), math.sin(theta / 2.0)
    return np.array([[c, s], [-s, c]], dtype=complex)


def _rot_xy(angle: float, axis_phase: float) -> np.ndarray:
    """exp(-i (angle/2) (cos(phi) sigma_x + sin(phi) sigma_y))."""
    c = math.cos(angle / 2.0)
    s = math.sin(angle / 2.0)
    e = np.exp(-1j * axis_phase)
    return np.array([[c, -1j * s * e], [-1j * s * np.conj(e), c]])


PI_HALF_X = _rot_xy(math.pi / 2.0, 0.0)  # T = exp(-i pi sigma_x / 4)


def compose_conditional_rotation(manifold: HyperfineManifold, dtheta: float,
                                 phi_y: float) -> np.ndarray:
    """Per-level 2x2 readout rotations exp(i theta sigma_y / 2), shape (L, 2, 2)."""
    thetas = rotation_angles(manifold, dtheta, phi_y)
    return np.stack([_ry(t) for t in thetas])


def _apply_readout_local(state: SystemState, u2: np.ndarray) -> SystemState:
    psi = state.view()
    out = np.einsum("ab,lbn->lan", u2, psi)
    return SystemState(state.manifold, out, state.fock_cutoff)


def apply_pi_half(state: SystemState, axis_phase: float = 0.0) -> SystemState:
    """pi/2 pulse on the readout ion about the axis (cos phi, sin phi, 0).

    axis_phase = 0 gives T = exp(-i pi sigma_x/4); axis_phase = pi gives
    its adjoint.
    """
    return _apply_readout_local(state, _rot_xy(math.pi / 2.0, axis_phase))


def closed_form_gate(manifold: HyperfineManifold, params: GateParams) -> np.ndarray:
    """Magnus closed-form spin propagator at loop closure, (2L x 2L) diagonal.

    U = exp(i (Omega^2 t_g / 4 delta) Jz^2 c_l^2)
        exp(i (Omega^2 t_g / 2 delta) Jz sigma_z c_l c_r)

    with Jz = diag(b). The readout-only c_r^2 phase is a global factor and
    is dropped, exactly as in the corresponding analytic expression.
    """
    check_closure(params, manifold.f_plus, tol=1e-9)
    kappa = params.rabi ** 2 * params.duration / (4.0 * params.detuning)
    b = manifold.b_vector
    sigma = np.array([1.0, -1.0])
    exponent = (kappa * params.c_l ** 2 * b[:, None] ** 2
                + 2.0 * kappa * params.c_l * params.c_r * b[:, None] * sigma[None, :])
    return np.diag(np.exp(1j * exponent.ravel()))


# ---------------------------------------------------------------------------
# numerical integration of the gate with error Hamiltonians
# ---------------------------------------------------------------------------

_C1 = 0.5 - math.sqrt(3.0) / 6.0
_C2 = 0.5 + math.sqrt(3.0) / 6.0
_A1 = 0.25 + math.sqrt(3.0) / 6.0
_A2 = 0.25 - math.sqrt(3.0) / 6.0

_PROPAGATOR_CACHE: dict = {}


def _expm_hermitian(h: np.ndarray, dt: float) -> np.ndarray:
    """exp(-i dt H) for Hermitian H via eigendecomposition (exactly unitary)."""
    w, v = np.linalg.eigh(h)
    return (v * np.exp(-1j * dt * w)) @ v.conj().T


def _evolve_block(spin_coupling: float, diag_shift: float, params: GateParams,
                  errors: ErrorModel, steps: int) -> np.ndarray:
    """Propagator of one (logic, readout) block over [0, t_g].

    H_i(t) = spin_coupling (Omega/2)(a+ e^{i d t} + a e^{-i d t})
             + eps n + diag_shift
    integrated with a 4th-order commutator-free Magnus scheme. The top two
    Fock rows of the from-vacuum column are monitored throughout; states
    with other initial motional content are covered by the post-hoc check
    in integrate_gate.
    """
    m = params.fock_cutoff + 1
    n_op = np.arange(m, dtype=float)
    ladder = np.sqrt(np.arange(1, m, dtype=float))  # <n+1| a+ |n>
    drive = 0.5 * params.rabi * spin_coupling
    static = errors.mode_shift * n_op + diag_shift

    def hamiltonian(t: float) -> np.ndarray:
        h = np.zeros((m, m), dtype=complex)
        phase = drive * np.exp(1j * params.detuning * t)
        h[np.arange(1, m), np.arange(m - 1)] = phase * ladder
        h[np.arange(m - 1), np.arange(1, m)] = np.conj(phase) * ladder
        h[np.arange(m), np.arange(m)] = static
        return h

    dt = params.duration / steps
    u = np.eye(m, dtype=complex)
    for k in range(steps):
        t0 = k * dt
        h1 = hamiltonian(t0 + _C1 * dt)
        h2 = hamiltonian(t0 + _C2 * dt)
        u = _expm_hermitian(_A2 * h1 + _A1 * h2, dt) @ \
            _expm_hermitian(_A1 * h1 + _A2 * h2, dt) @ u
        breach = float(np.sum(np.abs(u[-2:, 0]) ** 2))
        if breach > TRUNCATION_TOL:
            raise FockTruncationError(
                f"top-two Fock population {breach:.2e} exceeds {TRUNCATION_TOL:g}; "
                f"increase fock_cutoff beyond {params.fock_cutoff} "
                f"(try {params.fock_cutoff + 8})"
            )
    return u


def gate_propagator(manifold: HyperfineManifold, params: GateParams,
                    errors: ErrorModel = IDEAL, tol: float = 3e-8,
                    initial_steps: int = 128, max_steps: int = 16384) -> np.ndarray:
    """Gate-window propagator, shape (L, 2, M, M) with M = n_max + 1.

    Step count is doubled until successive propagators agree to ``tol``
    element-wise; with the 4th-order stepper the accepted propagator's true
    error is ~tol/15. Each step is exactly unitary by construction. Results
    are cached per (manifold, params, errors).
    """
    key = (manifold.cache_key(), params, errors)
    cached = _PROPAGATOR_CACHE.get(key)
    if cached is not None:
        return cached

    sigma = (1.0, -1.0)
    blocks = {}
    for b in manifold.b_vector:
        for s in sigma:
            bk = (b * params.c_l + s * params.c_r,
                  errors.zeeman_shift * (b + 0.5 * s))
            blocks.setdefault(bk, None)

    for bk in blocks:
        coupling, shift = bk
        steps = initial_steps
        u_prev = _evolve_block(coupling, shift, params, errors, steps)
        while True:
            steps *= 2
            u_next = _evolve_block(coupling, shift, params, errors, steps)
            if np.max(np.abs(u_next - u_prev)) < tol:
                blocks[bk] = u_next
                break
            if steps >= max_steps:
                raise IntegratorError(
                    f"integrator did not reach tolerance {tol:g} within "
                    f"{max_steps} steps"
                )
            u_prev = u_next

    m = params.fock_cutoff + 1
    out = np.empty((len(manifold), 2, m, m), dtype=complex)
    for i, b in enumerate(manifold.b_vector):
        for j, s in enumerate(sigma):
            out[i, j] = blocks[(b * params.c_l + s * params.c_r,
                                errors.zeeman_shift * (b + 0.5 * s))]
    _PROPAGATOR_CACHE[key] = out
    return out


def integrate_gate(state: SystemState, params: GateParams,
                   errors: ErrorModel = IDEAL) -> SystemState:
    """Evolve a state through the gate window under H_g + H_em + H_eZ."""
    if state.fock_cutoff != params.fock_cutoff:
        raise ValidationError("state and params disagree on fock_cutoff")
    state.check_norm()
    u = gate_propagator(state.manifold, params, errors)
    psi = state.view()
    out = np.einsum("lsmn,lsn->lsm", u, psi)
    result = SystemState(state.manifold, out, state.fock_cutoff)
    top = result.top_fock_population()
    if top > TRUNCATION_TOL:
        raise FockTruncationError(
            f"top-two Fock population {top:.2e} exceeds {TRUNCATION_TOL:g}; "
            f"increase fock_cutoff beyond {params.fock_cutoff} "
            f"(try {params.fock_cutoff + 8})"
        )
    return result


def conditional_rotation_operator(manifold: HyperfineManifold, params: GateParams,
                                  phi_y: float, errors: ErrorModel = IDEAL) -> np.ndarray:
    """Full logic/readout cycle propagator, block-diagonal over logic levels.

    Returns shape (L, 2M, 2M): R_y(phi_y) T_dagger U_g T per level, with U_g
    from the numerical integrator (so error Hamiltonians are included).
    """
    u_gate = gate_propagator(manifold, params, errors)
    m = params.fock_cutoff + 1
    t_pulse = np.kron(PI_HALF_X, np.eye(m))
    after = np.kron(_ry(phi_y) @ _rot_xy(math.pi / 2.0, math.pi), np.eye(m))
    out = np.empty((len(manifold), 2 * m, 2 * m), dtype=complex)
    for i in range(len(manifold)):
        blk = np.zeros((2 * m, 2 * m), dtype=complex)
        blk[:m, :m] = u_gate[i, 0]
        blk[m:, m:] = u_gate[i, 1]
        out[i] = after @ blk @ t_pulse
    return out


def apply_cycle_operator(state: SystemState, cycle: np.ndarray) -> SystemState:
    """Apply a (L, 2M, 2M) cycle operator to a state."""
    m = state.fock_cutoff + 1
    psi = state.view().reshape(len(state.manifold), 2 * m)
    out = np.einsum("lab,lb->la", cycle, psi)
    return SystemState(state.manifold, out, state.fock_cutoff)


def apply_conditional_rotation(state: SystemState, params: GateParams, phi_y: float,
                               errors: ErrorModel = IDEAL) -> SystemState:
    """One U_l(dtheta, phi_y) cycle: pi/2 conjugated gate plus the y rotation."""
    cycle = conditional_rotation_operator(state.manifold, params, phi_y, errors)
    out = apply_cycle_operator(state, cycle)
    top = out.top_fock_population()
    if top > TRUNCATION_TOL:
        raise FockTruncationError(
            f"top-two Fock population {top:.2e} exceeds {TRUNCATION_TOL:g}; "
            f"increase fock_cutoff beyond {params.fock_cutoff}"
        )
    return out


def shelving_pulse(state: SystemState, from_level, to_level,
                   errors: ErrorModel = IDEAL) -> SystemState:
    """Resonant pi pulse between two logic levels with Rabi-angle error.

    Rotation angle pi * (Omega'_s / Omega_s) about x on the two-level
    subspace; identity on all other levels, the readout ion and the motion.
    Population transfer is sin^2(pi ratio / 2).
    """
    i = state.manifold.index_of(from_level)
    j = state.manifold.index_of(to_level)
    if i == j:
        raise ValidationError("shelving requires two distinct levels")
    angle = math.pi * errors.shelving_rabi_ratio
    c, s = math.cos(angle / 2.0), math.sin(angle / 2.0)
    psi = state.view().copy()
    a_i = psi[i].copy()
    a_j = psi[j].copy()
    psi[i] = c * a_i - 1j * s * a_j
    psi[j] = -1j * s * a_i + c * a_j
    return SystemState(state.manifold, psi, state.fock_cutoff)
