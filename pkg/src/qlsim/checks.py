"""Built-in oracle suite behind the `validate` subcommand.

Each check pits an implementation path against an independent oracle:
diagonalization vs the closed-form Breit-Rabi energies, the numerical
integrator vs the Magnus closed form, empirical majority votes vs the
binomial tail, and predicted partitions vs brute-force single-cycle
simulation. Checks accept injectable misconfigurations so tests can
confirm they actually fail when they should.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from qlsim.atomic import ba137, breit_rabi_energy, build_manifold, yb171
from qlsim.dynamics import (
    IDEAL,
    FockTruncationError,
    GateParams,
    SystemState,
    apply_cycle_operator,
    closed_form_gate,
    closure_residual,
    conditional_rotation_operator,
    gate_params_for,
    gate_propagator,
)
from qlsim.measurement import InvalidSplitError, predict_partition
from qlsim.montecarlo import vote_error_trials
from qlsim.protocol import analytic_vote_error

GAUSS = 1e-4  # tesla


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_breit_rabi() -> CheckResult:
    """Per-block diagonalization vs the closed-form Breit-Rabi eigenvalues."""
    worst = 0.0
    for preset in (yb171, ba137):
        for gauss in (0.0, 0.1, 1.0, 5.0, 10.0):
            spec = preset(quantization_field=gauss * GAUSS)
            manifold = build_manifold(spec)
            scale = spec.hyperfine_constant * (spec.nuclear_spin + 0.5)
            for lv in manifold.levels:
                closed = breit_rabi_energy(spec, lv.manifold_sign, lv.m_F)
                worst = max(worst, abs(lv.energy - closed) / scale)
    passed = worst < 1e-10
    return CheckResult("breit-rabi-oracle", passed,
                       f"max relative deviation {worst:.3e} (limit 1e-10)")


def check_closed_form_gate(fock_cutoff: int = 20) -> CheckResult:
    """Integrated propagator vs the closed-form spin map at ideal noise."""
    manifold = build_manifold(yb171())
    worst_map = 0.0
    worst_return = 0.0
    try:
        for dtheta in (math.pi / 4, math.pi / 2, math.pi):
            params = gate_params_for(dtheta, 2 * math.pi * 5000.0,
                                     2 ** -0.5, 2 ** -0.5,
                                     manifold.f_plus, fock_cutoff)
            u = gate_propagator(manifold, params, IDEAL)
            induced = u[:, :, 0, 0].ravel()
            kappa = params.rabi ** 2 * params.duration / (4.0 * params.detuning)
            induced = induced * np.exp(-1j * kappa * params.c_r ** 2)
            closed = np.diag(closed_form_gate(manifold, params))
            worst_map = max(worst_map, float(np.max(np.abs(induced - closed))))
            worst_return = max(worst_return,
                               float(np.max(1.0 - np.abs(u[:, :, 0, 0]) ** 2)))
    except FockTruncationError as exc:
        return CheckResult("closed-form-vs-integrated", False, str(exc))
    passed = worst_map < 1e-6 and worst_return < 1e-8
    return CheckResult(
        "closed-form-vs-integrated", passed,
        f"spin-map deviation {worst_map:.3e} (limit 1e-6), "
        f"motion-return deficit {worst_return:.3e} (limit 1e-8)")


def check_gate_closure(params: GateParams | None = None) -> CheckResult:
    """dtheta consistency of gate parameters (injectable for tampering tests)."""
    manifold = build_manifold(yb171())
    if params is not None:
        residual = closure_residual(params, manifold.f_plus)
        return CheckResult("gate-closure", residual < 1e-12,
                           f"closure residual {residual:.3e} (limit 1e-12)")
    worst = 0.0
    for dtheta in (math.pi / 4, math.pi / 2, math.pi, 1.0):
        for f_plus in (1.0, 2.0):
            p = gate_params_for(dtheta, 2 * math.pi * 5000.0, 2 ** -0.5,
                                2 ** -0.5, f_plus)
            worst = max(worst, closure_residual(p, f_plus))
    return CheckResult("gate-closure", worst < 1e-12,
                       f"closure residual {worst:.3e} (limit 1e-12)")


def check_partition_bruteforce() -> CheckResult:
    """predict_partition vs full-state classification of one cycle.

    For every grid setting, evolve each basis level through a cycle and read
    the flip probability; a valid prediction must match, and an invalid-split
    rejection must coincide with an intermediate probability.
    """
    manifold = build_manifold(yb171())
    grid = [(d, p) for d in (math.pi, math.pi / 2, math.pi / 4)
            for p in (0.0, math.pi / 2, math.pi)]
    all_levels = [lv.key for lv in manifold.levels]
    tol = 1e-6
    for dtheta, phi_y in grid:
        params = gate_params_for(dtheta, 2 * math.pi * 5000.0, 2 ** -0.5,
                                 2 ** -0.5, manifold.f_plus, 20)
        cycle = conditional_rotation_operator(manifold, params, phi_y, IDEAL)
        sides = {}
        binary = True
        for key in all_levels:
            state = SystemState.from_level(manifold, key, 20)
            p1 = apply_cycle_operator(state, cycle).readout_excited_population()
            if p1 < tol:
                sides[key] = 0
            elif p1 > 1.0 - tol:
                sides[key] = 1
            else:
                binary = False
        try:
            part = predict_partition(manifold, all_levels, dtheta, phi_y, tol=tol)
        except InvalidSplitError:
            if binary:
                return CheckResult(
                    "partition-bruteforce", False,
                    f"predictor rejected a binary setting ({dtheta}, {phi_y})")
            continue
        if not binary:
            return CheckResult(
                "partition-bruteforce", False,
                f"predictor accepted a non-binary setting ({dtheta}, {phi_y})")
        predicted = {k: 0 for k in part.subspace_a}
        predicted.update({k: 1 for k in part.subspace_b})
        if predicted != sides:
            return CheckResult("partition-bruteforce", False,
                               f"mismatch at ({dtheta}, {phi_y})")
    return CheckResult("partition-bruteforce", True,
                       f"{len(grid)} settings cross-checked")


def check_vote_binomial() -> CheckResult:
    """Empirical majority-vote error vs the binomial tail within 3 sigma."""
    trials = 200_000
    worst = 0.0
    for p in (0.05, 0.2):
        for n in (1, 3, 5):
            expected = analytic_vote_error(p, n)
            observed = vote_error_trials(p, n, trials, seed=17)
            sigma = math.sqrt(expected * (1 - expected) / trials)
            worst = max(worst, abs(observed - expected) / sigma)
    return CheckResult("vote-binomial", worst < 3.0,
                       f"max deviation {worst:.2f} sigma (limit 3)")


def check_fock_truncation(fock_cutoff: int = 20) -> CheckResult:
    """Truncation-breach detection at the configured cutoff."""
    manifold = build_manifold(yb171())
    params = gate_params_for(math.pi, 2 * math.pi * 5000.0, 2 ** -0.5,
                             2 ** -0.5, manifold.f_plus, fock_cutoff)
    try:
        gate_propagator(manifold, params, IDEAL)
    except FockTruncationError as exc:
        return CheckResult("fock-truncation", False, str(exc))
    return CheckResult("fock-truncation", True,
                       f"cutoff {fock_cutoff} holds top-two population < 1e-8")


def run_all(fock_cutoff: int = 20) -> list[CheckResult]:
    return [
        check_breit_rabi(),
        check_gate_closure(),
        check_closed_form_gate(fock_cutoff=fock_cutoff),
        check_partition_bruteforce(),
        check_vote_binomial(),
        check_fock_truncation(fock_cutoff=fock_cutoff),
    ]
