"""Binary subspace partitions and projective readout measurements.

Outcome-bit convention used throughout: a level with rotation angle
theta = phi_y + 2 F+ dtheta b leaves the readout ion in |0> when
sin^2(theta/2) = 0 (subspace A, outcome 0) and flips it to |1> when
sin^2(theta/2) = 1 (subspace B, outcome 1). This follows the conditional
mapping form of the propagator; see the README for the one place the
source material labels the same partition with inverted bits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from qlsim.atomic import HyperfineManifold, ValidationError
from qlsim.dynamics import SystemState, rotation_angles, spin_flip_probability

IDEAL_SPLIT_TOL = 1e-9


class InvalidSplitError(ValidationError):
    """Settings do not map every level of the subspace onto a definite bit."""

    def __init__(self, message: str, level=None, probability=None):
        super().__init__(message)
        self.level = level
        self.probability = probability


class ImpossibleBranchError(RuntimeError):
    """Projection onto an outcome whose probability is numerically zero."""


@dataclass(frozen=True)
class Partition:
    """A binary split of a level set under one (dtheta, phi_y) setting."""

    subspace_a: frozenset
    subspace_b: frozenset
    settings: tuple[float, float]

    def side(self, level_key) -> int:
        if level_key in self.subspace_a:
            return 0
        if level_key in self.subspace_b:
            return 1
        raise ValidationError(f"level {level_key} not in partition")


def predict_partition(manifold: HyperfineManifold, levels, dtheta: float,
                      phi_y: float, tol: float = IDEAL_SPLIT_TOL) -> Partition:
    """Classify each level of C into A (no flip) or B (flip).

    Raises InvalidSplitError naming the first offending level whose
    spin-flip probability is not within ``tol`` of 0 or 1; planners use
    this as their rejection signal.
    """
    keys = [manifold.levels[manifold.index_of(lv)].key for lv in levels]
    if not keys:
        raise ValidationError("subspace must be non-empty")
    thetas = rotation_angles(manifold, dtheta, phi_y)
    a, b = set(), set()
    for key in keys:
        p = float(spin_flip_probability(thetas[manifold.index_of(key)]))
        if p < tol:
            a.add(key)
        elif p > 1.0 - tol:
            b.add(key)
        else:
            label = manifold.level(key).label
            raise InvalidSplitError(
                f"level |{label}> has spin-flip probability {p:.6g} under "
                f"(dtheta={dtheta:.6g}, phi_y={phi_y:.6g}); not a binary split",
                level=key,
                probability=p,
            )
    return Partition(frozenset(a), frozenset(b), (dtheta, phi_y))


@dataclass
class MeasurementRecord:
    """Audit trail of projective measurements: (cycle, outcome, P0, P1)."""

    entries: list = field(default_factory=list)

    def append(self, cycle: int, outcome: int, p1: float) -> None:
        p1 = float(p1)
        if not -1e-9 <= p1 <= 1.0 + 1e-9:
            raise ValidationError(f"probability {p1} outside [0, 1]")
        self.entries.append((cycle, outcome, 1.0 - p1, p1))

    def outcomes(self) -> list:
        return [entry[1] for entry in self.entries]

    def to_json_lines(self) -> str:
        return "\n".join(
            json.dumps({"cycle": cycle, "outcome": outcome, "p1": p1})
            for cycle, outcome, _, p1 in self.entries
        )

    def __len__(self) -> int:
        return len(self.entries)


def measure_readout(state: SystemState, rng) -> tuple[int, SystemState]:
    """Quantum-jump measurement of the readout ion.

    Draws the outcome from the Born probabilities, applies the projector
    and renormalizes. The readout factor is left in the measured state;
    re-preparation to |0> is a separate operation (``reset_readout``).
    """
    state.check_norm()
    p1 = state.readout_excited_population()
    outcome = 1 if rng.random() < p1 else 0
    psi = state.view().copy()
    psi[:, 1 - outcome, :] = 0.0
    norm_sq = float(np.sum(np.abs(psi) ** 2))
    if norm_sq < 1e-300:
        raise ImpossibleBranchError(
            f"projection onto readout |{outcome}> has probability {norm_sq:.3e}"
        )
    psi /= np.sqrt(norm_sq)
    return outcome, SystemState(state.manifold, psi, state.fock_cutoff)


def reset_readout(state: SystemState) -> SystemState:
    """Ideal re-preparation of the readout ion to |0> after a measurement.

    Assumes the readout factor is pure (true immediately after a
    projective measurement).
    """
    psi = state.view()
    out = np.zeros_like(psi)
    p0 = np.sum(np.abs(psi[:, 0, :]) ** 2)
    p1 = np.sum(np.abs(psi[:, 1, :]) ** 2)
    if p0 > 1e-12 and p1 > 1e-12:
        raise ValidationError("readout factor is entangled; measure before reset")
    out[:, 0, :] = psi[:, 0, :] + psi[:, 1, :]
    return SystemState(state.manifold, out, state.fock_cutoff)
