"""Measurement decision trees: built-in protocols, a bisection planner,
tree execution with conditional shelving, and majority-vote machinery.

A ProtocolNode holds one conditional-rotation setting. Executing a node
means running the logic/readout cycle ``vote_order`` times (each repetition
is a full gate + measurement + readout reset), taking the majority outcome,
applying that branch's shelving pulse list, and descending. Outcome bit 0
follows the no-flip subspace (A), bit 1 the flipped subspace (B).

Shelving pulse lists act as ordered transpositions on the level populations;
the guessed state G reported in a TrialResult is the physical level occupied
at protocol end, and ``source_level`` maps it back through the inverse of
the shelving applied along the taken path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from itertools import combinations, product

import numpy as np

from qlsim.atomic import (
    TWO_PI,
    HyperfineManifold,
    ValidationError,
    format_half_integer,
    parse_half_integer,
)
from qlsim.dynamics import (
    IDEAL,
    ErrorModel,
    SystemState,
    apply_cycle_operator,
    conditional_rotation_operator,
    gate_params_for,
    rotation_angles,
    shelving_pulse,
    spin_flip_probability,
)
from qlsim.measurement import (
    InvalidSplitError,
    MeasurementRecord,
    measure_readout,
    predict_partition,
    reset_readout,
)

LevelKey = tuple  # (F, m_F)


class UnsplittableError(ValidationError):
    """No settings in the grid separate the remaining levels."""

    def __init__(self, message: str, levels=()):
        super().__init__(message)
        self.levels = frozenset(levels)


class InvalidSettingsError(ValidationError):
    """Leakage-check settings rotate the qubit states."""


@dataclass(frozen=True)
class Leaf:
    level: LevelKey


@dataclass(frozen=True)
class ProtocolNode:
    dtheta: float
    phi_y: float
    branch0: "ProtocolNode | Leaf"
    branch1: "ProtocolNode | Leaf"
    vote_order: int = 1
    shelve0: tuple = ()
    shelve1: tuple = ()
    verify_shelving: bool = False

    def __post_init__(self):
        if self.vote_order < 1 or self.vote_order % 2 == 0:
            raise ValidationError("vote_order must be an odd integer >= 1")


@dataclass(frozen=True)
class ProtocolTree:
    """Root node plus optional unconditional shelving before the first cycle.

    The root is a bare Leaf for the degenerate single-level protocol.
    """

    root: "ProtocolNode | Leaf"
    prelude: tuple = ()

    @property
    def depth(self) -> int:
        def walk(node):
            if isinstance(node, Leaf):
                return 0
            return 1 + max(walk(node.branch0), walk(node.branch1))

        return walk(self.root)

    def with_vote_order(self, n: int) -> "ProtocolTree":
        def walk(node):
            if isinstance(node, Leaf):
                return node
            return replace(node, vote_order=n,
                           branch0=walk(node.branch0), branch1=walk(node.branch1))

        return ProtocolTree(walk(self.root), self.prelude)

    def with_verify(self, verify: bool) -> "ProtocolTree":
        def walk(node):
            if isinstance(node, Leaf):
                return node
            return replace(node, verify_shelving=verify,
                           branch0=walk(node.branch0), branch1=walk(node.branch1))

        return ProtocolTree(walk(self.root), self.prelude)

    def to_json_dict(self) -> dict:
        doc = _node_to_dict(self.root)
        if self.prelude:
            doc["prelude"] = [[_level_str(a), _level_str(b)] for a, b in self.prelude]
        return doc

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_json_dict(), indent=indent)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ProtocolTree":
        prelude = tuple(
            (_parse_level(a), _parse_level(b)) for a, b in doc.get("prelude", [])
        )
        return cls(_node_from_dict(doc), prelude)

    @classmethod
    def from_json(cls, text: str) -> "ProtocolTree":
        return cls.from_json_dict(json.loads(text))


def _level_str(key: LevelKey) -> str:
    return f"{format_half_integer(key[0])},{format_half_integer(key[1])}"


def _parse_level(s: str) -> LevelKey:
    f_str, m_str = s.split(",")
    return (parse_half_integer(f_str), parse_half_integer(m_str))


def _node_to_dict(node) -> dict:
    if isinstance(node, Leaf):
        return {"leaf": _level_str(node.level)}
    return {
        "dtheta": node.dtheta,
        "phi_y": node.phi_y,
        "n": node.vote_order,
        "shelve0": [[_level_str(a), _level_str(b)] for a, b in node.shelve0],
        "shelve1": [[_level_str(a), _level_str(b)] for a, b in node.shelve1],
        "verify": node.verify_shelving,
        "child0": _node_to_dict(node.branch0),
        "child1": _node_to_dict(node.branch1),
    }


def _node_from_dict(doc: dict):
    if "leaf" in doc:
        return Leaf(_parse_level(doc["leaf"]))
    pulses = {
        side: tuple((_parse_level(a), _parse_level(b)) for a, b in doc.get(side, []))
        for side in ("shelve0", "shelve1")
    }
    return ProtocolNode(
        dtheta=float(doc["dtheta"]),
        phi_y=float(doc["phi_y"]),
        vote_order=int(doc.get("n", 1)),
        shelve0=pulses["shelve0"],
        shelve1=pulses["shelve1"],
        verify_shelving=bool(doc.get("verify", False)),
        branch0=_node_from_dict(doc["child0"]),
        branch1=_node_from_dict(doc["child1"]),
    )


def _apply_pulses_to_set(levels: frozenset, pulses) -> frozenset:
    """Track where populations end up when the ordered pulse list acts."""
    current = set(levels)
    for a, b in pulses:
        swapped = set()
        for lv in current:
            if lv == a:
                swapped.add(b)
            elif lv == b:
                swapped.add(a)
            else:
                swapped.add(lv)
        current = swapped
    return frozenset(current)


def _pulse_permutation(pulses) -> dict:
    """Forward level map induced by an ordered list of pi-pulse transpositions."""
    perm: dict = {}

    def image(key):
        return perm.get(key, key)

    for a, b in pulses:
        # compose the transposition (a b) after the current permutation
        new = {}
        keys = set(perm) | {a, b}
        for k in keys:
            v = image(k)
            if v == a:
                new[k] = b
            elif v == b:
                new[k] = a
            else:
                new[k] = v
        perm = new
    return perm


# ---------------------------------------------------------------------------
# built-in protocols
# ---------------------------------------------------------------------------

YB_QUBIT = ((1.0, 0.0), (0.0, 0.0))  # magnetically insensitive |1,0>, |0,0>
YB_SHELVE_CHAIN = (
    ((0.0, 0.0), (1.0, 1.0)),
    ((1.0, 0.0), (0.0, 0.0)),
    ((0.0, 0.0), (1.0, -1.0)),
)


def yb171_init_protocol(vote_order: int = 1, verify_shelving: bool = False) -> ProtocolTree:
    """Depth-2 state preparation over the four 171Yb+ sublevels.

    Cycle 1 at (pi, 0) splits even from odd m_F; on the even outcome the
    population is shelved |0,0> -> |1,1> then |1,0> -> |0,0> -> |1,-1>.
    Cycle 2 at (pi/2, pi/2) separates |1,1> (flip) from |1,-1> (no flip).
    """
    second = ProtocolNode(
        dtheta=math.pi / 2.0,
        phi_y=math.pi / 2.0,
        vote_order=vote_order,
        branch0=Leaf((1.0, -1.0)),
        branch1=Leaf((1.0, 1.0)),
    )
    root = ProtocolNode(
        dtheta=math.pi,
        phi_y=0.0,
        vote_order=vote_order,
        shelve0=YB_SHELVE_CHAIN,
        verify_shelving=verify_shelving,
        branch0=second,
        branch1=second,
    )
    return ProtocolTree(root)


def yb171_readout_protocol(vote_order: int = 1) -> ProtocolTree:
    """Qubit readout of the |1,0>/|0,0> clock qubit.

    Unconditional shelving maps the qubit onto the stretched pair, then a
    single (pi/2, pi/2) cycle distinguishes them: outcome 1 means the qubit
    was |0,0>, outcome 0 means |1,0> (see source_level in the TrialResult).
    """
    node = ProtocolNode(
        dtheta=math.pi / 2.0,
        phi_y=math.pi / 2.0,
        vote_order=vote_order,
        branch0=Leaf((1.0, -1.0)),
        branch1=Leaf((1.0, 1.0)),
    )
    return ProtocolTree(node, prelude=YB_SHELVE_CHAIN)


def ba137_init_protocol(vote_order: int = 1, verify_shelving: bool = False) -> ProtocolTree:
    """Depth-3 state preparation over the eight 137Ba+ sublevels.

    Cycle 1 at (pi, 0) splits even m_F (A) from odd (B). On A, (pi/2, 0)
    separates {|2,0>,|1,0>} (AA) from {|2,+-2>} (AB); on B, (pi/2, pi/2)
    separates {|2,-1>,|1,1>} from {|2,1>,|1,-1>}. Third cycles follow the
    appendix settings; the AA shelving uses two dressed-field pi pulses
    modeled as ideal-topology rotations, and the BB pulse moves
    |2,-1> -> |1,-1> (the only target consistent with the stated outcomes).
    """
    half_pi = math.pi / 2.0
    third_stretch = ProtocolNode(
        dtheta=math.pi / 4.0,
        phi_y=half_pi,
        vote_order=vote_order,
        branch0=Leaf((2.0, -2.0)),
        branch1=Leaf((2.0, 2.0)),
    )
    third_f_minus = ProtocolNode(
        dtheta=half_pi,
        phi_y=half_pi,
        vote_order=vote_order,
        branch0=Leaf((1.0, 1.0)),
        branch1=Leaf((1.0, -1.0)),
    )
    third_shelved_aa = ProtocolNode(
        dtheta=half_pi,
        phi_y=half_pi,
        vote_order=vote_order,
        branch0=Leaf((1.0, 1.0)),
        branch1=Leaf((2.0, 1.0)),
    )
    node_even = ProtocolNode(
        dtheta=half_pi,
        phi_y=0.0,
        vote_order=vote_order,
        shelve0=(((2.0, 0.0), (2.0, 1.0)), ((1.0, 0.0), (1.0, 1.0))),
        verify_shelving=verify_shelving,
        branch0=third_shelved_aa,
        branch1=third_stretch,
    )
    node_odd = ProtocolNode(
        dtheta=half_pi,
        phi_y=half_pi,
        vote_order=vote_order,
        shelve0=(((2.0, -1.0), (1.0, -1.0)),),
        shelve1=(((2.0, 1.0), (1.0, 1.0)),),
        verify_shelving=verify_shelving,
        branch0=third_f_minus,
        branch1=third_f_minus,
    )
    root = ProtocolNode(
        dtheta=math.pi,
        phi_y=0.0,
        vote_order=vote_order,
        branch0=node_even,
        branch1=node_odd,
    )
    return ProtocolTree(root)


BUILTIN_PROTOCOLS = {
    "yb171_init": yb171_init_protocol,
    "yb171_readout": yb171_readout_protocol,
    "ba137_init": ba137_init_protocol,
}


# ---------------------------------------------------------------------------
# tree validation
# ---------------------------------------------------------------------------

def validate_tree(manifold: HyperfineManifold, tree: ProtocolTree,
                  initial_levels=None, tol: float = 1e-6) -> dict:
    """Check every reachable node is a sound binary split; return leaf map.

    Returns {leaf level: set of reachable source subspace keys} for
    diagnostics. Raises on invalid splits, mislabeled leaves, or unsound
    verify_shelving configurations.
    """
    if initial_levels is None:
        subspace = frozenset(lv.key for lv in manifold.levels)
    else:
        subspace = frozenset(manifold.levels[manifold.index_of(lv)].key
                             for lv in initial_levels)
    subspace = _apply_pulses_to_set(subspace, tree.prelude)
    leaves: dict = {}

    def walk(node, reachable: frozenset):
        if isinstance(node, Leaf):
            if reachable != frozenset({node.level}):
                raise ValidationError(
                    f"leaf {_level_str(node.level)} reachable from "
                    f"{sorted(reachable)}: not a single level"
                )
            leaves.setdefault(node.level, set()).add(reachable)
            return
        part = predict_partition(manifold, reachable, node.dtheta, node.phi_y, tol=tol)
        for bit, (side, pulses, child) in enumerate(
            ((part.subspace_a, node.shelve0, node.branch0),
             (part.subspace_b, node.shelve1, node.branch1))
        ):
            if not side:
                continue
            if pulses and node.verify_shelving:
                _check_verify_soundness(manifold, node, bit, side, pulses, tol)
            walk(child, _apply_pulses_to_set(side, pulses))

    walk(tree.root, subspace)
    return leaves


def _check_verify_soundness(manifold, node, bit, side, pulses, tol):
    """Re-running the node's own cycle must flag exactly the residuals.

    Every pulse source must sit on the branch's outcome side and every
    shelved destination on the opposite side, otherwise the flag cannot
    distinguish residual population from legitimate members.
    """
    thetas = rotation_angles(manifold, node.dtheta, node.phi_y)

    def outcome_of(key):
        p = float(spin_flip_probability(thetas[manifold.index_of(key)]))
        if p < tol:
            return 0
        if p > 1.0 - tol:
            return 1
        return None

    for a, _ in pulses:
        if outcome_of(a) != bit:
            raise ValidationError(
                f"verify_shelving unsound: pulse source {_level_str(a)} does "
                f"not measure as outcome {bit} under the node settings"
            )
    for target in _apply_pulses_to_set(side, pulses):
        if outcome_of(target) != 1 - bit:
            raise ValidationError(
                f"verify_shelving unsound: shelved level {_level_str(target)} "
                f"does not measure opposite to outcome {bit}"
            )


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GateConfig:
    """Gate inputs shared by every cycle of a protocol run."""

    omega_g: float = TWO_PI * 5000.0  # rad/s
    c_l: float = 1.0 / math.sqrt(2.0)
    c_r: float = 1.0 / math.sqrt(2.0)
    fock_cutoff: int = 20


@dataclass
class TrialResult:
    true_level: LevelKey | None
    guessed_level: LevelKey | None
    source_level: LevelKey | None
    fidelity: float
    record: MeasurementRecord
    shelving_repeats: int = 0
    aborted: bool = False


_CYCLE_CACHE: dict = {}


def _cycle_for(manifold, gate: GateConfig, dtheta: float, phi_y: float,
               errors: ErrorModel) -> np.ndarray:
    key = (manifold.cache_key(), gate, dtheta, phi_y, errors)
    cycle = _CYCLE_CACHE.get(key)
    if cycle is None:
        params = gate_params_for(dtheta, gate.omega_g, gate.c_l, gate.c_r,
                                 manifold.f_plus, gate.fock_cutoff)
        cycle = conditional_rotation_operator(manifold, params, phi_y, errors)
        _CYCLE_CACHE[key] = cycle
    return cycle


def majority_vote(outcomes) -> int:
    """Modal bit of an odd-length outcome list."""
    outcomes = list(outcomes)
    if len(outcomes) % 2 == 0:
        raise ValidationError("majority vote needs an odd number of outcomes")
    return int(sum(outcomes) * 2 > len(outcomes))


def analytic_vote_error(p: float, n: int) -> float:
    """Binomial tail: probability the order-n majority vote is wrong."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError("p must be in [0, 1]")
    if n < 1 or n % 2 == 0:
        raise ValidationError("n must be an odd integer >= 1")
    return sum(math.comb(n, k) * p ** k * (1.0 - p) ** (n - k)
               for k in range(n // 2 + 1, n + 1))


def run_protocol(manifold: HyperfineManifold, initial, tree: ProtocolTree,
                 gate: GateConfig = GateConfig(), errors: ErrorModel = IDEAL,
                 rng=None, retry_cap: int = 5,
                 flip_probability: float = 0.0) -> TrialResult:
    """Walk the decision tree once and score the final guess.

    ``initial`` is a logic level (index, key or label) or a prepared
    SystemState. Each node runs vote_order full cycles; the guess G is the
    leaf's physical level and the fidelity is its population in the final
    wave function. ``flip_probability`` injects synthetic classical
    misreads of the measurement outcome (diagnostics only).
    """
    if rng is None:
        rng = np.random.default_rng()
    if isinstance(initial, SystemState):
        if initial.fock_cutoff != gate.fock_cutoff:
            raise ValidationError("initial state and gate disagree on fock_cutoff")
        psi = initial.view().copy()
        true_level = None
    else:
        true_level = manifold.levels[manifold.index_of(initial)].key
        psi = np.zeros((len(manifold), 2, gate.fock_cutoff + 1), dtype=complex)
        psi[manifold.index_of(true_level), 0, 0] = 1.0

    record = MeasurementRecord()
    cycle_counter = 0
    path_pulses: list = []
    total_repeats = 0
    two_m = 2 * (gate.fock_cutoff + 1)

    # fused cycle + quantum jump + readout reset on the raw amplitude array
    def one_cycle(node, psi):
        nonlocal cycle_counter
        op = _cycle_for(manifold, gate, node.dtheta, node.phi_y, errors)
        psi = np.einsum("lab,lb->la", op,
                        psi.reshape(len(manifold), two_m)).reshape(psi.shape)
        top = np.sum(np.abs(psi[:, :, -2:]) ** 2)
        if top > 1e-8:
            raise ValidationError(
                f"Fock truncation breached mid-protocol ({top:.2e}); "
                f"increase fock_cutoff beyond {gate.fock_cutoff}"
            )
        p1 = float(np.sum(np.abs(psi[:, 1, :]) ** 2))
        outcome = 1 if rng.random() < p1 else 0
        p_branch = p1 if outcome == 1 else 1.0 - p1
        if p_branch < 1e-300:
            raise ValidationError("projection onto an impossible branch")
        kept = psi[:, outcome, :] / math.sqrt(p_branch)
        psi = np.zeros_like(psi)
        psi[:, 0, :] = kept
        reported = outcome
        if flip_probability > 0.0 and rng.random() < flip_probability:
            reported = 1 - outcome
        record.append(cycle_counter, reported, p1)
        cycle_counter += 1
        return reported, psi

    def pulse(psi, a, b):
        i, j = manifold.index_of(a), manifold.index_of(b)
        angle = math.pi * errors.shelving_rabi_ratio
        c, s = math.cos(angle / 2.0), math.sin(angle / 2.0)
        a_i, a_j = psi[i].copy(), psi[j].copy()
        psi[i] = c * a_i - 1j * s * a_j
        psi[j] = -1j * s * a_i + c * a_j
        return psi

    for a, b in tree.prelude:
        psi = pulse(psi, a, b)
    path_pulses.extend(tree.prelude)

    node = tree.root
    while not isinstance(node, Leaf):
        votes = []
        for _ in range(node.vote_order):
            outcome, psi = one_cycle(node, psi)
            votes.append(outcome)
        bit = majority_vote(votes)
        pulses = node.shelve0 if bit == 0 else node.shelve1

        if pulses:
            for a, b in pulses:
                psi = pulse(psi, a, b)
            path_pulses.extend(pulses)
            if node.verify_shelving:
                repeats = 0
                while True:
                    outcome, psi = one_cycle(node, psi)
                    if outcome != bit:
                        break
                    repeats += 1
                    if repeats > retry_cap:
                        total_repeats += repeats
                        return TrialResult(
                            true_level=true_level, guessed_level=None,
                            source_level=None, fidelity=0.0, record=record,
                            shelving_repeats=total_repeats, aborted=True,
                        )
                    for a, b in pulses:
                        psi = pulse(psi, a, b)
                total_repeats += repeats

        node = node.branch0 if bit == 0 else node.branch1

    guessed = node.level
    fidelity = min(1.0, float(np.sum(np.abs(psi[manifold.index_of(guessed)]) ** 2)))
    perm = _pulse_permutation(path_pulses)
    inverse = {v: k for k, v in perm.items()}
    source = inverse.get(guessed, guessed)
    return TrialResult(
        true_level=true_level, guessed_level=guessed, source_level=source,
        fidelity=fidelity, record=record,
        shelving_repeats=total_repeats, aborted=False,
    )


def enumerate_leaf_probabilities(manifold: HyperfineManifold, initial,
                                 tree: ProtocolTree,
                                 gate: GateConfig = GateConfig(),
                                 errors: ErrorModel = IDEAL) -> dict:
    """Exhaustively enumerate measurement records and their probabilities.

    Returns {source level: probability of ending at the leaf whose inverse
    shelving map is that level}. Votes are taken at order 1. Used to check
    that chained subspace measurements reproduce the initial populations.
    """
    if isinstance(initial, SystemState):
        state = initial.copy()
    else:
        state = SystemState.from_level(manifold, initial, gate.fock_cutoff)
    for a, b in tree.prelude:
        state = shelving_pulse(state, a, b, errors)

    out: dict = {}

    def descend(node, state, weight, pulses):
        if weight < 1e-300:
            return
        if isinstance(node, Leaf):
            perm = _pulse_permutation(pulses)
            inverse = {v: k for k, v in perm.items()}
            source = inverse.get(node.level, node.level)
            out[source] = out.get(source, 0.0) + weight
            return
        op = _cycle_for(manifold, gate, node.dtheta, node.phi_y, errors)
        rotated = apply_cycle_operator(state, op)
        p1 = rotated.readout_excited_population()
        for bit, prob in ((0, 1.0 - p1), (1, p1)):
            if prob < 1e-300:
                continue
            psi = rotated.view().copy()
            psi[:, 1 - bit, :] = 0.0
            psi /= math.sqrt(prob)
            collapsed = reset_readout(
                SystemState(manifold, psi, state.fock_cutoff)
            )
            branch_pulses = node.shelve0 if bit == 0 else node.shelve1
            for a, b in branch_pulses:
                collapsed = shelving_pulse(collapsed, a, b, errors)
            child = node.branch0 if bit == 0 else node.branch1
            descend(child, collapsed, weight * prob, pulses + list(branch_pulses))

    descend(tree.root, state, 1.0, list(tree.prelude))
    return out


# ---------------------------------------------------------------------------
# leakage detection
# ---------------------------------------------------------------------------

def leak_flag_probability(state: SystemState, dtheta: float, phi_y: float) -> float:
    """Analytic flag probability: sum of populations on flipping levels.

    Projector algebra on the exact propagator; levels with a non-binary
    flip probability contribute proportionally.
    """
    thetas = rotation_angles(state.manifold, dtheta, phi_y)
    return float(np.dot(state.logic_populations(), spin_flip_probability(thetas)))


def leakage_check(state: SystemState, qubit_levels, dtheta: float, phi_y: float,
                  gate: GateConfig = GateConfig(), errors: ErrorModel = IDEAL,
                  rng=None, tol: float = 1e-6) -> tuple[bool, SystemState]:
    """One leakage-detection cycle on a magnetically insensitive qubit.

    Outcome 0: no flag; leaked amplitudes are removed and the qubit state
    is preserved up to renormalization. Outcome 1: flag; the state is
    projected onto the leak subspace. Settings must not rotate the qubit
    states (validated).
    """
    if rng is None:
        rng = np.random.default_rng()
    manifold = state.manifold
    thetas = rotation_angles(manifold, dtheta, phi_y)
    for lv in qubit_levels:
        idx = manifold.index_of(lv)
        p = float(spin_flip_probability(thetas[idx]))
        if p > tol:
            raise InvalidSettingsError(
                f"settings rotate qubit level |{manifold.levels[idx].label}> "
                f"(flip probability {p:.3g})"
            )
    op = _cycle_for(manifold, gate, dtheta, phi_y, errors)
    rotated = apply_cycle_operator(state, op)
    outcome, collapsed = measure_readout(rotated, rng)
    return outcome == 1, reset_readout(collapsed)


# ---------------------------------------------------------------------------
# bisection planner
# ---------------------------------------------------------------------------

def default_shelving_rule(a: LevelKey, b: LevelKey) -> bool:
    """Allowed pi-pulse topology: |dm_F| <= 1 and dF in {0, 1}."""
    return a != b and abs(a[0] - b[0]) <= 1.0 + 1e-9 and abs(a[1] - b[1]) <= 1.0 + 1e-9


class _Unplannable(Exception):
    def __init__(self, levels):
        self.levels = frozenset(levels)


def plan_bisection(manifold: HyperfineManifold, initial_levels, settings,
                   tol: float = 1e-3, allowed=default_shelving_rule,
                   max_depth: int | None = None) -> ProtocolTree:
    """Search for a minimal-depth tree of valid binary splits.

    ``settings`` is a sequence of (dtheta, phi_y) candidates. When no
    setting splits a subspace directly, single-hop shelving relocations to
    free levels (per the allowed-transition rule) are tried, fewest pulses
    first, preferring balanced splits throughout. Raises UnsplittableError
    listing the degenerate set when nothing works within the depth budget.
    """
    c0 = frozenset(manifold.levels[manifold.index_of(lv)].key
                   for lv in initial_levels)
    if not c0:
        raise ValidationError("initial level set must be non-empty")
    settings = [(float(d), float(p)) for d, p in settings]
    if max_depth is None:
        max_depth = 2 * len(c0)
    all_keys = sorted(lv.key for lv in manifold.levels)

    def valid_splits(levels: frozenset):
        found = []
        for idx, (dtheta, phi_y) in enumerate(settings):
            try:
                part = predict_partition(manifold, levels, dtheta, phi_y, tol=tol)
            except InvalidSplitError:
                continue
            if part.subspace_a and part.subspace_b:
                found.append((abs(len(part.subspace_a) - len(part.subspace_b)),
                              idx, part))
        return [part for _, _, part in sorted(found, key=lambda t: (t[0], t[1]))]

    def relocations(levels: frozenset):
        yield (), levels
        members = sorted(levels)
        outside = [k for k in all_keys if k not in levels]
        for r in range(1, len(members) + 1):
            for subset in combinations(members, r):
                options = [[t for t in outside if allowed(m, t)] for m in subset]
                if any(not opts for opts in options):
                    continue
                for assignment in product(*options):
                    if len(set(assignment)) != r:
                        continue
                    pulses = tuple(zip(subset, assignment))
                    moved = (levels - set(subset)) | set(assignment)
                    yield pulses, frozenset(moved)

    def plan(levels: frozenset, budget: int):
        if len(levels) == 1:
            return (), Leaf(next(iter(levels)))
        if budget <= 0:
            raise _Unplannable(levels)
        blocked = levels
        for pulses, moved in relocations(levels):
            for part in valid_splits(moved):
                try:
                    sh0, node0 = plan(part.subspace_a, budget - 1)
                    sh1, node1 = plan(part.subspace_b, budget - 1)
                except _Unplannable as exc:
                    blocked = exc.levels
                    continue
                node = ProtocolNode(
                    dtheta=part.settings[0], phi_y=part.settings[1],
                    branch0=node0, branch1=node1,
                    shelve0=sh0, shelve1=sh1,
                )
                return pulses, node
        raise _Unplannable(blocked)

    if len(c0) == 1:
        return ProtocolTree(Leaf(next(iter(c0))))
    min_depth = max(1, math.ceil(math.log2(len(c0))))
    failure = c0
    for depth in range(min_depth, max_depth + 1):
        try:
            prelude, root = plan(c0, depth)
        except _Unplannable as exc:
            failure = exc.levels
            continue
        tree = ProtocolTree(root, prelude)
        validate_tree(manifold, tree, initial_levels=c0, tol=max(tol, 1e-6))
        return tree
    labels = ", ".join(_level_str(k) for k in sorted(failure))
    raise UnsplittableError(
        f"no valid binary split for {{{labels}}} with the given settings grid",
        levels=failure,
    )
