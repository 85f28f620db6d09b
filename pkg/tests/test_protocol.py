import math

import numpy as np
import pytest

from qlsim.atomic import ValidationError
from qlsim.dynamics import ErrorModel, SystemState, shelving_pulse
from qlsim.protocol import (
    GateConfig,
    Leaf,
    ProtocolNode,
    ProtocolTree,
    UnsplittableError,
    analytic_vote_error,
    ba137_init_protocol,
    enumerate_leaf_probabilities,
    leakage_check,
    leak_flag_probability,
    majority_vote,
    plan_bisection,
    run_protocol,
    validate_tree,
    yb171_init_protocol,
    yb171_readout_protocol,
)
from qlsim.protocol import InvalidSettingsError

BA_GATE = GateConfig(fock_cutoff=30)


def rng_for(i):
    return np.random.default_rng(i)


class TestYbInit:
    def test_all_levels_deterministic(self, yb):
        tree = yb171_init_protocol()
        for i, lv in enumerate(yb.levels):
            r = run_protocol(yb, lv.key, tree, rng=rng_for(i))
            assert r.fidelity == pytest.approx(1.0, abs=1e-9)
            assert r.source_level == lv.key
            assert len(r.record) == 2  # K = 2 logic/readout sequences
            assert not r.aborted

    def test_stretched_state_record(self, yb):
        tree = yb171_init_protocol()
        r = run_protocol(yb, (1, 1), tree, rng=rng_for(0))
        assert r.record.outcomes() == [1, 1]
        assert r.guessed_level == (1.0, 1.0)

    def test_clock_state_shelved(self, yb):
        tree = yb171_init_protocol()
        r = run_protocol(yb, (0, 0), tree, rng=rng_for(0))
        assert r.record.outcomes()[0] == 0  # even m_F branch
        assert r.guessed_level == (1.0, 1.0)  # physical level after shelving
        assert r.source_level == (0.0, 0.0)
        assert r.fidelity == pytest.approx(1.0, abs=1e-9)


class TestBaInit:
    def test_all_levels_deterministic(self, ba):
        tree = ba137_init_protocol()
        for i, lv in enumerate(ba.levels):
            r = run_protocol(ba, lv.key, tree, gate=BA_GATE, rng=rng_for(i))
            assert r.fidelity == pytest.approx(1.0, abs=1e-9)
            assert r.source_level == lv.key
            assert len(r.record) == 3  # K = 3 logic/readout sequences

    def test_stretched_path_is_ab(self, ba):
        # |2,2> goes even (A), then flips (AB), then flips under (pi/4, pi/2)
        tree = ba137_init_protocol()
        r = run_protocol(ba, (2, 2), tree, gate=BA_GATE, rng=rng_for(0))
        assert r.record.outcomes() == [0, 1, 1]
        assert r.guessed_level == (2.0, 2.0)

    def test_ab_subspace_reached_from_stretched(self, ba):
        tree = ba137_init_protocol()
        leaves = validate_tree(ba, tree)
        assert (2.0, 2.0) in leaves and (2.0, -2.0) in leaves


class TestReadoutProtocol:
    def test_basis_states_deterministic(self, yb):
        tree = yb171_readout_protocol()
        r = run_protocol(yb, (0, 0), tree, rng=rng_for(1))
        assert r.source_level == (0.0, 0.0)
        assert r.guessed_level == (1.0, 1.0)
        r = run_protocol(yb, (1, 0), tree, rng=rng_for(1))
        assert r.source_level == (1.0, 0.0)
        assert r.guessed_level == (1.0, -1.0)

    def test_superposition_statistics(self, yb):
        # equal superposition: 50/50 within 3 sigma of the binomial
        tree = yb171_readout_protocol()
        coeffs = np.zeros(4)
        coeffs[yb.index_of((0, 0))] = 2 ** -0.5
        coeffs[yb.index_of((1, 0))] = 2 ** -0.5
        state = SystemState.from_logic_amplitudes(yb, coeffs, 20)
        trials = 1200
        ones = 0
        for i in range(trials):
            r = run_protocol(yb, state, tree, rng=rng_for(i))
            ones += r.source_level == (0.0, 0.0)
        sigma = math.sqrt(trials * 0.25)
        assert abs(ones - trials / 2) < 3 * sigma


class TestChainedProbability:
    def test_exhaustive_enumeration_matches_born_rule(self, yb):
        tree = yb171_init_protocol()
        rng = np.random.default_rng(9)
        for _ in range(6):
            coeffs = rng.normal(size=4) + 1j * rng.normal(size=4)
            coeffs /= np.linalg.norm(coeffs)
            state = SystemState.from_logic_amplitudes(yb, coeffs, 20)
            probs = enumerate_leaf_probabilities(yb, state, tree)
            assert sum(probs.values()) == pytest.approx(1.0, abs=1e-9)
            for i, lv in enumerate(yb.levels):
                assert probs[lv.key] == pytest.approx(abs(coeffs[i]) ** 2, abs=1e-9)

    def test_enumeration_matches_for_ba(self, ba):
        tree = ba137_init_protocol()
        rng = np.random.default_rng(10)
        coeffs = rng.normal(size=8) + 1j * rng.normal(size=8)
        coeffs /= np.linalg.norm(coeffs)
        state = SystemState.from_logic_amplitudes(ba, coeffs, 30)
        probs = enumerate_leaf_probabilities(ba, state, tree, gate=BA_GATE)
        for i, lv in enumerate(ba.levels):
            assert probs[lv.key] == pytest.approx(abs(coeffs[i]) ** 2, abs=1e-9)


class TestMajorityVote:
    def test_modal_bit(self):
        assert majority_vote([0, 1, 0]) == 0
        assert majority_vote([1, 1, 0]) == 1
        assert majority_vote([1]) == 1
        with pytest.raises(ValidationError):
            majority_vote([0, 1])

    def test_analytic_order_one_is_identity(self):
        for p in (0.0, 0.3, 1.0):
            assert analytic_vote_error(p, 1) == pytest.approx(p, abs=1e-15)

    def test_analytic_example(self):
        # binomial tail at p=0.1, n=3: 3 p^2 (1-p) + p^3 = 0.028
        assert analytic_vote_error(0.1, 3) == pytest.approx(0.028, abs=1e-12)

    def test_paper_small_p_approximation(self):
        # 3 p^2 within 15% for p <= 0.03
        for p in (0.01, 0.03):
            exact = analytic_vote_error(p, 3)
            assert abs(exact - 3 * p ** 2) / (3 * p ** 2) < 0.15

    def test_symmetry_at_half(self):
        for n in (1, 3, 5, 7):
            assert analytic_vote_error(0.5, n) == pytest.approx(0.5, abs=1e-12)

    def test_vote_scaling_slope(self):
        # log-log slope of the tail vs p approaches (n+1)/2
        for n in (3, 5):
            p1, p2 = 1e-3, 1e-4
            slope = (math.log(analytic_vote_error(p1, n))
                     - math.log(analytic_vote_error(p2, n))) / math.log(p1 / p2)
            assert slope == pytest.approx((n + 1) / 2, rel=0.05)


class TestVoteInProtocol:
    def test_flip_injection_vote_suppression(self, yb):
        # synthetic misreads: trial error = 1 - (1 - v)^2 with v the
        # binomial vote error; n=3 beats n=1 by roughly 1/(3p)
        p = 0.08
        trials = 1500
        means = {}
        for n in (1, 3):
            tree = yb171_init_protocol(vote_order=n)
            errors = 0.0
            for i in range(trials):
                r = run_protocol(yb, i % 4, tree, rng=rng_for(i),
                                 flip_probability=p)
                errors += 1.0 - r.fidelity
            means[n] = errors / trials
        for n in (1, 3):
            v = analytic_vote_error(p, n)
            expected = 1.0 - (1.0 - v) ** 2
            sigma = math.sqrt(expected * (1 - expected) / trials)
            assert abs(means[n] - expected) < 4 * sigma
        # theoretical ratio at p = 0.08 is ~4.3
        assert means[3] < means[1] / 2.5


class TestShelvingVerification:
    def test_flag_and_repeat_residual_scaling(self, yb):
        # one verify-repeat round leaves cos^4(pi r / 2) in the old subspace
        # versus cos^2(pi r / 2) without (population bookkeeping)
        ratio = 0.9
        errors = ErrorModel(shelving_rabi_ratio=ratio)
        c2 = math.cos(math.pi * ratio / 2.0) ** 2
        state = SystemState.from_level(yb, (0, 0), 20)
        once = shelving_pulse(state, (0, 0), (1, 1), errors)
        residual_1 = once.level_population((0, 0))
        assert residual_1 == pytest.approx(c2, rel=1e-9)
        # flagged verification collapses onto the residual, then repeat
        flagged = SystemState.from_level(yb, (0, 0), 20)
        repeated = shelving_pulse(flagged, (0, 0), (1, 1), errors)
        residual_2 = residual_1 * repeated.level_population((0, 0))
        assert residual_2 == pytest.approx(c2 ** 2, rel=1e-9)

    def test_verification_reduces_error(self, yb):
        errors = ErrorModel(shelving_rabi_ratio=0.9)
        trials = 800
        means = {}
        for verify in (False, True):
            tree = yb171_init_protocol(verify_shelving=verify)
            total = 0.0
            for i in range(trials):
                r = run_protocol(yb, i % 4, tree, errors=errors, rng=rng_for(i))
                total += 1.0 - r.fidelity
            means[verify] = total / trials
        assert means[False] > 5e-3
        assert means[True] < means[False] / 10

    def test_retry_cap_aborts(self, yb):
        # zero Rabi strength never moves population: every verify flags
        tree = yb171_init_protocol(verify_shelving=True)
        errors = ErrorModel(shelving_rabi_ratio=0.0)
        r = run_protocol(yb, (0, 0), tree, errors=errors, rng=rng_for(0),
                         retry_cap=5)
        assert r.aborted
        assert r.guessed_level is None
        assert r.fidelity == 0.0
        assert r.shelving_repeats == 6


class TestLeakageCheck:
    def test_no_leak_preserves_qubit(self, yb):
        coeffs = np.zeros(4, dtype=complex)
        coeffs[yb.index_of((1, 0))] = 2 ** -0.5
        coeffs[yb.index_of((0, 0))] = 1j * 2 ** -0.5
        state = SystemState.from_logic_amplitudes(yb, coeffs, 20)
        assert leak_flag_probability(state, math.pi, 0.0) == pytest.approx(0, abs=1e-12)
        flag, after = leakage_check(state, [(1, 0), (0, 0)], math.pi, 0.0,
                                    rng=rng_for(0))
        assert not flag
        rho = np.einsum("lrm,krm->lk", after.view(), after.view().conj())
        fidelity = float(np.real(coeffs.conj() @ rho @ coeffs))
        assert fidelity == pytest.approx(1.0, abs=1e-12)

    def test_flag_probability_equals_leak_population(self, yb):
        eps = 0.1
        c = math.sqrt((1 - eps ** 2) / 2)
        coeffs = np.zeros(4, dtype=complex)
        coeffs[yb.index_of((1, 0))] = c
        coeffs[yb.index_of((0, 0))] = c
        coeffs[yb.index_of((1, 1))] = eps
        state = SystemState.from_logic_amplitudes(yb, coeffs, 20)
        assert leak_flag_probability(state, math.pi, 0.0) == \
            pytest.approx(eps ** 2, abs=1e-12)

    def test_conditional_no_flag_fidelity(self, yb):
        eps = 0.1
        c = math.sqrt((1 - eps ** 2) / 2)
        coeffs = np.zeros(4, dtype=complex)
        coeffs[yb.index_of((1, 0))] = c
        coeffs[yb.index_of((0, 0))] = c * np.exp(0.7j)
        coeffs[yb.index_of((1, -1))] = eps
        state = SystemState.from_logic_amplitudes(yb, coeffs, 20)
        rng = np.random.default_rng(4)  # no-flag draw
        flag, after = leakage_check(state, [(1, 0), (0, 0)], math.pi, 0.0, rng=rng)
        assert not flag
        qubit = np.zeros(4, dtype=complex)
        qubit[yb.index_of((1, 0))] = c
        qubit[yb.index_of((0, 0))] = c * np.exp(0.7j)
        qubit /= np.linalg.norm(qubit)
        rho = np.einsum("lrm,krm->lk", after.view(), after.view().conj())
        fidelity = float(np.real(qubit.conj() @ rho @ qubit))
        assert fidelity == pytest.approx(1.0, abs=1e-12)
        assert after.level_population((1, -1)) == pytest.approx(0.0, abs=1e-12)

    def test_incoherent_leak_flag_probability(self, yb):
        # flag probability is phase independent: incoherent leaks flag too
        eps = 0.2
        c = math.sqrt((1 - eps ** 2) / 2)
        rng = np.random.default_rng(8)
        probs = []
        for _ in range(6):
            coeffs = np.zeros(4, dtype=complex)
            coeffs[yb.index_of((1, 0))] = c
            coeffs[yb.index_of((0, 0))] = c
            coeffs[yb.index_of((1, 1))] = eps * np.exp(2j * math.pi * rng.random())
            state = SystemState.from_logic_amplitudes(yb, coeffs, 20)
            probs.append(leak_flag_probability(state, math.pi, 0.0))
        assert np.ptp(probs) < 1e-12
        assert probs[0] == pytest.approx(eps ** 2, abs=1e-12)

    def test_rotating_settings_rejected(self, yb):
        state = SystemState.from_level(yb, (1, 0), 20)
        with pytest.raises(InvalidSettingsError):
            leakage_check(state, [(1, 0), (1, 1)], math.pi, 0.0, rng=rng_for(0))


class TestSerialization:
    def test_round_trip(self, yb):
        for builder in (yb171_init_protocol, yb171_readout_protocol,
                        ba137_init_protocol):
            tree = builder()
            loaded = ProtocolTree.from_json(tree.to_json())
            assert loaded == tree

    def test_prelude_serialized(self):
        tree = yb171_readout_protocol()
        doc = tree.to_json_dict()
        assert doc["prelude"][0] == ["0,0", "1,1"]

    def test_vote_order_rewrite(self, yb):
        tree = yb171_init_protocol().with_vote_order(3)
        assert tree.root.vote_order == 3
        assert tree.root.branch0.vote_order == 3
        with pytest.raises(ValidationError):
            yb171_init_protocol(vote_order=2)


class TestValidateTree:
    def test_builtin_trees_sound(self, yb, ba):
        validate_tree(yb, yb171_init_protocol())
        validate_tree(ba, ba137_init_protocol())
        validate_tree(yb, yb171_readout_protocol(),
                      initial_levels=[(1, 0), (0, 0)])

    def test_depth_bounds_leaves(self, yb, ba):
        for manifold, tree in ((yb, yb171_init_protocol()),
                               (ba, ba137_init_protocol())):
            leaves = validate_tree(manifold, tree)
            assert len(leaves) <= 2 ** tree.depth

    def test_mislabeled_leaf_caught(self, yb):
        node = ProtocolNode(
            dtheta=math.pi, phi_y=0.0,
            branch0=Leaf((1.0, 1.0)),   # wrong: outcome 0 holds {00, 10}
            branch1=Leaf((1.0, -1.0)),
        )
        with pytest.raises(ValidationError):
            validate_tree(yb, ProtocolTree(node))

    def test_unsound_verify_rejected(self, ba):
        # re-running the node's own cycle cannot distinguish the BA/BB
        # residuals from legitimate members
        with pytest.raises(ValidationError, match="verify_shelving unsound"):
            validate_tree(ba, ba137_init_protocol(verify_shelving=True))


class TestPlanner:
    GRID = [(math.pi, 0.0), (math.pi, math.pi / 2),
            (math.pi / 2, 0.0), (math.pi / 2, math.pi / 2)]

    def test_yb_plan_matches_paper_structure(self, yb):
        tree = plan_bisection(yb, range(4), self.GRID)
        assert tree.depth == 2
        # root split must be the even/odd m_F partition
        assert {tree.root.dtheta, tree.root.phi_y} == {math.pi, 0.0}
        leaves = validate_tree(yb, tree)
        assert len(leaves) >= 2

    def test_yb_plan_identifies_all_levels(self, yb):
        tree = plan_bisection(yb, range(4), self.GRID)
        for i, lv in enumerate(yb.levels):
            r = run_protocol(yb, lv.key, tree, rng=rng_for(i))
            assert r.fidelity == pytest.approx(1.0, abs=1e-9)
            assert r.source_level == lv.key

    def test_ba_depth_three_exists(self, ba):
        grid = self.GRID + [(math.pi / 4, math.pi / 2), (math.pi / 4, 0.0)]
        tree = plan_bisection(ba, range(8), grid)
        assert tree.depth == 3
        for i, lv in enumerate(ba.levels):
            r = run_protocol(ba, lv.key, tree, gate=BA_GATE, rng=rng_for(i))
            assert r.fidelity == pytest.approx(1.0, abs=1e-9)
            assert r.source_level == lv.key

    def test_single_level_is_bare_leaf(self, yb):
        tree = plan_bisection(yb, [(1, 1)], self.GRID)
        assert isinstance(tree.root, Leaf)
        assert tree.root.level == (1.0, 1.0)

    def test_degenerate_grid_unsplittable(self, yb):
        with pytest.raises(UnsplittableError) as excinfo:
            plan_bisection(yb, range(4), [(0.0, 0.0)])
        assert len(excinfo.value.levels) >= 2

    def test_clock_pair_needs_shelving(self, yb):
        # {|0,0>, |1,0>} share theta for every setting; the planner must
        # relocate at least one of them
        tree = plan_bisection(yb, [(0, 0), (1, 0)], self.GRID)
        pulses = list(tree.prelude)

        def collect(node):
            if isinstance(node, Leaf):
                return
            pulses.extend(node.shelve0)
            pulses.extend(node.shelve1)
            collect(node.branch0)
            collect(node.branch1)

        collect(tree.root)
        assert pulses
        for i, key in enumerate(((0.0, 0.0), (1.0, 0.0))):
            r = run_protocol(yb, key, tree, rng=rng_for(i))
            assert r.source_level == key
            assert r.fidelity == pytest.approx(1.0, abs=1e-9)
