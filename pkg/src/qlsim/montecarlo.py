"""Seeded trial ensembles over error-parameter sweeps.

Every trial draws its random stream from
SeedSequence(master_seed, spawn_key=(point_index, vote_index, trial_index))
feeding a counter-based Philox generator, so a sweep is bit-reproducible
regardless of execution order or worker count. Sweep points may run in
parallel worker processes (QND_SIM_THREADS, 0 = auto); aggregation is by
fixed index order either way.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from qlsim.atomic import HyperfineManifold, IonSpec, ValidationError, build_manifold
from qlsim.dynamics import IDEAL, ErrorModel
from qlsim.protocol import GateConfig, ProtocolTree, run_protocol, validate_tree

SWEEP_AXES = ("mode_shift", "zeeman", "shelving_ratio", "flip")

CSV_HEADER = ("sweep_value", "vote_order", "mean_error", "std_error",
              "aborts", "trials", "verify")


@dataclass(frozen=True)
class SweepConfig:
    """One resolved sweep: protocol, gate inputs, error axis and sampling."""

    ion: IonSpec
    tree: ProtocolTree
    gate: GateConfig
    axis: str
    values: tuple
    vote_orders: tuple = (1,)
    verify_shelving: bool = False
    trials: int = 100_000
    master_seed: int = 0
    retry_cap: int = 5
    protocol_name: str = "custom"

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ValidationError(f"sweep axis must be one of {SWEEP_AXES}")
        if self.trials < 1:
            raise ValidationError("trials must be >= 1")
        if not self.values:
            raise ValidationError("sweep needs at least one value")
        if not all(np.isfinite(v) for v in self.values):
            raise ValidationError("sweep values must be finite")
        for n in self.vote_orders:
            if n < 1 or n % 2 == 0:
                raise ValidationError("vote orders must be odd integers >= 1")

    def error_model(self, value: float) -> ErrorModel:
        if self.axis == "mode_shift":
            return ErrorModel(mode_shift=value)
        if self.axis == "zeeman":
            return ErrorModel(zeeman_shift=value)
        if self.axis == "shelving_ratio":
            return ErrorModel(shelving_rabi_ratio=value)
        return IDEAL  # flip axis: synthetic outcome misreads, gate ideal

    def flip_probability(self, value: float) -> float:
        return value if self.axis == "flip" else 0.0

    def describe(self) -> dict:
        return {
            "protocol": self.protocol_name,
            "ion": {
                "nuclear_spin": self.ion.nuclear_spin,
                "hyperfine_constant_rad_s": self.ion.hyperfine_constant,
                "lande_gj": self.ion.lande_gj,
                "quantization_field_tesla": self.ion.quantization_field,
            },
            "gate": dataclasses.asdict(self.gate),
            "axis": self.axis,
            "values": list(self.values),
            "vote_orders": list(self.vote_orders),
            "verify_shelving": self.verify_shelving,
            "trials": self.trials,
            "master_seed": self.master_seed,
            "retry_cap": self.retry_cap,
        }


@dataclass(frozen=True)
class SweepRow:
    sweep_value: float
    vote_order: int
    mean_error: float
    std_error: float
    aborts: int
    trials: int
    verify: bool


@dataclass(frozen=True)
class SweepResult:
    rows: tuple
    config: SweepConfig

    def row_for(self, value: float, vote_order: int) -> SweepRow:
        for row in self.rows:
            if row.sweep_value == value and row.vote_order == vote_order:
                return row
        raise KeyError((value, vote_order))

    def to_csv(self) -> str:
        lines = [",".join(CSV_HEADER)]
        for r in self.rows:
            lines.append(",".join([
                repr(r.sweep_value), str(r.vote_order), repr(r.mean_error),
                repr(r.std_error), str(r.aborts), str(r.trials),
                "on" if r.verify else "off",
            ]))
        return "\n".join(lines) + "\n"

    def abort_fraction(self) -> float:
        total = sum(r.trials for r in self.rows)
        return sum(r.aborts for r in self.rows) / total if total else 0.0


def sample_initial_level(manifold: HyperfineManifold, rng) -> int:
    """Uniform draw over the manifold's sublevels; returns the level index."""
    return int(rng.integers(len(manifold)))


def _trial_rng(master_seed: int, point_index: int, vote_index: int,
               trial_index: int) -> np.random.Generator:
    seq = np.random.SeedSequence(master_seed,
                                 spawn_key=(point_index, vote_index, trial_index))
    return np.random.Generator(np.random.Philox(seq))


def _run_point(config: SweepConfig, manifold: HyperfineManifold,
               point_index: int, vote_index: int) -> SweepRow:
    value = config.values[point_index]
    n = config.vote_orders[vote_index]
    tree = config.tree.with_vote_order(n).with_verify(config.verify_shelving)
    errors = config.error_model(value)
    flip_p = config.flip_probability(value)

    errs = np.empty(config.trials)
    aborts = 0
    for t in range(config.trials):
        rng = _trial_rng(config.master_seed, point_index, vote_index, t)
        level = sample_initial_level(manifold, rng)
        result = run_protocol(manifold, level, tree, gate=config.gate,
                              errors=errors, rng=rng,
                              retry_cap=config.retry_cap,
                              flip_probability=flip_p)
        errs[t] = 1.0 - result.fidelity
        aborts += result.aborted

    mean = float(np.mean(errs))
    std_error = float(np.std(errs, ddof=1) / np.sqrt(config.trials)) \
        if config.trials > 1 else 0.0
    return SweepRow(sweep_value=value, vote_order=n, mean_error=mean,
                    std_error=std_error, aborts=aborts, trials=config.trials,
                    verify=config.verify_shelving)


def _worker(args) -> tuple:
    config, point_index, vote_index = args
    manifold = build_manifold(config.ion)
    row = _run_point(config, manifold, point_index, vote_index)
    return (point_index, vote_index), row


def worker_count(n_units: int) -> int:
    raw = os.environ.get("QND_SIM_THREADS", "0")
    try:
        requested = int(raw)
    except ValueError:
        raise ValidationError(f"QND_SIM_THREADS must be an integer, got {raw!r}")
    if requested < 0:
        raise ValidationError("QND_SIM_THREADS must be >= 0")
    if requested == 0:
        requested = os.cpu_count() or 1
    return max(1, min(requested, n_units))


def run_sweep(config: SweepConfig) -> SweepResult:
    """Run all (sweep value, vote order) points; deterministic output.

    Identical configs produce bit-identical results: per-trial seeds are
    derived from (master_seed, point, vote, trial) and rows are assembled
    in fixed index order independent of scheduling.
    """
    manifold = build_manifold(config.ion)
    validate_tree(manifold, config.tree)
    units = [(p, v) for p in range(len(config.values))
             for v in range(len(config.vote_orders))]
    workers = worker_count(len(units))

    results: dict = {}
    if workers == 1 or len(units) == 1:
        for p, v in units:
            results[(p, v)] = _run_point(config, manifold, p, v)
    else:
        jobs = [(config, p, v) for p, v in units]
        ctx = None
        if sys.platform.startswith("linux"):
            import multiprocessing
            ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            for key, row in pool.map(_worker, jobs):
                results[key] = row

    rows = tuple(results[unit] for unit in units)
    return SweepResult(rows=rows, config=config)


def write_outputs(result: SweepResult, csv_path: str,
                  metadata_path: str | None = None) -> None:
    """Emit the CSV rows plus a JSON sidecar with the resolved config."""
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result.to_csv())
    if metadata_path is None:
        metadata_path = csv_path + ".meta.json"
    with open(metadata_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(result.config.describe(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def vote_error_trials(p: float, n: int, trials: int, seed: int = 0) -> float:
    """Empirical majority-vote error under independent synthetic flips.

    Each trial draws n bits that are wrong with probability p and takes the
    majority; returns the fraction of wrong votes. Oracle partner of
    ``analytic_vote_error``.
    """
    if not 0.0 <= p <= 1.0:
        raise ValidationError("p must be in [0, 1]")
    if n < 1 or n % 2 == 0:
        raise ValidationError("n must be an odd integer >= 1")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    flips = rng.random((trials, n)) < p
    wrong = np.sum(flips, axis=1) * 2 > n
    return float(np.mean(wrong))
