"""Command-line interface: simulate, validate, plan, dump-manifold.

Configs are flat key = value text with section headers (INI). All
frequencies are given in ordinary Hz and converted to angular frequencies
at parse time; magnetic fields are given in gauss. Unknown keys are
rejected with the offending line number. Exit codes: 0 success, 2 config
error, 3 abort-threshold exceeded.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import re
import sys
from dataclasses import dataclass

from qlsim.atomic import (
    GAUSS_TO_TESLA,
    TWO_PI,
    IonSpec,
    PRESETS,
    ValidationError,
    build_manifold,
    parse_half_integer,
)
from qlsim.montecarlo import SWEEP_AXES, SweepConfig, run_sweep, write_outputs
from qlsim.protocol import (
    BUILTIN_PROTOCOLS,
    GateConfig,
    ProtocolTree,
    UnsplittableError,
    plan_bisection,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTS = 3

CONFIG_KEYS = {
    "ion": {"preset", "nuclear_spin", "hyperfine_hz", "lande_gj",
            "quantization_field_gauss"},
    "gate": {"omega_g_hz", "c_l", "c_r", "fock_cutoff"},
    "protocol": {"name", "file", "vote_orders", "verify", "retry_cap"},
    "sweep": {"axis", "values", "trials", "master_seed", "abort_threshold"},
    "output": {"csv", "metadata"},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    ion: IonSpec
    tree: ProtocolTree
    protocol_name: str
    gate: GateConfig
    axis: str
    values: tuple
    vote_orders: tuple
    verify: str  # off | on | both
    retry_cap: int
    trials: int
    master_seed: int
    abort_threshold: float
    csv_path: str
    metadata_path: str | None


def _line_of(path: str, section: str, key: str | None = None) -> str:
    """Best-effort line number of a key (or section) for error messages."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError:
        return ""
    in_section = False
    for i, line in enumerate(lines, start=1):
        stripped = line.strip()
        if stripped.startswith("["):
            in_section = stripped == f"[{section}]"
            if in_section and key is None:
                return f"line {i}: "
        elif in_section and key is not None and \
                re.match(rf"{re.escape(key)}\s*[=:]", stripped):
            return f"line {i}: "
    return ""


def parse_angle(text: str) -> float:
    """Angles like 'pi', 'pi/2', '3pi/4', '0.25pi' or plain radians."""
    s = text.strip().lower().replace(" ", "")
    m = re.fullmatch(r"(-?\d*\.?\d*)\*?pi(?:/(\d+\.?\d*))?", s)
    if m:
        num = float(m.group(1)) if m.group(1) not in ("", "-") else \
            (-1.0 if m.group(1) == "-" else 1.0)
        den = float(m.group(2)) if m.group(2) else 1.0
        return num * math.pi / den
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"cannot parse angle {text!r}") from None


def _parse_floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def load_config(path: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    for section in parser.sections():
        if section not in CONFIG_KEYS:
            raise ConfigError(f"{_line_of(path, section)}unknown section [{section}]")
        for key in parser[section]:
            if key not in CONFIG_KEYS[section]:
                raise ConfigError(
                    f"{_line_of(path, section, key)}unknown key "
                    f"'{key}' in [{section}]")

    def get(section, key, default=None):
        return parser.get(section, key, fallback=default)

    try:
        field_tesla = float(get("ion", "quantization_field_gauss", "0")) * GAUSS_TO_TESLA
        preset = get("ion", "preset")
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown ion preset {preset!r} "
                                  f"(choose from {sorted(PRESETS)})")
            ion = PRESETS[preset](quantization_field=field_tesla)
        else:
            for key in ("nuclear_spin", "hyperfine_hz", "lande_gj"):
                if get("ion", key) is None:
                    raise ConfigError(f"[ion] needs 'preset' or '{key}'")
            ion = IonSpec(
                nuclear_spin=parse_half_integer(get("ion", "nuclear_spin")),
                hyperfine_constant=TWO_PI * float(get("ion", "hyperfine_hz")),
                lande_gj=float(get("ion", "lande_gj")),
                quantization_field=field_tesla,
            )

        gate = GateConfig(
            omega_g=TWO_PI * float(get("gate", "omega_g_hz", "5000")),
            c_l=float(get("gate", "c_l", repr(2 ** -0.5))),
            c_r=float(get("gate", "c_r", repr(2 ** -0.5))),
            fock_cutoff=int(get("gate", "fock_cutoff", "20")),
        )

        name = get("protocol", "name")
        tree_file = get("protocol", "file")
        if (name is None) == (tree_file is None):
            raise ConfigError("[protocol] needs exactly one of 'name' or 'file'")
        if name is not None:
            if name not in BUILTIN_PROTOCOLS:
                raise ConfigError(f"unknown protocol {name!r} "
                                  f"(choose from {sorted(BUILTIN_PROTOCOLS)})")
            tree = BUILTIN_PROTOCOLS[name]()
            protocol_name = name
        else:
            try:
                with open(tree_file, encoding="utf-8") as fh:
                    tree = ProtocolTree.from_json(fh.read())
            except (OSError, json.JSONDecodeError, KeyError) as exc:
                raise ConfigError(f"cannot load protocol file {tree_file}: {exc}")
            protocol_name = tree_file

        axis = get("sweep", "axis")
        if axis not in SWEEP_AXES:
            raise ConfigError(
                f"{_line_of(path, 'sweep', 'axis')}sweep axis must be one of "
                f"{SWEEP_AXES}, got {axis!r}")
        raw_values = _parse_floats(get("sweep", "values", ""))
        if not raw_values:
            raise ConfigError(f"{_line_of(path, 'sweep', 'values')}"
                              "[sweep] values must be a non-empty list")
        if axis in ("mode_shift", "zeeman"):
            values = tuple(TWO_PI * v for v in raw_values)  # Hz -> rad/s
        else:
            values = raw_values

        verify = get("protocol", "verify", "off").lower()
        if verify not in ("off", "on", "both"):
            raise ConfigError("[protocol] verify must be off, on or both")

        return RunConfig(
            ion=ion,
            tree=tree,
            protocol_name=protocol_name,
            gate=gate,
            axis=axis,
            values=values,
            vote_orders=_parse_ints(get("protocol", "vote_orders", "1")),
            verify=verify,
            retry_cap=int(get("protocol", "retry_cap", "5")),
            trials=int(get("sweep", "trials", "100000")),
            master_seed=int(get("sweep", "master_seed", "0")),
            abort_threshold=float(get("sweep", "abort_threshold", "0.01")),
            csv_path=get("output", "csv", "sweep.csv"),
            metadata_path=get("output", "metadata"),
        )
    except (ValidationError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def cmd_simulate(args) -> int:
    try:
        run = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    verify_flags = {"off": (False,), "on": (True,), "both": (False, True)}[run.verify]
    rows = []
    config = None
    abort_fraction = 0.0
    for flag in verify_flags:
        config = SweepConfig(
            ion=run.ion, tree=run.tree, gate=run.gate, axis=run.axis,
            values=run.values, vote_orders=run.vote_orders,
            verify_shelving=flag, trials=run.trials,
            master_seed=run.master_seed, retry_cap=run.retry_cap,
            protocol_name=run.protocol_name,
        )
        try:
            result = run_sweep(config)
        except (ValidationError, ValueError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        rows.extend(result.rows)
        abort_fraction = max(abort_fraction, result.abort_fraction())

    from qlsim.montecarlo import SweepResult
    merged = SweepResult(rows=tuple(rows), config=config)
    write_outputs(merged, run.csv_path, run.metadata_path)
    print(f"wrote {run.csv_path} ({len(rows)} rows)")
    if abort_fraction > run.abort_threshold:
        print(f"abort fraction {abort_fraction:.3g} exceeds threshold "
              f"{run.abort_threshold:.3g}", file=sys.stderr)
        return EXIT_ABORTS
    return EXIT_OK


def cmd_validate(args) -> int:
    from qlsim.checks import run_all

    results = run_all(fock_cutoff=args.fock_cutoff)
    failures = 0
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status}  {res.name}: {res.detail}")
        failures += not res.passed
    return EXIT_OK if failures == 0 else 1


def cmd_plan(args) -> int:
    try:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown ion preset {args.preset!r}")
        ion = PRESETS[args.preset](
            quantization_field=args.field_gauss * GAUSS_TO_TESLA)
        manifold = build_manifold(ion)
        dthetas = [parse_angle(a) for a in args.dthetas.split(",")]
        phis = [parse_angle(a) for a in args.phis.split(",")]
        settings = [(d, p) for d in dthetas for p in phis]
        tree = plan_bisection(manifold, range(len(manifold)), settings,
                              tol=args.tol)
    except (ConfigError, UnsplittableError, ValidationError) as exc:
        print(f"plan error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(tree.to_json())
    return EXIT_OK


def cmd_dump_manifold(args) -> int:
    try:
        if args.preset is not None:
            if args.preset not in PRESETS:
                raise ConfigError(f"unknown ion preset {args.preset!r}")
            ion = PRESETS[args.preset](
                quantization_field=args.field_gauss * GAUSS_TO_TESLA)
        else:
            if None in (args.nuclear_spin, args.hyperfine_hz, args.lande_gj):
                raise ConfigError(
                    "need --preset or all of --nuclear-spin, --hyperfine-hz, "
                    "--lande-gj")
            ion = IonSpec(
                nuclear_spin=parse_half_integer(args.nuclear_spin),
                hyperfine_constant=TWO_PI * args.hyperfine_hz,
                lande_gj=args.lande_gj,
                quantization_field=args.field_gauss * GAUSS_TO_TESLA,
            )
        manifold = build_manifold(ion)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(manifold.to_json_dict(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qlsim",
        description="Quantum-logic binary subspace measurement simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo sweep from a config")
    p_sim.add_argument("config", help="path to an INI config file")
    p_sim.set_defaults(func=cmd_simulate)

    p_val = sub.add_parser("validate", help="run the built-in oracle suite")
    p_val.add_argument("--fock-cutoff", type=int, default=20)
    p_val.set_defaults(func=cmd_validate)

    p_plan = sub.add_parser("plan", help="search for a measurement tree")
    p_plan.add_argument("--preset", required=True, choices=sorted(PRESETS))
    p_plan.add_argument("--dthetas", default="pi,pi/2,pi/4",
                        help="comma-separated dtheta grid (e.g. pi,pi/2)")
    p_plan.add_argument("--phis", default="0,pi/2",
                        help="comma-separated phi_y grid")
    p_plan.add_argument("--tol", type=float, default=1e-3)
    p_plan.add_argument("--field-gauss", type=float, default=0.0)
    p_plan.set_defaults(func=cmd_plan)

    p_dump = sub.add_parser("dump-manifold", help="emit the level structure as JSON")
    p_dump.add_argument("--preset", choices=sorted(PRESETS))
    p_dump.add_argument("--nuclear-spin")
    p_dump.add_argument("--hyperfine-hz", type=float)
    p_dump.add_argument("--lande-gj", type=float)
    p_dump.add_argument("--field-gauss", type=float, default=0.0)
    p_dump.set_defaults(func=cmd_dump_manifold)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
