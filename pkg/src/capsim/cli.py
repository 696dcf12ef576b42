"""Command-line front end: run attack grids, emit table or JSON reports."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field

from . import __version__
from .attacks import ATTACK_SCENARIOS, CORE_ATTACKS, run_attack
from .errors import CapsimError, ConfigInvalid
from .machine import PROFILES, MitigationSet, build_machine

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2

REPORT_FORMATS = ("table", "json")


@dataclass(frozen=True)
class RunConfig:
    profile: str
    mitigations: tuple[str, ...] = ()
    scenarios: tuple[str, ...] = CORE_ATTACKS
    seed: int = 0
    report_format: str = "table"
    output_path: str | None = None

    def validated(self) -> "RunConfig":
        if self.profile not in PROFILES:
            raise ConfigInvalid(
                f"unknown profile {self.profile!r}; valid: {', '.join(sorted(PROFILES))}"
            )
        MitigationSet.from_names(self.mitigations)
        for name in self.scenarios:
            if name not in ATTACK_SCENARIOS:
                raise ConfigInvalid(
                    f"unknown scenario {name!r}; valid: "
                    f"{', '.join(sorted(ATTACK_SCENARIOS))} or 'all'"
                )
        if self.report_format not in REPORT_FORMATS:
            raise ConfigInvalid(f"unknown report format {self.report_format!r}")
        return self


@dataclass
class MatrixCell:
    scenario: str
    profile: str
    mitigations: tuple[str, ...]
    escaped: bool
    blocked_by: str | None
    secret_recovered: bytes | None
    caps_outside_compartment: int
    evidence: list[str] = field(default_factory=list)

    @property
    def result(self) -> str:
        if self.escaped:
            return "ESCAPED"
        if self.blocked_by:
            return f"BLOCKED:{self.blocked_by}"
        return "NO-ESCAPE"


@dataclass
class MatrixReport:
    tool_version: str
    cells: list[MatrixCell] = field(default_factory=list)


def run(config: RunConfig) -> MatrixReport:
    """Execute every requested cell on a fresh machine.

    An escape or a block is data; only malformed configuration or a
    simulator bug is an error.
    """
    config = config.validated()
    report = MatrixReport(tool_version=__version__)
    overrides = MitigationSet.from_names(config.mitigations)
    for name in sorted(config.scenarios):
        machine = build_machine(
            config.profile, overrides, ATTACK_SCENARIOS[name], seed=config.seed
        )
        outcome = run_attack(name, machine)
        report.cells.append(
            MatrixCell(
                scenario=name,
                profile=config.profile,
                mitigations=tuple(sorted(config.mitigations)),
                escaped=outcome.escaped,
                blocked_by=outcome.blocked_by,
                secret_recovered=outcome.secret_recovered,
                caps_outside_compartment=outcome.caps_outside_compartment,
                evidence=list(outcome.evidence),
            )
        )
    return report


def render_table(report: MatrixReport) -> str:
    """Fixed-width table, one row per cell."""
    headers = ("scenario", "profile", "mitigations", "result", "evidence")
    rows = [
        (
            cell.scenario,
            cell.profile,
            ",".join(cell.mitigations) or "-",
            cell.result,
            str(len(cell.evidence)),
        )
        for cell in report.cells
    ]
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in rows)) if rows else len(headers[i])
        for i in range(len(headers))
    ]
    lines = [
        " | ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "-+-".join("-" * w for w in widths),
    ]
    lines.extend(
        " | ".join(v.ljust(widths[i]) for i, v in enumerate(row)) for row in rows
    )
    return "\n".join(lines)


def _encode_secret(secret: bytes | None) -> str | None:
    if secret is None:
        return None
    try:
        text = secret.decode("utf-8")
    except UnicodeDecodeError:
        return "hex:" + secret.hex()
    if all(ch.isprintable() or ch in "\n\r\t" for ch in text):
        return "text:" + text
    return "hex:" + secret.hex()


def _decode_secret(value: str | None) -> bytes | None:
    if value is None:
        return None
    if value.startswith("hex:"):
        return bytes.fromhex(value[4:])
    if value.startswith("text:"):
        return value[5:].encode("utf-8")
    raise ValueError(f"malformed secret encoding {value!r}")


def render_json(report: MatrixReport) -> str:
    payload = {
        "version": "1",
        "tool_version": report.tool_version,
        "cells": [
            {
                "scenario": c.scenario,
                "profile": c.profile,
                "mitigations": list(c.mitigations),
                "escaped": c.escaped,
                "blocked_by": c.blocked_by,
                "secret_recovered": _encode_secret(c.secret_recovered),
                "caps_outside_compartment": c.caps_outside_compartment,
                "evidence": c.evidence,
            }
            for c in report.cells
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def parse_json(text: str) -> MatrixReport:
    payload = json.loads(text)
    report = MatrixReport(tool_version=payload["tool_version"])
    for c in payload["cells"]:
        report.cells.append(
            MatrixCell(
                scenario=c["scenario"],
                profile=c["profile"],
                mitigations=tuple(c["mitigations"]),
                escaped=c["escaped"],
                blocked_by=c["blocked_by"],
                secret_recovered=_decode_secret(c["secret_recovered"]),
                caps_outside_compartment=c["caps_outside_compartment"],
                evidence=list(c["evidence"]),
            )
        )
    return report


def _load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigInvalid("config file must hold a JSON object")
    return data


def _expand_scenarios(values) -> tuple[str, ...]:
    names: list[str] = []
    for value in values:
        if value == "all":
            names.extend(CORE_ATTACKS)
        else:
            names.append(value)
    # stable de-duplication
    return tuple(dict.fromkeys(names))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capsim",
        description="Run compartment-escape scenarios on a simulated capability machine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run a scenario grid and report outcomes")
    runp.add_argument("--profile", help="platform profile (morello-linux, cheribsd)")
    runp.add_argument(
        "--mitigations",
        help="comma-separated mitigation toggles added on top of profile defaults",
    )
    runp.add_argument(
        "--scenario",
        action="append",
        help="scenario to run (repeatable); 'all' expands to the four core attacks",
    )
    runp.add_argument("--seed", type=int, help="layout randomization seed (default 0)")
    runp.add_argument("--report", choices=REPORT_FORMATS, help="output format")
    runp.add_argument("--out", help="write the report to this path instead of stdout")
    runp.add_argument("--config", help="JSON config file; explicit flags override it")
    return runp and parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    file_cfg = _load_config_file(args.config) if args.config else {}

    profile = args.profile if args.profile is not None else file_cfg.get("profile")
    if profile is None:
        raise ConfigInvalid("a profile is required (--profile or config file)")

    if args.mitigations is not None:
        mitigations = tuple(m for m in args.mitigations.split(",") if m)
    else:
        mitigations = tuple(file_cfg.get("mitigations", ()))

    if args.scenario:
        scenarios = _expand_scenarios(args.scenario)
    else:
        raw = file_cfg.get("scenarios", "all")
        scenarios = _expand_scenarios([raw] if isinstance(raw, str) else raw)

    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
    report = args.report if args.report is not None else file_cfg.get("report", "table")
    out = args.out if args.out is not None else file_cfg.get("out")
    return RunConfig(
        profile=profile,
        mitigations=mitigations,
        scenarios=scenarios,
        seed=seed,
        report_format=report,
        output_path=out,
    )


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _config_from_args(args).validated()
        report = run(config)
        text = (
            render_json(report)
            if config.report_format == "json"
            else render_table(report) + "\n"
        )
        if config.output_path:
            with open(config.output_path, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    except ConfigInvalid as exc:
        print(f"capsim: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapsimError as exc:
        print(f"capsim: internal fault: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
