"""Command line entry point: ``teamsim run <preset>`` and ``teamsim protocols``."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, TeamsimError
from .harness import PRESET_NAMES, ExperimentPreset, run_preset
from .topology import Protocol, protocol_message_count


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


class _Parser(argparse.ArgumentParser):
    """Usage errors become one JSON line on stderr, like every other error."""

    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="teamsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment preset")
    run.add_argument("preset", choices=PRESET_NAMES)
    run.add_argument("--teams", type=int, default=None, help="number of teams (overrides $TEAMS)")
    run.add_argument("--ranks-per-team", type=int, default=None)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--scale", type=float, default=10.0, help="divide full-size virtual times by this factor")
    run.add_argument("--sharing", type=_on_off, default=None, metavar="on|off")
    run.add_argument("--fair-baseline", action="store_true",
                     help="charge the progression core to the sharing run")
    run.add_argument("--out", default="teamsim-out")
    run.add_argument("--trace", action="store_true", help="also write trace.jsonl")
    run.add_argument("--option", action="append", default=[], metavar="KEY=JSON",
                     help="preset-specific override, e.g. --option steps=20")
    run.add_argument("--preset-file", default=None, help="load a saved preset JSON instead")

    proto = sub.add_parser("protocols", help="message counts of the mirror and parallel protocols")
    proto.add_argument("--m", type=int, required=True, help="application messages")
    proto.add_argument("--r", type=int, required=True, help="replication factor")
    proto.add_argument("--c", type=int, default=0, help="extra consistency messages")
    return parser


def _teams(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("TEAMS")
    if env is None or env == "":
        return 2
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"TEAMS must be an integer, got {env!r}") from None


def _options(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--option expects KEY=VALUE, got {pair!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _cmd_run(args) -> int:
    if args.preset_file:
        with open(args.preset_file) as fh:
            preset = ExperimentPreset.from_json(fh.read())
    else:
        preset = ExperimentPreset(
            name=args.preset,
            teams=_teams(args.teams),
            ranks_per_team=args.ranks_per_team,
            seed=args.seed,
            scale=args.scale,
            sharing=args.sharing,
            fair_baseline=args.fair_baseline,
            trace=args.trace,
            options=_options(args.option),
        )
    res = run_preset(preset, args.out)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "preset.json"), "w") as fh:
        fh.write(preset.to_json())
    print(json.dumps({"preset": preset.name, "out": args.out, "files": sorted(res.files()) + ["preset.json"]}))
    return 0


def _cmd_protocols(args) -> int:
    counts = {p.value: protocol_message_count(args.m, args.r, args.c, p) for p in Protocol}
    print(json.dumps({"m": args.m, "r": args.r, "c": args.c, **counts}, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_protocols(args)
    except (TeamsimError, ValueError, TypeError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
