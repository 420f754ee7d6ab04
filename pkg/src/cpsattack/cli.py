"""Command-line entry point: ``cpsattack {run,identify,attack,report,validate}``.

Exit codes: 0 ok, 2 schema, 3 capability, 4 divergence, 5 optimizer failure,
1 anything else.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .errors import CpsAttackError
from .scenario import load_models, load_scenario, report, run


def _out_dir(config, base, many):
    if base is None:
        return Path(config.outputs_dir) if config.outputs_dir else Path("runs") / config.name
    return Path(base) / config.name if many else Path(base)


def _execute(verb, path, seed, out_base, many, models_path):
    """Run one scenario; returns ``(exit_code, message)``.  Safe to call in a worker process."""
    try:
        config = load_scenario(path, seed=seed)
        if verb == "validate":
            attack = config.attack.attack_class.value if config.attack else "none"
            return 0, f"{path}: ok (attack: {attack}, horizon {config.horizon})"
        out = _out_dir(config, out_base, many)
        models = load_models(models_path) if models_path else None
        if verb == "attack" and models is None:
            return 2, f"{path}: the attack verb needs --models"
        stage = "identify" if verb == "identify" else "all"
        if verb in ("identify", "attack") and (config.attack is None or "identification" not in config.attack.parameters):
            return 2, f"{path}: scenario has no identification stage for '{verb}'"
        run(config, out, models=models, stage=stage)
        return 0, f"{path}: wrote {out}"
    except CpsAttackError as exc:
        return exc.exit_code, f"{path}: {type(exc).__name__}: {exc}"


def _scenarios(args):
    paths = list(args.paths) + list(args.scenario or [])
    if not paths:
        raise SystemExit("cpsattack: error: no scenario given (positional path or --scenario)")
    return paths


def _batch(args, verb, models_path=None) -> int:
    paths = _scenarios(args)
    many = len(paths) > 1
    jobs = [(verb, p, args.seed, args.out_dir, many, models_path) for p in paths]
    if args.jobs > 1 and many:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_execute, *zip(*jobs)))
    else:
        results = [_execute(*job) for job in jobs]
    code = 0
    for rc, message in results:
        print(message, file=sys.stdout if rc == 0 else sys.stderr)
        if rc and not code:
            code = rc
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpsattack", description="Networked control loop attack scenarios.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def scenario_args(p, with_out=True):
        p.add_argument("paths", nargs="*", metavar="SCENARIO", help="scenario TOML file(s)")
        p.add_argument("--scenario", action="append", metavar="PATH", help="scenario file (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        if with_out:
            p.add_argument("--out-dir", default=None, help="output directory (per-scenario subdirectories in batch mode)")
            p.add_argument("--jobs", type=int, default=1, help="scenarios to run concurrently")
        else:
            p.set_defaults(out_dir=None, jobs=1)

    scenario_args(sub.add_parser("run", help="baseline run plus the configured attack pipeline"))
    scenario_args(sub.add_parser("identify", help="intelligence stage only; writes models.json"))
    attack = sub.add_parser("attack", help="model-based stage using a supplied model file")
    scenario_args(attack)
    attack.add_argument("--models", required=True, help="models.json from a previous identify run")
    scenario_args(sub.add_parser("validate", help="check scenario files without running them"), with_out=False)

    rep = sub.add_parser("report", help="summarize a finished run directory")
    rep.add_argument("run_dir")
    rep.add_argument("--plot-dir", default=None, help="write x/y column files for plotting")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "report":
        try:
            print(report(args.run_dir, args.plot_dir))
        except CpsAttackError as exc:
            print(f"cpsattack: {exc}", file=sys.stderr)
            return exc.exit_code
        return 0
    return _batch(args, args.verb, getattr(args, "models", None))


if __name__ == "__main__":
    sys.exit(main())
