"""Operator entry point: single runs, ablation grids, and trace export.

Exit codes: 0 success, 2 configuration problems (bad file, bad flag value,
unknown export kind), 3 hard backend failure with no fallback allowed.
All outputs land inside --output-dir; reruns with rule or fixture backends
overwrite byte-identically.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .core import MethodKind, ScenarioConfig
from .llm_backend import AuthFailure, FixtureBackend, LlmBackend, LlmConfig
from .metrics import (
    RunSummary,
    aggregate,
    summarize,
    write_aggregate_csv,
    write_runs_csv,
)
from .negotiation import RuleBackend
from .sim import SimTrace, build_intersection, generate_scenario, run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3

_METHOD_ALIASES = {
    "ivd": MethodKind.IVD,
    "ign": MethodKind.IGN,
    "iign": MethodKind.IIGN,
}


class ConfigError(Exception):
    """Anything wrong with the configuration file or flag values."""


def _load_config(path: str | None, overrides: dict) -> tuple[ScenarioConfig, dict]:
    llm_section: dict = {}
    data: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a JSON object")
        llm_section = raw.pop("llm", {})
        if not isinstance(llm_section, dict):
            raise ConfigError("config key 'llm' must be an object")
        data = raw
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = ScenarioConfig.from_dict(data)
        config.validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return config, llm_section


def _parse_method(name: str) -> MethodKind:
    key = name.strip().lower()
    if key not in _METHOD_ALIASES:
        raise ConfigError(
            f"unknown method {name!r}; expected one of {sorted(_METHOD_ALIASES)}"
        )
    return _METHOD_ALIASES[key]


def _build_backend(
    name: str, llm_section: dict, fixture_path: str | None, fallback: bool
):
    if name == "rule":
        return RuleBackend()
    if name == "fixture":
        if fixture_path is None:
            raise ConfigError("--backend fixture requires --fixture-path")
        return FixtureBackend(fixture_path)
    if name == "llm":
        try:
            cfg = LlmConfig.from_dict(llm_section)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad llm config: {exc}") from exc
        if os.environ.get(cfg.api_key_env_var) is None:
            if fallback:
                print(
                    f"warning: {cfg.api_key_env_var} unset; "
                    "falling back to the rule backend",
                    file=sys.stderr,
                )
                return RuleBackend()
            raise AuthFailure(
                f"environment variable {cfg.api_key_env_var} is not set"
            )
        return LlmBackend(cfg)
    raise ConfigError(f"unknown backend {name!r}")


def _trace_name(method: MethodKind, n: int, seed: int) -> str:
    return f"trace_{method.value}_n{n}_seed{seed}.jsonl"


def _execute_run(
    method: MethodKind,
    config: ScenarioConfig,
    backend,
    output_dir: str,
) -> tuple[RunSummary, str]:
    geometry = build_intersection(config)
    scenario = generate_scenario(config, geometry)
    trace = run(method, scenario, backend, config, geometry)
    os.makedirs(output_dir, exist_ok=True)
    trace_path = os.path.join(
        output_dir, _trace_name(method, config.n_vehicles, config.seed)
    )
    trace.write_jsonl(trace_path)
    return summarize(trace), trace_path


def cmd_run(args: argparse.Namespace) -> int:
    config, llm_section = _load_config(
        args.config, {"seed": args.seed, "n_vehicles": args.n_vehicles}
    )
    method = _parse_method(args.method)
    backend = _build_backend(
        args.backend, llm_section, args.fixture_path, args.fallback
    )
    summary, trace_path = _execute_run(method, config, backend, args.output_dir)
    csv_path = os.path.join(
        args.output_dir,
        f"run_{method.value}_n{config.n_vehicles}_seed{config.seed}.csv",
    )
    write_runs_csv([summary], csv_path)
    print(
        f"run method={summary.method} n={summary.n_vehicles} "
        f"seed={summary.seed} collided={str(summary.collided).lower()} "
        f"trace={trace_path}"
    )
    return EXIT_OK


def _experiment_cell(payload: dict) -> dict:
    """One grid cell; runs in a worker process, so everything rebuilds from
    plain data and all errors come back as records, not exceptions."""
    try:
        config = ScenarioConfig.from_dict(payload["config"])
        method = _METHOD_ALIASES[payload["method"]]
        backend = _build_backend(
            payload["backend"],
            payload["llm_section"],
            payload["fixture_path"],
            payload["fallback"],
        )
        summary, trace_path = _execute_run(
            method, config, backend, payload["output_dir"]
        )
        return {"ok": True, "summary": summary, "trace": trace_path}
    except Exception as exc:  # noqa: BLE001 - reported per cell
        return {
            "ok": False,
            "method": payload["method"],
            "n_vehicles": payload["config"].get("n_vehicles"),
            "seed": payload["config"].get("seed"),
            "error": f"{type(exc).__name__}: {exc}",
        }


def _parse_int_list(text: str, flag: str) -> list[int]:
    out: list[int] = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "-" in chunk[1:]:
            lo_s, hi_s = chunk.split("-", 1)
            try:
                lo, hi = int(lo_s), int(hi_s)
            except ValueError as exc:
                raise ConfigError(f"bad {flag} range {chunk!r}") from exc
            if hi < lo:
                raise ConfigError(f"bad {flag} range {chunk!r}")
            out.extend(range(lo, hi + 1))
        else:
            try:
                out.append(int(chunk))
            except ValueError as exc:
                raise ConfigError(f"bad {flag} value {chunk!r}") from exc
    if not out:
        raise ConfigError(f"{flag} must name at least one value")
    return out


def cmd_experiment(args: argparse.Namespace) -> int:
    config, llm_section = _load_config(args.config, {})
    methods = [_parse_method(m) for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise ConfigError("--methods must name at least one method")
    counts = _parse_int_list(args.n_vehicles, "--n-vehicles")
    seeds = _parse_int_list(args.seeds, "--seeds")
    # validate the backend choice up front, before any worker starts
    _build_backend(args.backend, llm_section, args.fixture_path, args.fallback)

    payloads = [
        {
            "config": config.override(n_vehicles=n, seed=seed).to_dict(),
            "method": method.value,
            "backend": args.backend,
            "llm_section": llm_section,
            "fixture_path": args.fixture_path,
            "fallback": args.fallback,
            "output_dir": args.output_dir,
        }
        for method in methods
        for n in counts
        for seed in seeds
    ]
    os.makedirs(args.output_dir, exist_ok=True)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_experiment_cell, payloads))
    else:
        results = [_experiment_cell(p) for p in payloads]

    summaries = [r["summary"] for r in results if r["ok"]]
    failures = [r for r in results if not r["ok"]]
    if summaries:
        write_runs_csv(summaries, os.path.join(args.output_dir, "runs.csv"))
        write_aggregate_csv(
            aggregate(summaries), os.path.join(args.output_dir, "aggregate.csv")
        )
    for rec in failures:
        print(
            f"cell failed: method={rec['method']} n={rec['n_vehicles']} "
            f"seed={rec['seed']}: {rec['error']}",
            file=sys.stderr,
        )
    print(
        f"experiment: {len(summaries)} runs ok, {len(failures)} failed, "
        f"outputs in {args.output_dir}"
    )
    return EXIT_OK if not failures else 1


def _export_influence(trace: SimTrace, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("t,matrix,from_id,to_id,value\n")
        for ev in trace.events("replan"):
            if "influence" not in ev:
                continue
            ids = ev["ids"]
            for label, key in (
                ("direct", "influence"),
                ("normalized", "influence_norm"),
                ("cumulative", "cumulative"),
            ):
                m = ev[key]
                for i, row in enumerate(m):
                    for j, val in enumerate(row):
                        fh.write(
                            f"{ev['t']:.6f},{label},{ids[i]},{ids[j]},"
                            f"{val:.9f}\n"
                        )


def _export_groups(trace: SimTrace, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("t,group_index,vehicle_id\n")
        for ev in trace.events("group_partition"):
            for gi, group in enumerate(ev["groups"]):
                for vid in group:
                    fh.write(f"{ev['t']:.6f},{gi},{vid}\n")


def _export_negotiation(trace: SimTrace, path: str) -> None:
    kinds = {"negotiation_round", "order_committed", "fallback_used"}
    with open(path, "w", encoding="utf-8") as fh:
        for ev in trace.lines:
            if ev["kind"] in kinds:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")


def _export_schedule(trace: SimTrace, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("t,vehicle_id,target_time\n")
        for ev in trace.events("replan"):
            for vid in sorted(ev.get("schedule", {}), key=int):
                fh.write(f"{ev['t']:.6f},{vid},{ev['schedule'][vid]:.6f}\n")


_EXPORTERS = {
    "influence": ("influence.csv", _export_influence),
    "groups": ("groups.csv", _export_groups),
    "negotiation": ("negotiation.jsonl", _export_negotiation),
    "schedule": ("schedule.csv", _export_schedule),
}


def cmd_export(args: argparse.Namespace) -> int:
    if args.what not in _EXPORTERS:
        raise ConfigError(
            f"unknown export kind {args.what!r}; "
            f"expected one of {sorted(_EXPORTERS)}"
        )
    try:
        trace = SimTrace.read_jsonl(args.trace)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read trace: {exc}") from exc
    os.makedirs(args.output_dir, exist_ok=True)
    filename, exporter = _EXPORTERS[args.what]
    out_path = os.path.join(args.output_dir, filename)
    exporter(trace, out_path)
    print(f"export {args.what}: {out_path}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coopcross",
        description=(
            "Cooperative pass-order decision simulator for unsignalized "
            "intersections"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one scenario")
    p_run.add_argument("--config", default=None, help="JSON config file")
    p_run.add_argument("--method", default="iign", help="ivd | ign | iign")
    p_run.add_argument(
        "--backend", default="rule", help="rule | llm | fixture"
    )
    p_run.add_argument("--fixture-path", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--n-vehicles", type=int, default=None)
    p_run.add_argument("--output-dir", default="out")
    p_run.add_argument(
        "--fallback",
        action="store_true",
        help="degrade to the rule backend when the llm backend cannot start",
    )
    p_run.set_defaults(func=cmd_run)

    p_exp = sub.add_parser("experiment", help="run a methods x counts x seeds grid")
    p_exp.add_argument("--config", default=None)
    p_exp.add_argument("--methods", default="ivd,ign,iign")
    p_exp.add_argument("--n-vehicles", default="2,4,8")
    p_exp.add_argument("--seeds", default="0-9")
    p_exp.add_argument("--backend", default="rule")
    p_exp.add_argument("--fixture-path", default=None)
    p_exp.add_argument("--jobs", type=int, default=1)
    p_exp.add_argument("--output-dir", default="out")
    p_exp.add_argument("--fallback", action="store_true")
    p_exp.set_defaults(func=cmd_experiment)

    p_exp_help = "influence | groups | negotiation | schedule"
    p_export = sub.add_parser("export", help="extract artifacts from a trace")
    p_export.add_argument("--trace", required=True)
    p_export.add_argument("--what", required=True, help=p_exp_help)
    p_export.add_argument("--output-dir", default="out")
    p_export.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AuthFailure as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
