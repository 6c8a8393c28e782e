"""Command-line experiment drivers.

Exit codes: 0 success, 2 configuration error, 3 too many aborted runs,
4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import verify
from .channel import ber_bfsk, packet_success_prob
from .sim.config import ConfigError, ScenarioConfig, load_scenario
from .sim.engine import ExperimentFailed, MonteCarloResult, build_world, channel_params, run_monte_carlo
from .sim.metrics import change_rate, energy_change_rate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EXPERIMENT = 3
EXIT_VERIFY = 4


def summary_schema() -> dict:
    return json.loads(resources.files("fadetrack").joinpath("scenarios/summary.schema.json").read_text())


def _clean(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats as null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _dump_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _header(command: str, cfg: ScenarioConfig) -> list[str]:
    return [f"# fadetrack {command}", f"# master_seed={cfg.master_seed}", f"# config={cfg.to_json()}"]


def _write_csv(path: Path, header: list[str], columns: list[str], rows) -> None:
    buf = io.StringIO()
    for line in header:
        buf.write(line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ""
    if isinstance(v, np.integer):
        return int(v)
    return v


# -- simulate / compare ------------------------------------------------------


def write_experiment(out: Path, command: str, cfg: ScenarioConfig, mc: MonteCarloResult, fmt: str) -> dict:
    variants = cfg.filter.variants
    header = _header(command, cfg)
    K = cfg.duration_steps
    summary = {
        "command": command,
        "master_seed": cfg.master_seed,
        "config": cfg.to_dict(),
        "variants": {v: mc.reports[v].summary() for v in variants},
        "failures": [f.as_dict() for v in variants for f in mc.failures[v]],
    }
    if fmt in ("json", "both"):
        summary["series"] = {
            v: {"rmse_position_m": mc.reports[v].rmse_p, "rmse_velocity_m_s": mc.reports[v].rmse_v} for v in variants
        }
    if fmt in ("csv", "both"):
        for name, attr in (("rmse_position.csv", "rmse_p"), ("rmse_velocity.csv", "rmse_v")):
            cols = [getattr(mc.reports[v], attr) for v in variants]
            rows = ([k] + [c[k] if len(c) else float("nan") for c in cols] for k in range(K + 1))
            _write_csv(out / name, header, ["step"] + list(variants), rows)
        _write_trajectory(out / "trajectory.csv", header, mc, variants, K)
        _write_telemetry(out / "telemetry", header, mc, variants)
    _dump_summary(out / "summary.json", summary)
    return summary


def _dump_summary(path: Path, summary: dict) -> None:
    clean = _clean(summary)
    jsonschema.validate(clean, summary_schema())
    path.write_text(json.dumps(clean, indent=2, sort_keys=True) + "\n")


def _write_trajectory(path: Path, header, mc: MonteCarloResult, variants, K: int) -> None:
    """Truth of the first run next to each variant's node-averaged estimate."""
    first = {v: (mc.results[v][0] if mc.results[v] else None) for v in variants}
    ref = next((r for r in first.values() if r is not None), None)
    cols = ["step", "truth_x", "truth_y", "truth_z"]
    for v in variants:
        cols += [f"{v}_x", f"{v}_y", f"{v}_z"]
    rows = []
    for k in range(K + 1):
        row = [k] + (list(ref.truth[k, [0, 2, 4]]) if ref is not None else [float("nan")] * 3)
        for v in variants:
            r = first[v]
            # only average the same run as the truth column
            if r is None or r.run != ref.run:
                row += [float("nan")] * 3
            else:
                row += list(r.estimates[k][:, [0, 2, 4]].mean(axis=0))
        rows.append(row)
    _write_csv(path, header + ["# truth and node-averaged estimates of the first completed run"], cols, rows)


def _write_telemetry(folder: Path, header, mc: MonteCarloResult, variants) -> None:
    folder.mkdir(exist_ok=True)
    by_run: dict[int, list] = {}
    for v in variants:
        for r in mc.results[v]:
            by_run.setdefault(r.run, []).append(r)
    cols = ["variant", "step", "energy_j", "attempted", "delivered_info", "delivered_diffusion",
            "eig_min", "eig_max", "primitive", "pf_ratio"]
    for run in sorted(by_run):
        rows = []
        for r in by_run[run]:
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.max(r.pf_vectors[1:] / r.pf_vectors[:-1], axis=1)
            for k in range(1, len(r.energy_j) + 1):
                rows.append([
                    r.variant, k, r.energy_j[k - 1], r.attempted[k - 1], r.delivered_info[k - 1],
                    r.delivered_diffusion[k - 1], r.eig_min[k].min(), r.eig_max[k].max(),
                    int(r.primitive[k - 1]), ratio[k - 2] if k >= 2 else float("nan"),
                ])
        _write_csv(folder / f"run_{run}.csv", header, cols, rows)


# -- sweep -------------------------------------------------------------------


def level_config(cfg: ScenarioConfig, idx: int) -> ScenarioConfig:
    sw = cfg.sweep
    level = sw.levels[idx]
    if sw.mode == "q":
        over = ["links.mode=q", f"links.q={level!r}", "links.q_range=null"]
        if sw.power_mw is not None:
            over.append(f"links.power_mw={sw.power_mw[idx]!r}")
    else:
        over = ["links.mode=u", f"links.power_mw={level!r}", "links.power_range_mw=null"]
    return cfg.with_overrides(over)


def run_sweep(cfg: ScenarioConfig, workers: int):
    """Monte Carlo per level; change rates are relative to the highest level."""
    levels = cfg.sweep.levels
    ref_idx = int(np.argmax(levels))
    per_level = []
    failed = None
    for idx in range(len(levels)):
        lc = level_config(cfg, idx)
        try:
            mc = run_monte_carlo(lc, workers=workers)
        except ExperimentFailed as exc:
            mc, failed = exc.result, exc
        per_level.append((lc, mc))
    rows = []
    for idx, (lc, mc) in enumerate(per_level):
        for v in cfg.filter.variants:
            rep = mc.reports[v]
            ref = per_level[ref_idx][1].reports[v]
            energy = None
            if rep.energy is not None and ref.energy is not None:
                energy = energy_change_rate(rep.energy, ref.energy)
            rows.append({
                "level": levels[idx],
                "variant": v,
                "power_mw": lc.links.power_mw,
                "steady_rmse_position_m": rep.steady_p,
                "steady_rmse_position_se_m": rep.steady_p_se,
                "steady_rmse_velocity_m_s": rep.steady_v,
                "steady_rmse_velocity_se_m_s": rep.steady_v_se,
                "energy_rate_j_per_s": rep.energy_rate_j_per_s,
                "change_rmse_position": change_rate(rep.steady_p, ref.steady_p),
                "change_rmse_velocity": change_rate(rep.steady_v, ref.steady_v),
                "change_energy": energy,
            })
    return rows, per_level, failed


SWEEP_COLUMNS = [
    "level", "variant", "power_mw", "steady_rmse_position_m", "steady_rmse_position_se_m",
    "steady_rmse_velocity_m_s", "steady_rmse_velocity_se_m_s", "energy_rate_j_per_s",
    "change_rmse_position", "change_rmse_velocity", "change_energy",
]


# -- power map -----------------------------------------------------------------


def power_map_rows(cfg: ScenarioConfig, u_max_mw: float, points: int):
    ch = channel_params(cfg)
    u_mw = np.linspace(0.0, u_max_mw, points)
    ber = ber_bfsk(u_mw * 1e-3, ch)
    q = packet_success_prob(ber, ch.l)
    return [(float(a), float(b), float(c)) for a, b, c in zip(u_mw, ber, q)]


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fadetrack", description="Distributed tracking over fading channels.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=Path, default=None, help="scenario JSON (default: built-in)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
    common.add_argument("--format", choices=["csv", "json", "both"], default="csv")
    sub.add_parser("simulate", parents=[common], help="Monte Carlo run of the configured variants")
    sub.add_parser("compare", parents=[common], help="variants side by side on common random numbers")
    sub.add_parser("sweep", parents=[common], help="steady-state metrics per q or power level")
    sub.add_parser("verify", parents=[common], help="run the invariant suite")
    pm = sub.add_parser("power-map", parents=[common], help="packet success probability against peak power")
    pm.add_argument("--u-max-mw", type=float, default=400.0)
    pm.add_argument("--points", type=int, default=81)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_scenario(args.scenario, args.override)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.command == "compare" and len(cfg.filter.variants) < 2:
            raise ConfigError("compare needs at least two variants", "filter.variants")
        if args.command in ("simulate", "compare", "verify"):
            build_world(cfg)  # placement problems count as configuration errors
        if args.command == "power-map" and (args.points < 2 or args.u_max_mw <= 0):
            raise ConfigError("power-map needs --points >= 2 and a positive --u-max-mw")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out: Path = args.out
    if args.command == "power-map":
        out.mkdir(parents=True, exist_ok=True)
        rows = power_map_rows(cfg, args.u_max_mw, args.points)
        _write_csv(out / "power_map.csv", _header("power-map", cfg), ["u_mw", "ber", "q"], rows)
        return EXIT_OK

    if args.command == "verify":
        results = verify.run_all(cfg)
        out.mkdir(parents=True, exist_ok=True)
        report = {
            "master_seed": cfg.master_seed,
            "config": cfg.to_dict(),
            "passed": all(r.passed for r in results),
            "properties": [r.as_dict() for r in results],
        }
        # timings vary between runs, keep them out of the file
        for p in report["properties"]:
            p.pop("seconds")
        (out / "verify_report.json").write_text(_dump_json(report))
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: measured={r.measured} tol={r.tolerance}")
        return EXIT_OK if report["passed"] else EXIT_VERIFY

    if args.command == "sweep":
        rows, per_level, failed = run_sweep(cfg, args.workers)
        out.mkdir(parents=True, exist_ok=True)
        if args.format in ("csv", "both"):
            _write_csv(out / "sweep.csv", _header("sweep", cfg), SWEEP_COLUMNS, ([r[c] for c in SWEEP_COLUMNS] for r in rows))
        summary = {
            "command": "sweep",
            "master_seed": cfg.master_seed,
            "config": cfg.to_dict(),
            "variants": {},
            "failures": [f.as_dict() for _, mc in per_level for v in cfg.filter.variants for f in mc.failures[v]],
            "sweep": rows,
        }
        _dump_summary(out / "summary.json", summary)
        if failed is not None:
            print(f"experiment failed: {failed}", file=sys.stderr)
            return EXIT_EXPERIMENT
        return EXIT_OK

    try:
        mc = run_monte_carlo(cfg, workers=args.workers)
        code = EXIT_OK
    except ExperimentFailed as exc:
        mc = exc.result
        print(f"experiment failed: {exc}", file=sys.stderr)
        code = EXIT_EXPERIMENT
    out.mkdir(parents=True, exist_ok=True)
    summary = write_experiment(out, args.command, cfg, mc, args.format)
    for v, rep in summary["variants"].items():
        print(f"{v}: steady RMSE_p={rep['steady_rmse_position_m']:.3f} m  RMSE_v={rep['steady_rmse_velocity_m_s']:.3f} m/s")
    return code


if __name__ == "__main__":
    sys.exit(main())
