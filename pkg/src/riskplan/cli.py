"""``riskplan`` command line.

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric error.
Every command writes ``resolved_config.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DivergenceError, RiskPlanError
from .harness import (DEFAULT_DELAYS, DEFAULT_SIGMAS, SuiteConfig, SuiteRow, run_suite, score,
                      suite_config_from_dict, suite_config_to_dict)
from .learning import LossConfig, OptimizerConfig, fit_cost_parameters, perturb_decoder
from .metrics import AS_PRINTED, DEFAULT_CR_THRESHOLD, FORMULA_MODES
from .pipeline import PipelineParams, demo_samples, scenario_cost
from .planner import V_MAX, plan
from .render import compose, write_ppm, write_svg
from .sim import ARCHETYPES, OracleConfig, ScenarioConfig, generate_demonstrations, generate_scenario, scenario_seed
from .storage import (KIND_RISK, load_scenario, read_json, read_risk_map, read_tensors, save_scenario, write_json,
                      write_risk_map, write_table, write_tensors)

log = logging.getLogger("riskplan")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _names(text: str) -> tuple:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _default_seed() -> int:
    env = os.environ.get("RISKMM_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CommandError(f"RISKMM_SEED must be an integer, got {env!r}", EXIT_CONFIG)


def _scenario_files(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(p.glob("*.json")))
        elif p.exists():
            out.append(p)
        else:
            raise CommandError(f"no such file or directory: {p}", EXIT_CONFIG)
    out = [p for p in out if p.name != "resolved_config.json" and p.name != "summary.json"]
    if not out:
        raise CommandError("no scenario files given", EXIT_CONFIG)
    return out


def _out_dir(args) -> Path:
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_resolved(out: Path, command: str, cfg: dict) -> None:
    doc = {"format_version": 1, "command": command, "version": __version__, **cfg}
    log.info("resolved configuration: %s", doc)
    write_json(out / "resolved_config.json", doc)


def _load_params(path: str | None, horizon: int) -> PipelineParams:
    """Parameters from a named-tensor file, or the fixed default model."""
    if path is None:
        return PipelineParams.initial(horizon)
    try:
        return PipelineParams.from_tensors(read_tensors(path))
    except FileNotFoundError:
        raise CommandError(f"parameter file not found: {path}", EXIT_CONFIG)
    except KeyError as exc:
        raise CommandError(f"parameter file {path} lacks tensor {exc}", EXIT_CONFIG)


def _scenario_config(args) -> ScenarioConfig:
    return ScenarioConfig(min_vehicles=args.min_vehicles, max_vehicles=args.max_vehicles, horizon=args.horizon,
                          dt=args.dt, conflict=args.conflict)


def _oracle_config(args) -> OracleConfig:
    if args.mix is not None:
        mix = args.mix
    elif args.archetypes == ARCHETYPES:
        mix = OracleConfig().mix
    else:
        mix = tuple(1.0 / len(args.archetypes) for _ in args.archetypes)
    return OracleConfig(archetypes=args.archetypes, mix=mix, horizon=args.horizon, seed=args.oracle_seed)


# --- commands ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.count < 1:
        raise CommandError("--count must be >= 1", EXIT_CONFIG)
    scfg, ocfg = _scenario_config(args), _oracle_config(args)
    out = _out_dir(args)
    suite = suite_config_to_dict(SuiteConfig(scfg, ocfg))
    _write_resolved(out, "generate", {"count": args.count, "seed": args.seed, "scenario": suite["scenario"],
                                      "oracle": suite["oracle"]})
    for i in range(args.count):
        sc = generate_scenario(scfg, scenario_seed(args.seed, i))
        demos = generate_demonstrations(sc, ocfg)
        save_scenario(out / f"scenario_{i:04d}.json", sc, demos)
        log.info("scenario %d: %d vehicles", i, sc.num_vehicles)
    print(f"wrote {args.count} scenarios to {out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    files = _scenario_files(args.scenarios)
    out = _out_dir(args)
    first = load_scenario(files[0]).scenario
    params = _load_params(args.params, first.horizon)
    _write_resolved(out, "plan", {"scenarios": [str(f) for f in files], "params": args.params, "seed": args.seed,
                                  "v_max": args.v_max, "use_oracle_weights": args.use_oracle_weights})
    diag = []
    for f in files:
        loaded = load_scenario(f)
        sc = loaded.scenario
        rows = None
        if args.use_oracle_weights:
            if loaded.demonstrations is None:
                raise CommandError(f"{f}: no stored oracle weights", EXIT_CONFIG)
            rows = loaded.demonstrations.weights
        _, risk, cost = scenario_cost(sc, params, rows)
        trajs = []
        for i, v in enumerate(sc.vehicles):
            try:
                trajs.append(plan(v, cost.vehicle(i), sc, v_max=args.v_max))
            except RiskPlanError as exc:
                raise CommandError(f"{f.name}: planning failed for vehicle {v.id}: {type(exc).__name__}: {exc}",
                                   EXIT_RUNTIME)
        stem = f.stem.replace("scenario_", "")
        save_scenario(out / f"planned_{stem}.json", sc, loaded.demonstrations, trajs)
        write_risk_map(out / f"risk_{stem}.rmm", risk)
        for t in trajs:
            s = t.solution
            diag.append((f.name, t.vehicle_id, s.kkt_residual, s.min_pivot,
                         ",".join(map(str, s.active_set)) or "-"))
            if args.verbose >= 2:
                print(f"{f.name} vehicle {t.vehicle_id} kkt_residual {s.kkt_residual:.3e}")
    write_table(out / "diagnostics.tsv", ("scenario", "vehicle_id", "kkt_residual", "min_pivot", "active_set"), diag)
    print(f"planned {len(files)} scenarios into {out}")
    return EXIT_OK


def cmd_learn(args) -> int:
    files = _scenario_files(args.scenarios)
    loaded = [load_scenario(f) for f in files]
    if any(l.demonstrations is None for l in loaded):
        raise CommandError("every training scenario needs demonstrations", EXIT_CONFIG)
    out = _out_dir(args)
    params = _load_params(args.params, loaded[0].scenario.horizon)
    init = params.decoder
    if args.perturb > 0:
        init = perturb_decoder(init, args.perturb, args.seed)
    opt = OptimizerConfig(learning_rate=args.lr, epochs=args.epochs, decay=args.decay, seed=args.seed,
                          v_max=args.v_max)
    loss_cfg = LossConfig(collision_weight=args.collision_weight, collision_threshold=args.collision_threshold)
    _write_resolved(out, "learn", {"scenarios": [str(f) for f in files], "params": args.params, "seed": args.seed,
                                   "learning_rate": args.lr, "epochs": args.epochs, "decay": args.decay,
                                   "perturb": args.perturb, "collision_weight": args.collision_weight,
                                   "collision_threshold": args.collision_threshold, "ego_only": args.ego_only,
                                   "v_max": args.v_max})
    batch = demo_samples([l.scenario for l in loaded], [l.demonstrations for l in loaded], params.attention,
                         ego_only=args.ego_only)
    if not batch:
        raise CommandError("training scenarios contain no vehicles", EXIT_CONFIG)
    try:
        fit = fit_cost_parameters(batch, init, opt, loss_cfg)
    except DivergenceError as exc:
        raise CommandError(f"training diverged: {exc}", EXIT_RUNTIME)
    write_tensors(out / "params.rmmt", params.with_decoder(fit.decoder).tensors())
    write_table(out / "loss_curve.tsv", ("epoch", "loss", "grad_norm"),
                [(r.epoch, r.loss, r.grad_norm) for r in fit.history])
    final = fit.losses[-1] if fit.history else float("nan")
    print(f"trained {args.epochs} epochs on {len(batch)} samples; final loss {final:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    files = _scenario_files(args.scenarios)
    out = _out_dir(args)
    _write_resolved(out, "eval", {"scenarios": [str(f) for f in files], "cr_threshold": args.cr_threshold,
                                  "formula_mode": args.formula_mode})
    loaded = [load_scenario(f) for f in files]
    for f, l in zip(files, loaded):
        if l.planned is None or l.demonstrations is None:
            raise CommandError(f"{f}: eval needs planned trajectories and demonstrations", EXIT_CONFIG)
    scen = [l.scenario for l in loaded]
    res = score([l.planned for l in loaded], scen, scen, [l.demonstrations for l in loaded],
                cr_threshold=args.cr_threshold, formula_mode=args.formula_mode)
    row = SuiteRow(0.0, 0.0, 0.0, res)
    write_table(out / "eval.tsv", SuiteRow.COLUMNS, [row.values()])
    write_table(out / "eval_scenarios.tsv", ("file", "seed", "ade", "min_distance"),
                [(f.name, r.seed, r.ade, r.min_distance) for f, r in zip(files, res.records)])
    write_json(out / "summary.json", {"format_version": 1, "command": "eval",
                                      **{k: _jsonable(v) for k, v in zip(SuiteRow.COLUMNS, row.values())}})
    print(f"ade {res.ade:.6g} cr {res.collision_rate:.6g} auc {res.auc:.6g} soft_iou {res.soft_iou:.6g}")
    return EXIT_OK


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def cmd_robustness(args) -> int:
    base = suite_config_from_dict(read_json(args.config)) if args.config else None
    d = suite_config_to_dict(base) if base else suite_config_to_dict(
        SuiteConfig(_scenario_config(args), _oracle_config(args)))
    overrides = {"seed": args.seed, "scenarios_per_cell": args.count, "sigmas": args.sigmas,
                 "delays_ms": args.delays, "v_max": args.v_max, "cr_threshold": args.cr_threshold,
                 "formula_mode": args.formula_mode, "workers": args.workers}
    for k, v in overrides.items():
        if v is not None:
            d[k] = list(v) if isinstance(v, tuple) else v
    cfg = suite_config_from_dict(d)
    out = _out_dir(args)
    params = _load_params(args.params, cfg.scenario.horizon)
    _write_resolved(out, "robustness", {"params": args.params, "suite": suite_config_to_dict(cfg)})
    report = run_suite(cfg, params)
    write_table(out / "robustness.tsv", SuiteRow.COLUMNS, [r.values() for r in report.rows])
    write_table(out / "robustness_scenarios.tsv",
                ("sigma_pos", "sigma_heading", "delay_ms", "index", "seed", "ade", "min_distance", "error"),
                [(r.sigma_pos, r.sigma_heading, r.delay_ms, s.index, s.seed, s.ade, s.min_distance, s.error or "-")
                 for r in report.rows for s in r.result.records])
    print(f"wrote {len(report.rows)} rows to {out / 'robustness.tsv'}")
    return EXIT_OK


def cmd_render(args) -> int:
    loaded = load_scenario(args.scenario)
    risk_path = Path(args.risk)
    if not risk_path.exists():
        raise CommandError(f"risk map not found: {risk_path}", EXIT_CONFIG)
    risk = read_risk_map(risk_path)
    sc = loaded.scenario
    if risk.grid_shape != sc.grid.shape or risk.weights.shape[0] != sc.num_vehicles:
        raise CommandError(f"risk map {risk_path} does not match scenario {args.scenario}", EXIT_CONFIG)
    vehicles = range(sc.num_vehicles) if args.vehicle is None else [args.vehicle]
    if args.vehicle is not None and not 0 <= args.vehicle < sc.num_vehicles:
        raise CommandError(f"vehicle index {args.vehicle} out of range", EXIT_CONFIG)
    out = _out_dir(args)
    _write_resolved(out, "render", {"scenario": str(args.scenario), "risk": str(risk_path), "scale": args.scale,
                                    "vehicle": args.vehicle, "kind": KIND_RISK})
    occ = sc.gt_occupancy.values[0]
    truth = [t.poses for t in loaded.demonstrations.trajectories] if loaded.demonstrations else \
        [np.vstack([v.pose[None], sc.future[i]]) for i, v in enumerate(sc.vehicles)]
    planned = [t.poses for t in loaded.planned] if loaded.planned else []
    stem = Path(args.scenario).stem
    for i in vehicles:
        grid = risk.as_grid(i)
        img = compose(grid, sc.grid, occ, planned, truth, args.scale)
        write_ppm(out / f"{stem}_vehicle{i}.ppm", img)
        write_svg(out / f"{stem}_vehicle{i}.svg", grid, sc.grid, occ, planned, truth, args.scale,
                  title=f"risk map of vehicle {sc.vehicles[i].id}")
    print(f"rendered {len(vehicles)} risk maps into {out}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------------------

def _add_generation_flags(p) -> None:
    p.add_argument("--min-vehicles", type=int, default=3)
    p.add_argument("--max-vehicles", type=int, default=6)
    p.add_argument("--horizon", "-T", type=int, default=7, help="planning steps including the current one")
    p.add_argument("--dt", type=float, default=0.5)
    p.add_argument("--conflict", action="store_true", help="put a slower lead vehicle ahead of the ego")
    p.add_argument("--archetypes", type=_names, default=ARCHETYPES)
    p.add_argument("--mix", type=_floats, default=None, help="archetype probabilities, comma-separated")
    p.add_argument("--oracle-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="repeat for more detail (max 3)")
    common.add_argument("--seed", type=int, default=None, help="defaults to $RISKMM_SEED or 0")
    common.add_argument("--out", default=".", help="output directory")

    parser = argparse.ArgumentParser(prog="riskplan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthesize scenarios with oracle demonstrations")
    g.add_argument("--count", type=int, default=10)
    _add_generation_flags(g)

    p = sub.add_parser("plan", parents=[common], help="plan every vehicle of each scenario")
    p.add_argument("scenarios", nargs="+")
    p.add_argument("--params", default=None, help="named-tensor parameter file")
    p.add_argument("--use-oracle-weights", action="store_true", help="plan with the stored generating weights")
    p.add_argument("--v-max", type=float, default=V_MAX)

    lp = sub.add_parser("learn", parents=[common], help="fit the cost decoder to demonstrations")
    lp.add_argument("scenarios", nargs="+")
    lp.add_argument("--params", default=None)
    lp.add_argument("--epochs", type=int, default=200)
    lp.add_argument("--lr", type=float, default=1e-2)
    lp.add_argument("--decay", type=float, default=0.0)
    lp.add_argument("--perturb", type=float, default=0.0, help="Gaussian perturbation of the initial decoder")
    lp.add_argument("--collision-weight", type=float, default=0.0)
    lp.add_argument("--collision-threshold", type=float, default=DEFAULT_CR_THRESHOLD)
    lp.add_argument("--ego-only", action="store_true")
    lp.add_argument("--v-max", type=float, default=V_MAX)

    e = sub.add_parser("eval", parents=[common], help="score planned scenarios against demonstrations")
    e.add_argument("scenarios", nargs="+")
    e.add_argument("--cr-threshold", type=float, default=DEFAULT_CR_THRESHOLD)
    e.add_argument("--formula-mode", choices=FORMULA_MODES, default=AS_PRINTED)

    r = sub.add_parser("robustness", parents=[common], help="pose-noise and delay sweep")
    r.add_argument("--config", default=None,
                   help="suite configuration JSON (format_version 1); replaces the generation flags")
    r.add_argument("--params", default=None)
    r.add_argument("--count", type=int, default=None, help="scenarios per cell")
    r.add_argument("--sigmas", type=_floats, default=None,
                   help=f"paired position [m] / heading [deg] std devs (default {','.join(map(str, DEFAULT_SIGMAS))})")
    r.add_argument("--delays", type=_floats, default=None,
                   help=f"delays in ms (default {','.join(str(int(d)) for d in DEFAULT_DELAYS)})")
    r.add_argument("--v-max", type=float, default=None)
    r.add_argument("--cr-threshold", type=float, default=None)
    r.add_argument("--formula-mode", choices=FORMULA_MODES, default=None)
    r.add_argument("--workers", type=int, default=None)
    _add_generation_flags(r)

    d = sub.add_parser("render", parents=[common], help="draw risk maps with occupancy and trajectories")
    d.add_argument("scenario")
    d.add_argument("--risk", required=True, help="risk-map grid dump written by `plan`")
    d.add_argument("--vehicle", type=int, default=None, help="vehicle index; all when omitted")
    d.add_argument("--scale", type=int, default=4, help="pixels per cell")
    return parser


COMMANDS = {"generate": cmd_generate, "plan": cmd_plan, "learn": cmd_learn, "eval": cmd_eval,
            "robustness": cmd_robustness, "render": cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.INFO, logging.DEBUG][min(args.verbose, 3)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        if args.seed is None:
            args.seed = _default_seed()
        return COMMANDS[args.command](args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RiskPlanError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
