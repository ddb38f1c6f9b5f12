"""Command-line entry point: ``mixtraffic {search,train,evaluate,analyze,run-all}``.

Exit codes: 0 ok, 2 configuration error, 3 runtime failure, 4 training
divergence, 5 model incompatible with the observation spec, 6 log parse error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import hyperopt, patterns
from .config import ConfigError, ExperimentConfig, hyper_fragment, load_config, load_hyper_fragment
from .modelio import ModelFileError, load_model, save_model
from .qlearn import TrainingDivergence, state_dim
from .sim import SimulationError
from .strategies import Policy, deploy_transfer, evaluate_policy, train_core, train_multiagent, write_reports

log = logging.getLogger("mixtraffic")

EXIT_CONFIG, EXIT_RUNTIME, EXIT_DIVERGED, EXIT_INCOMPATIBLE, EXIT_PARSE = 2, 3, 4, 5, 6


class IncompatibleModel(ValueError):
    pass


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\n")


# --------------------------------------------------------------------------
# search


def cmd_search(cfg: ExperimentConfig, out: Path, dry_run: bool = False, jobs: int = 1) -> hyperopt.HyperConfig:
    out.mkdir(parents=True, exist_ok=True)
    space = cfg.space
    if dry_run:
        fitness = hyperopt.stub_fitness(space)
    else:
        fitness = hyperopt.FitnessEvaluator(
            cfg.sim, cfg.seed, cfg.search_folds, cfg.search_eval_ticks, cfg.eval_seed, jobs
        )
    ranked = hyperopt.random_search(space, fitness, cfg.search_k, cfg.search_seed)
    top = hyperopt.select_top(ranked, cfg.search_top)
    history = hyperopt.evolve(top, cfg.ea, fitness, cfg.search_seed + 1, space, first_iteration=1)
    iterations = [hyperopt.Generation(0, ranked)] + history.generations

    with open(out / "search_log.csv", "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(("iteration", "candidate_index", *hyperopt.HYPER_FIELDS, "fitness_mph"))
        for gen in iterations:
            for idx, (lam, fit) in enumerate(gen.population):
                w.writerow((gen.iteration, idx, *(repr(v) for v in lam.as_dict().values()), f"{fit:.6f}"))
    with open(out / "fig1_search.csv", "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(("iteration", "min", "mean", "max"))
        for gen in iterations:
            lo, mean, hi = gen.stats
            w.writerow((gen.iteration, f"{lo:.6f}", f"{mean:.6f}", f"{hi:.6f}"))
    best, best_fit = history.best
    (out / "best_hyper.cfg").write_text(hyper_fragment(best))
    evals = getattr(fitness, "calls", None)
    log.info("search done: best %.3f mph%s", best_fit, f" ({evals} trainings)" if evals is not None else "")
    return best


# --------------------------------------------------------------------------
# train


def _model_path(out: Path, strategy: str, n_agents: int) -> Path:
    if strategy == "transfer":
        return out / "models" / "core.mxq"
    return out / "models" / f"multiagent_n{n_agents:02d}.mxq"


def _write_curve(path: Path, curve) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(("block", "mean_reward"))
        for i, v in enumerate(curve):
            w.writerow((i, f"{v:.6f}"))


def cmd_train(cfg: ExperimentConfig, out: Path, strategy: str, n_agents_list, lam=None) -> list[Path]:
    lam = lam or cfg.hyper
    written = []
    targets = [1] if strategy == "transfer" else list(n_agents_list)
    for n in targets:
        path = _model_path(out, strategy, n)
        curve_path = path.with_suffix(".curve.csv")
        try:
            if strategy == "transfer":
                result = train_core(lam, cfg.seed, cfg.sim, cfg.target_update_period)
            else:
                result = train_multiagent(lam, n, cfg.reward_mode, cfg.seed, cfg.sim, cfg.target_update_period)
        except TrainingDivergence as exc:
            _write_curve(curve_path, exc.curve)
            raise
        save_model(result.net, path)
        _write_curve(curve_path, result.curve)
        log.info("trained %s (n=%d): %d updates -> %s", strategy, n, result.updates, path)
        written.append(path)
    return written


# --------------------------------------------------------------------------
# evaluate


def cmd_evaluate(cfg: ExperimentConfig, out: Path, strategies, n_agents_list, model: Path | None = None, lam=None, jobs: int = 1):
    lam = lam or cfg.hyper
    spec = lam.obs_spec()
    log_dir = out / "logs"
    reports = []
    index = []
    for strategy in strategies:
        for n in n_agents_list:
            path = model or _model_path(out, strategy, n)
            net = load_model(path)
            if net.spec.input_dim != state_dim(spec.n_cells, spec.temporal_window):
                raise IncompatibleModel(
                    f"{path}: model input_dim {net.spec.input_dim} does not match observation spec {spec}"
                )
            if strategy == "transfer":
                policy = deploy_transfer(net, n, spec, lam.epsilon_test_time)
            else:
                policy = Policy(net, spec, lam.epsilon_test_time)
            rep = evaluate_policy(
                policy, n, cfg.folds, cfg.eval_ticks, cfg.eval_seed, cfg.sim,
                log_dir=log_dir, strategy=strategy, jobs=jobs,
            )
            reports.append(rep)
            for fold, (p, speed) in enumerate(zip(rep.log_paths, rep.fold_speeds)):
                index.append(
                    {
                        "file": Path(p).name,
                        "strategy": strategy,
                        "n_agents": n,
                        "fold": fold,
                        "avg_speed_mph": speed,
                        "policy_ids": list(range(n)),
                    }
                )
            log.info("%s n=%d: mean %.3f mph (spread %.3f)", strategy, n, rep.mean, rep.spread)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out / "fig5_perf.csv", out / "eval_summary.json")
    log_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "tick_seconds": cfg.sim.tick_seconds,
        "geometry": patterns.Geometry.from_sim(cfg.sim).__dict__,
        "logs": index,
    }
    (log_dir / "index.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return reports


# --------------------------------------------------------------------------
# analyze


def cmd_analyze(log_dir: Path, out: Path) -> patterns.PatternReport:
    out.mkdir(parents=True, exist_ok=True)
    index_path = log_dir / "index.json"
    meta = json.loads(index_path.read_text()) if index_path.exists() else {"logs": []}
    geom = patterns.Geometry(**meta["geometry"]) if "geometry" in meta else patterns.Geometry()
    tick_seconds = meta.get("tick_seconds", 0.1)
    event_sets: dict[tuple[str, int], list] = {}
    speeds: dict[str, list[tuple[int, float]]] = {}
    dropped = 0
    events_dir = out / "events"
    for entry in meta["logs"]:
        traj = patterns.parse_log(log_dir / entry["file"])
        agents = entry["policy_ids"]
        ann = patterns.annotate_log(traj, agents, agents, geom, tick_seconds)
        dropped += ann.dropped
        key = (entry["strategy"], int(entry["n_agents"]))
        event_sets.setdefault(key, []).extend(ann.events)
        speeds.setdefault(entry["strategy"], []).append((int(entry["n_agents"]), float(entry["avg_speed_mph"])))
        events_dir.mkdir(parents=True, exist_ok=True)
        patterns.write_events(events_dir / (Path(entry["file"]).stem + "_events.csv"), ann.events)
    report = patterns.summarize(event_sets)
    report.check()
    patterns.write_report(out / "fig6_congestion.csv", report)
    patterns.write_histogram(out / "fig7_hist.csv", report)
    with open(out / "regression.csv", "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(("strategy", "slope_mph_per_agent", "n_points"))
        for strategy, pts in sorted(speeds.items()):
            if len({n for n, _ in pts}) >= 2:
                w.writerow((strategy, f"{patterns.regression_slope(pts):.6f}", len(pts)))
    if dropped:
        log.warning("%d incidents dropped: log ended inside the deceleration window", dropped)
    return report


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config file")
    common.add_argument("--seed", type=int, help="override [experiment] seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for folds / EA candidates")
    common.add_argument("--out", type=Path, help="output directory (overrides [experiment] out)")
    common.add_argument("--dry-run", action="store_true", help="use a stub fitness in the search")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mixtraffic", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("search", parents=[common], help="random search + elitist EA")
    t = sub.add_parser("train", parents=[common], help="train a core or shared network")
    t.add_argument("--strategy", choices=["transfer", "multiagent"])
    t.add_argument("--n-agents", help="agent counts, e.g. 6 or 1-11")
    t.add_argument("--hyper", type=Path, help="[hyper] fragment, e.g. best_hyper.cfg from search")
    e = sub.add_parser("evaluate", parents=[common], help="5-fold evaluation over agent counts")
    e.add_argument("--strategy", choices=["transfer", "multiagent"])
    e.add_argument("--n-agents")
    e.add_argument("--model", type=Path)
    e.add_argument("--hyper", type=Path)
    a = sub.add_parser("analyze", parents=[common], help="congestion patterns and regression slopes")
    a.add_argument("--logs", type=Path, help="directory with trajectory logs and index.json")
    sub.add_parser("run-all", parents=[common], help="search, train, evaluate and analyze")
    return p


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return cfg, args.out or cfg.out


def _agents(cfg: ExperimentConfig, text: str | None):
    from .config import parse_int_list

    if text is None:
        return cfg.n_agents
    values = parse_int_list(text)
    if not values or any(not 1 <= n <= 11 for n in values):
        raise ConfigError("--n-agents values must lie in [1, 11]")
    return values


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg, out = _resolve(args)
        if args.command == "search":
            cmd_search(cfg, out, args.dry_run, args.jobs)
        elif args.command == "train":
            lam = load_hyper_fragment(args.hyper, cfg.hyper) if args.hyper else cfg.hyper
            strategies = [args.strategy] if args.strategy else cfg.strategies
            for s in strategies:
                cmd_train(cfg, out, s, _agents(cfg, args.n_agents), lam)
        elif args.command == "evaluate":
            lam = load_hyper_fragment(args.hyper, cfg.hyper) if args.hyper else cfg.hyper
            strategies = [args.strategy] if args.strategy else cfg.strategies
            cmd_evaluate(cfg, out, strategies, _agents(cfg, args.n_agents), args.model, lam, args.jobs)
        elif args.command == "analyze":
            cmd_analyze(args.logs or out / "logs", out)
        elif args.command == "run-all":
            best = cmd_search(cfg, out, args.dry_run, args.jobs)
            lam = cfg.hyper if args.dry_run else best
            (out / "used_hyper.cfg").write_text(hyper_fragment(lam))
            for s in cfg.strategies:
                cmd_train(cfg, out, s, cfg.n_agents, lam)
            cmd_evaluate(cfg, out, cfg.strategies, cfg.n_agents, None, lam, args.jobs)
            cmd_analyze(out / "logs", out)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except IncompatibleModel as exc:
        log.error("%s", exc)
        return EXIT_INCOMPATIBLE
    except patterns.LogParseError as exc:
        log.error("log parse error: %s", exc)
        return EXIT_PARSE
    except (SimulationError, ModelFileError, OSError, ValueError, RuntimeError, KeyError) as exc:
        log.error("run failed: %s", exc)
        return EXIT_RUNTIME
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
