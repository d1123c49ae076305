"""Command-line surface.

Commands: soup, merge, greedy (merge with greedy acceptance forced on),
synth {estimators,cycle,convergence,wlln}, fed, verify. All randomness comes
from explicit seed fields; identical config + seed therefore produces
byte-identical outputs.

Exit codes: 0 success; 1 config/flag validation failure (detected before any
run starts); 2 runtime or I/O failure (unreadable, missing, or incompatible
checkpoint files, mid-run errors).

Input paths inside a config resolve relative to the config file's directory;
output paths resolve relative to --out (default: the config directory).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Any

import numpy as np

from .config import (
    ConfigError,
    FedRunConfig,
    GreedySpec,
    MergeConfig,
    PivotInitSpec,
    enumerate_sweep,
    load_json,
    parse_fed_config,
    sweep_cell_name,
)
from .engine import (
    EngineError,
    EnsembleConfig,
    Ingredient,
    IngredientInit,
    Projection,
    ProvidedInit,
    SoupInit,
    greedy_run,
    run_ensemble,
)
from .fedlab import ClientSpec, FedConfig, simulate_fedopt, simulate_fedsoup
from .optim import OptimizerSpec
from .pseudograd import ScheduleError, soup
from .synthlab import (
    DistributionSpec,
    TrialConfig,
    convergence_check,
    cycle_counterexample,
    cycle_ingredients,
    default_estimator_config,
    run_estimator_trials,
    soup_wlln,
)
from .verify import SUITES, run_suites
from .weightstore import (
    CheckpointError,
    SchemaMismatch,
    WeightMap,
    l2_distance,
    load_checkpoint,
    save_checkpoint,
)


class UsageError(ValueError):
    """Flag-level validation failure (exit code 1)."""


def _say(args, message: str) -> None:
    if not getattr(args, "quiet", False):
        print(message)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


# --- soup ------------------------------------------------------------------------


def cmd_soup(args) -> int:
    maps = [load_checkpoint(path) for path in args.inputs]
    merged = soup(maps)
    _ensure_parent(args.output)
    save_checkpoint(merged, args.output)
    _say(args, f"souped {len(maps)} ingredients -> {args.output} ({len(merged)} tensors)")
    return 0


# --- merge / greedy ---------------------------------------------------------------


def _read_metrics_csv(path: str) -> dict[str, float]:
    metrics: dict[str, float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "metric"]:
            raise UsageError(f"{path}: metrics CSV must have header 'id,metric'")
        for row in reader:
            metrics[row["id"]] = float(row["metric"])
    return metrics


def _load_ingredients(cfg: MergeConfig, base_dir: str) -> list[Ingredient]:
    metrics: dict[str, float] = {}
    if cfg.metrics_csv is not None:
        metrics = _read_metrics_csv(os.path.join(base_dir, cfg.metrics_csv))
    ingredients = []
    for entry in cfg.ingredients:
        weights = load_checkpoint(os.path.join(base_dir, entry.path))
        metric = entry.metric if entry.metric is not None else metrics.get(entry.id)
        ingredients.append(Ingredient(id=entry.id, weights=weights, metric=metric))
    return ingredients


def _build_engine_config(cfg: MergeConfig, base_dir: str, ingredients: list[Ingredient]) -> EnsembleConfig:
    init = cfg.pivot_init
    if init.kind == "soup":
        pivot_init = SoupInit()
    elif init.kind == "ingredient":
        pivot_init = IngredientInit(init.ingredient_id)
    else:
        pivot_init = ProvidedInit(load_checkpoint(os.path.join(base_dir, init.path)))
    projection = None
    if cfg.projection is not None:
        if cfg.projection.center == "soup":
            center = soup([ing.weights for ing in ingredients])
        else:
            center = load_checkpoint(os.path.join(base_dir, cfg.projection.center))
        projection = Projection(center=center, radius=cfg.projection.radius)
    return EnsembleConfig(
        optimizer=cfg.optimizer,
        pivot_policy=cfg.pivot_policy,
        pivot_init=pivot_init,
        amplification=cfg.amplification,
        n_divisor=cfg.n_divisor,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        shuffle=cfg.shuffle,
        seed=cfg.seed,
        ordering=cfg.ordering,
        projection=projection,
        epoch_lr_reset=cfg.epoch_lr_reset,
        record_steps=cfg.record_steps,
    )


def _run_merge_cell(
    cfg: MergeConfig, base_dir: str, out_dir: str, force_greedy: bool
) -> tuple[str, str]:
    ingredients = _load_ingredients(cfg, base_dir)
    engine_cfg = _build_engine_config(cfg, base_dir, ingredients)
    greedy: GreedySpec = cfg.greedy
    if force_greedy and not greedy.enabled:
        if greedy.target_path is None:
            raise UsageError("greedy requested but the config has no greedy evaluator")
        greedy = GreedySpec(enabled=True, target_path=greedy.target_path)
    if greedy.enabled:
        target = load_checkpoint(os.path.join(base_dir, greedy.target_path))
        merged, record = greedy_run(
            engine_cfg, ingredients, evaluate=lambda m: -l2_distance(m, target)
        )
    else:
        merged, record = run_ensemble(engine_cfg, ingredients)
    out_ckpt = os.path.join(out_dir, cfg.out_checkpoint)
    out_log = os.path.join(out_dir, cfg.out_log)
    _ensure_parent(out_ckpt)
    _ensure_parent(out_log)
    save_checkpoint(merged, out_ckpt)
    record.to_csv(out_log)
    return out_ckpt, out_log


def cmd_merge(args, force_greedy: bool = False) -> int:
    doc = load_json(args.config)
    cells = enumerate_sweep(doc)
    base_dir = os.path.dirname(os.path.abspath(args.config))
    out_dir = args.out if args.out is not None else base_dir

    if len(cells) == 1 and not cells[0][0]:
        out_ckpt, out_log = _run_merge_cell(cells[0][1], base_dir, out_dir, force_greedy)
        _say(args, f"merged -> {out_ckpt} (log {out_log})")
        return 0

    manifest: list[dict[str, Any]] = []
    failures = 0
    for overrides, cell_cfg in cells:
        name = sweep_cell_name(overrides)
        cell_dir = os.path.join(out_dir, name)
        entry: dict[str, Any] = {"cell": name, "overrides": overrides}
        try:
            out_ckpt, out_log = _run_merge_cell(cell_cfg, base_dir, cell_dir, force_greedy)
            entry["status"] = "ok"
            entry["checkpoint"] = os.path.relpath(out_ckpt, out_dir)
            entry["log"] = os.path.relpath(out_log, out_dir)
        except Exception as exc:  # a failing cell must not abort the others
            failures += 1
            entry["status"] = "error"
            entry["error"] = str(exc)
        manifest.append(entry)
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "sweep_manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for entry in manifest:
        _say(args, f"{entry['cell']}: {entry['status']}")
    _say(args, f"sweep: {len(manifest) - failures}/{len(manifest)} cells ok -> {manifest_path}")
    return 0 if failures == 0 else 2


def cmd_greedy(args) -> int:
    return cmd_merge(args, force_greedy=True)


# --- synth -----------------------------------------------------------------------------


def cmd_synth_estimators(args) -> int:
    base = default_estimator_config(args.dist, seed=args.seed)
    optimizer = base.optimizer
    if args.lr is not None or args.beta1 is not None or args.beta2 is not None or args.eps is not None:
        from .optim import Adam
        from .pseudograd import Constant

        variant: Adam = base.optimizer.variant
        optimizer = OptimizerSpec(
            Adam(
                lr=Constant(args.lr if args.lr is not None else variant.lr.value),
                beta1=args.beta1 if args.beta1 is not None else variant.beta1,
                beta2=args.beta2 if args.beta2 is not None else variant.beta2,
                eps=args.eps if args.eps is not None else variant.eps,
            )
        )
    cfg = TrialConfig(
        distribution=DistributionSpec(kind=args.dist),
        optimizer=optimizer,
        population_size=args.population,
        subsample_size=args.subsample,
        trials=args.trials,
        init_point=(args.init_x, args.init_y),
        batch_size=args.batch_size,
        ensemble_epochs=args.epochs,
        seed=args.seed,
    )
    result = run_estimator_trials(cfg, workers=args.workers)
    _ensure_parent(args.output)
    result.to_csv(args.output)
    _say(
        args,
        f"{args.trials} trials -> {args.output}; median distance to reference: "
        f"soup {result.median_dist_soup():.4f}, merged {result.median_dist_ame():.4f}",
    )
    return 0


def cmd_synth_cycle(args) -> int:
    result = cycle_counterexample(k=args.k, omega=args.omega, cycles=args.cycles)
    _ensure_parent(args.output)
    result.to_csv(args.output)
    _say(
        args,
        f"{4 * args.cycles} steps -> {args.output}; return error {result.return_error():.3e}, "
        f"max l1 drift {result.max_l1_drift():.3e}",
    )
    return 0


def cmd_synth_convergence(args) -> int:
    pts = cycle_ingredients(args.k, args.omega)
    trajectory, report = convergence_check(
        alpha=args.alpha,
        c=args.c,
        ingredients=pts,
        steps=args.steps,
        init=np.array([args.omega, 0.0]),
    )
    if args.output is not None:
        _ensure_parent(args.output)
        with open(args.output, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "x", "y", "l1_norm"])
            for step, pt in enumerate(trajectory):
                writer.writerow(
                    [step, repr(float(pt[0])), repr(float(pt[1])), repr(float(abs(pt[0]) + abs(pt[1])))]
                )
    _say(
        args,
        f"tail displacement {report.max_tail_displacement:.3e} vs bound {report.tail_bound:.3e} "
        f"(radius {report.radius:.4f}, cap {report.cap:.4f}): "
        f"{'converged' if report.converged else 'NOT converged'}",
    )
    return 0 if report.converged else 2


def cmd_synth_wlln(args) -> int:
    if args.dist == "cauchy":
        raise UsageError("first moment undefined for the Cauchy family; soups do not converge")
    sizes = [int(s) for s in args.sizes.split(",")]
    result = soup_wlln(
        DistributionSpec(kind=args.dist),
        sizes=sizes,
        trials=args.trials,
        seed=args.seed,
        epsilon=args.epsilon,
    )
    _ensure_parent(args.output)
    result.to_csv(args.output)
    _say(args, "coverage: " + ", ".join(f"n={n}: {f:.3f}" for n, f in result.rows))
    return 0


# --- fed -------------------------------------------------------------------------------


def _point_map(values: tuple[float, ...] | None, path: str | None, base_dir: str) -> WeightMap:
    if values is not None:
        return WeightMap({"w": np.asarray(values, dtype=np.float32)})
    return load_checkpoint(os.path.join(base_dir, path))


def cmd_fed(args) -> int:
    cfg: FedRunConfig = parse_fed_config(load_json(args.config))
    base_dir = os.path.dirname(os.path.abspath(args.config))
    out_dir = args.out if args.out is not None else base_dir

    clients = tuple(
        ClientSpec(
            id=c.id,
            objective_center=_point_map(c.center_values, c.center_path, base_dir),
            local_optimizer=c.optimizer,
            local_steps=c.local_steps,
        )
        for c in cfg.clients
    )
    fed_cfg = FedConfig(
        clients=clients,
        init=_point_map(cfg.init_values, cfg.init_path, base_dir),
        rounds=cfg.rounds,
        sample_size=cfg.sample_size,
        seed=cfg.seed,
        server=cfg.server,
        client_soup=cfg.client_soup,
        server_stew=cfg.server_stew,
    )
    result = simulate_fedopt(fed_cfg) if cfg.algorithm == "fedopt" else simulate_fedsoup(fed_cfg)
    out_log = os.path.join(out_dir, cfg.out_log)
    out_ckpt = os.path.join(out_dir, cfg.out_checkpoint)
    _ensure_parent(out_log)
    _ensure_parent(out_ckpt)
    result.to_csv(out_log)
    save_checkpoint(result.final, out_ckpt)
    _say(
        args,
        f"{cfg.algorithm}: {cfg.rounds} rounds -> {out_ckpt}; final distance to center mean "
        f"{result.rounds[-1].distance_to_center_mean:.6f}",
    )
    return 0


# --- verify -----------------------------------------------------------------------------


def cmd_verify(args) -> int:
    results = run_suites([args.suite])
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        if not r.passed:
            failures += 1
        _say(args, f"{status}  {r.name:<{width}}  {r.detail}")
    if failures:
        _say(args, f"{failures}/{len(results)} suites failed")
        return 1
    _say(args, f"all {len(results)} suites passed")
    return 0


# --- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="soupstock",
        description="Data-free model merging: souping, pseudogradient meta-optimization, "
        "synthetic and federated verification labs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=False):
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        p.add_argument("--out", default=None, help="output directory override")
        if config:
            p.add_argument("--config", required=True, help="JSON run configuration")

    p_soup = sub.add_parser("soup", help="uniform average of compatible checkpoints")
    p_soup.add_argument("inputs", nargs="+", help="ingredient checkpoint files")
    p_soup.add_argument("-o", "--output", required=True, help="output checkpoint path")
    p_soup.add_argument("--quiet", action="store_true")
    p_soup.set_defaults(func=cmd_soup)

    p_merge = sub.add_parser("merge", help="run a configured ensemble merge (or a sweep)")
    add_common(p_merge, config=True)
    p_merge.set_defaults(func=cmd_merge)

    p_greedy = sub.add_parser("greedy", help="merge with greedy acceptance forced on")
    add_common(p_greedy, config=True)
    p_greedy.set_defaults(func=cmd_greedy)

    p_synth = sub.add_parser("synth", help="synthetic verification labs")
    synth_sub = p_synth.add_subparsers(dest="lab", required=True)

    p_est = synth_sub.add_parser("estimators", help="subsample-and-merge estimator trials")
    p_est.add_argument("--dist", choices=["gaussian", "cauchy"], required=True)
    p_est.add_argument("--seed", type=int, default=0)
    p_est.add_argument("--population", type=int, default=60000)
    p_est.add_argument("--subsample", type=int, default=300)
    p_est.add_argument("--trials", type=int, default=300)
    p_est.add_argument("--batch-size", type=int, default=20)
    p_est.add_argument("--epochs", type=int, default=200)
    p_est.add_argument("--init-x", type=float, default=10.0)
    p_est.add_argument("--init-y", type=float, default=10.0)
    p_est.add_argument("--lr", type=float, default=None, help="default 0.1 cauchy / 0.01 gaussian")
    p_est.add_argument("--beta1", type=float, default=None, help="default 0.2")
    p_est.add_argument("--beta2", type=float, default=None, help="default 0.2")
    p_est.add_argument("--eps", type=float, default=None, help="default 1e-8")
    p_est.add_argument("--workers", type=int, default=1)
    p_est.add_argument("-o", "--output", default="estimators.csv")
    p_est.add_argument("--quiet", action="store_true")
    p_est.set_defaults(func=cmd_synth_estimators)

    p_cycle = synth_sub.add_parser("cycle", help="constant-step cycling dynamics")
    p_cycle.add_argument("--k", type=float, default=1.0)
    p_cycle.add_argument("--omega", type=float, default=1.0)
    p_cycle.add_argument("--cycles", type=int, default=2500)
    p_cycle.add_argument("-o", "--output", default="cycle.csv")
    p_cycle.add_argument("--quiet", action="store_true")
    p_cycle.set_defaults(func=cmd_synth_cycle)

    p_conv = synth_sub.add_parser("convergence", help="decaying-schedule tail-bound check")
    p_conv.add_argument("--alpha", type=float, default=-1.5)
    p_conv.add_argument("--c", type=float, default=1.0)
    p_conv.add_argument("--steps", type=int, default=100000)
    p_conv.add_argument("--k", type=float, default=1.0)
    p_conv.add_argument("--omega", type=float, default=1.0)
    p_conv.add_argument("-o", "--output", default=None)
    p_conv.add_argument("--quiet", action="store_true")
    p_conv.set_defaults(func=cmd_synth_convergence)

    p_wlln = synth_sub.add_parser("wlln", help="soup coverage over growing sample sizes")
    p_wlln.add_argument("--dist", choices=["gaussian", "cauchy"], default="gaussian")
    p_wlln.add_argument("--sizes", default="10,100,1000,10000")
    p_wlln.add_argument("--trials", type=int, default=200)
    p_wlln.add_argument("--seed", type=int, default=0)
    p_wlln.add_argument("--epsilon", type=float, default=0.1)
    p_wlln.add_argument("-o", "--output", default="wlln.csv")
    p_wlln.add_argument("--quiet", action="store_true")
    p_wlln.set_defaults(func=cmd_synth_wlln)

    p_fed = sub.add_parser("fed", help="federated protocol simulators")
    add_common(p_fed, config=True)
    p_fed.set_defaults(func=cmd_fed)

    p_verify = sub.add_parser("verify", help="built-in verification suites")
    p_verify.add_argument("suite", choices=sorted(SUITES) + ["all"])
    p_verify.add_argument("--quiet", action="store_true")
    p_verify.set_defaults(func=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for line in exc.errors:
            print(f"config error: {line}", file=sys.stderr)
        return 1
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, SchemaMismatch, EngineError, ScheduleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
