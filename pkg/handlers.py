"""
Command handlers for pruneflow.
Commands: train, flowcheck, compare, analyze
Each command writes its artifacts into an append-only run directory named by
the config hash and records hashes, timings and checks in manifest.json.
"""
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Optional

import numpy as np
from tabulate import tabulate

from analysis import (
    average_results,
    early_layer_ratio,
    ebt_correlation_trace,
    ebt_rows,
    grasp_vs_loss_correlation,
    l2_vs_distance_trace,
    layerwise_report,
    pearson,
    read_scatter_csv,
    rows_csv,
    summary_csv,
    trend,
    write_scatter_csv,
)
from config import config_hash
from flowlab import (
    check_first_identity,
    check_layer_decomposition,
    check_loss_bound,
    check_loss_identity,
    check_second_identity,
    integrate_flow,
    observed_order,
    sgd_expectation_check,
)
from masking import rounding_report, round_half_up
from netmodel import build_cnn, build_mlp, build_quadratic, make_blobs, save_checkpoint
from trainer import RunLog, TrainConfig, prune_and_train
from utils import ConfigError, canonical_json, csv_bytes, load_state, save_state, write_artifact

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
EXPERIMENTS = ("grasp_loss", "ebt", "l2_distance", "layerwise")


# =============================================================================
# RUN DIRECTORY
# =============================================================================

class RunDirectory:
    """
    Append-only output directory of one command invocation.

    Artifacts are written once; a rerun with the same config must produce
    the same bytes. manifest.json is the join point and is rewritten.
    """

    def __init__(self, path: str, config: dict):
        self.path = path
        self.config = config
        if os.path.exists(os.path.join(path, CONFIG_FILE)):
            logger.warning(f"Reusing run directory {path}")
        self.state = load_state(path)
        self.state["config_hash"] = config_hash(config)
        self.state["seeds"] = list(config["seeds"])
        self.write(CONFIG_FILE, canonical_json(config))

    @classmethod
    def create(cls, out_dir: str, command: str, config: dict) -> "RunDirectory":
        path = os.path.join(out_dir, f"{command}-{config_hash(config)[:12]}")
        return cls(path, config)

    def write(self, name: str, payload: bytes) -> str:
        digest = write_artifact(os.path.join(self.path, name), payload)
        self.state["artifacts"][name] = digest
        return digest

    def check(self, name: str, value, passed: bool, hard: bool = True):
        self.state["checks"][name] = {"value": value, "passed": bool(passed), "hard": hard}
        level = logging.INFO if passed or not hard else logging.ERROR
        logger.log(level, f"Check {name}: {'pass' if passed else 'FAIL'} ({value})")

    @contextmanager
    def timed(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.state["timings"][name] = round(time.perf_counter() - start, 6)

    def failed_checks(self) -> list[str]:
        return [name for name, c in self.state["checks"].items() if c["hard"] and not c["passed"]]

    def close(self) -> bool:
        return save_state(self.path, self.state)


# =============================================================================
# BUILDERS
# =============================================================================

def build_model(config: dict, seed: int):
    """Model described by config['model'], initialized with `seed`."""
    spec = config["model"]
    if spec["type"] == "mlp":
        return build_mlp(spec["widths"], spec.get("activation", "tanh"), seed,
                         spec.get("init_scale", 1.0), spec.get("prune_head", False), spec.get("head_scale"))
    if spec["type"] == "cnn":
        return build_cnn(spec["channels"], spec.get("kernel", 3), config["data"]["classes"], seed,
                         tuple(spec.get("input_shape", (4, 4, 1))), spec.get("activation", "relu"),
                         spec.get("init_scale", 1.0), spec.get("prune_head", False), spec.get("head_scale"))
    return build_quadratic(spec["A"], spec["theta0"], spec.get("grouping"))


def build_data(config: dict, seed: int):
    """Blob dataset for network models, None for the quadratic model."""
    if config["model"]["type"] == "quadratic":
        return None
    data = config["data"]
    data_seed = seed if data.get("seed") is None else data["seed"]
    return make_blobs(data["classes"], data["dims"], data["samples_per_class"], data["spread"], data_seed)


def train_config(config: dict, seed: int, **changes) -> TrainConfig:
    tc = TrainConfig.from_dict({**config["train"], "seed": seed, **changes})
    tc.validate()
    return tc


def _require_network(config: dict, command: str):
    if config["model"]["type"] == "quadratic":
        raise ConfigError(f"config.model.type: {command} needs a network model, not 'quadratic'")


# =============================================================================
# TRAIN
# =============================================================================

def cmd_train(config: dict, out_dir: str) -> RunDirectory:
    """Prune-and-train once per seed; RunLog CSVs, masks and checkpoints."""
    _require_network(config, "train")
    for seed in config["seeds"]:
        train_config(config, seed)

    run = RunDirectory.create(out_dir, "train", config)
    for seed in config["seeds"]:
        tc = train_config(config, seed)
        model = build_model(config, seed)
        data = build_data(config, seed)
        with run.timed(f"train-seed{seed}"):
            log, mask = prune_and_train(model, data, tc)

        run.write(f"runlog-seed{seed}.csv", log.to_csv())
        run.write(f"checkpoint-seed{seed}.ckpt", save_checkpoint(model))
        if tc.keep_history:
            run.write(f"history-seed{seed}.bin", log.history_bytes())
        if tc.measure is None:
            continue
        run.write(f"rounds-seed{seed}.csv", log.masks_csv())
        run.write(f"mask-seed{seed}.csv", mask.to_csv())
        run.write(f"mask-seed{seed}.bin", mask.save_bitset())
        if tc.measure == "uniform":
            run.write(f"rounding-seed{seed}.csv", rows_csv(rounding_report(mask, tc.target)))
        else:
            expected = round_half_up(tc.target * mask.n_prunable)
            exact = mask.pruned_count == expected or bool(mask.floor_events)
            run.check(f"accounting-seed{seed}", f"{mask.pruned_count}/{expected}", exact)
        zeroed = all(np.all(model.params[name][m == 0] == 0.0) for name, m in model.mask.items())
        run.check(f"masked-zero-seed{seed}", zeroed, zeroed)
    return run


# =============================================================================
# FLOWCHECK
# =============================================================================

def _equal_partition(data, minibatches: int):
    if data is None:
        return None
    usable = (len(data) // minibatches) * minibatches
    return data.subset(np.arange(usable))


def cmd_flowcheck(config: dict, out_dir: str) -> RunDirectory:
    """Flow traces at halved step sizes plus the SGD expectation checks."""
    flow = config["flow"]
    run = RunDirectory.create(out_dir, "flowcheck", config)
    summary, expectations = [], []

    for seed in config["seeds"]:
        model = build_model(config, seed)
        data = build_data(config, seed)
        for integrator in flow["integrators"]:
            firsts, seconds = [], []
            for i, h in enumerate(flow["steps"]):
                steps = int(round(flow["horizon"] / h))
                with run.timed(f"flow-{integrator}-h{i}-seed{seed}"):
                    trace = integrate_flow(model, data, h, steps, integrator, flow["temperature"])
                run.write(f"trace-{integrator}-h{i}-seed{seed}.csv", trace.to_csv())

                first, second = check_first_identity(trace), check_second_identity(trace)
                margin = check_loss_bound(trace)
                decomposition = check_layer_decomposition(trace)
                firsts.append(first)
                seconds.append(second)
                summary.append([seed, integrator, h, first, second, check_loss_identity(trace),
                                decomposition, margin])
                # an explicit Euler step overshoots the bound by O(h²) at the first sample
                run.check(f"loss-bound-{integrator}-h{i}-seed{seed}", margin,
                          margin >= -flow["bound_tolerance"], hard=integrator == "rk4")
                run.check(f"layer-decomposition-{integrator}-h{i}-seed{seed}", decomposition, decomposition <= 1e-12)

            orders = {"first": observed_order(firsts), "second": observed_order(seconds)}
            for identity, values in orders.items():
                if not values:
                    continue
                worst = min(values)
                # only rk4 traces are accurate enough for the central-difference order to show
                run.check(f"order-{identity}-{integrator}-seed{seed}", values,
                          worst >= flow["min_order"], hard=integrator == "rk4")

        batch = _equal_partition(data, flow["minibatches"])
        residuals = {1: [], 2: []}
        for rate in flow["rates"]:
            for order in (1, 2):
                residuals[order].append(sgd_expectation_check(model, batch, rate, order, flow["minibatches"],
                                                              flow["enumeration_cap"], flow["temperature"]))
            expectations.append([seed, rate, residuals[1][-1], residuals[2][-1]])
        low, high = flow["ratio_range"][:2]
        for order, values in residuals.items():
            ratios = [a / b for a, b in zip(values[:-1], values[1:]) if b > 0]
            if ratios:
                run.check(f"expectation-order{order}-seed{seed}", ratios,
                          all(low <= r <= high for r in ratios))

    run.write("flowcheck-summary.csv", csv_bytes(
        ("seed", "integrator", "step", "first_identity", "second_identity", "loss_identity",
         "layer_decomposition", "loss_bound_margin"), summary))
    run.write("expectation.csv", csv_bytes(("seed", "rate", "order1_residual", "order2_residual"), expectations))
    return run


# =============================================================================
# COMPARE
# =============================================================================

def _compare_one(config: dict, measure: str, rounds: int, seed: int) -> dict:
    tc = train_config(config, seed, measure=measure, rounds=rounds, keep_history=False)
    model = build_model(config, seed)
    log, mask = prune_and_train(model, build_data(config, seed), tc)
    last = log.records[-1]
    return {
        "measure": measure,
        "rounds": rounds,
        "seed": seed,
        "final_train_loss": last.train_loss,
        "final_train_acc": last.train_acc,
        "final_eval_acc": last.eval_acc,
        "pruned_fraction": last.pruned_fraction,
        "steps": log.steps,
        "runlog": log.to_csv(),
    }


def format_compare_table(rows: list[dict]) -> str:
    """Mean final accuracy per measure × rounds, as a console table."""
    table = []
    for measure in dict.fromkeys(r["measure"] for r in rows):
        for rounds in dict.fromkeys(r["rounds"] for r in rows):
            cell = [r for r in rows if r["measure"] == measure and r["rounds"] == rounds]
            if not cell:
                continue
            table.append([measure, rounds, len(cell),
                          np.mean([r["final_eval_acc"] for r in cell]),
                          np.mean([r["final_train_loss"] for r in cell])])
    return tabulate(table, headers=["measure", "rounds", "seeds", "eval acc", "train loss"], floatfmt=".4f")


def _direction_checks(run: RunDirectory, rows: list[dict], hard: bool = True):
    """Majority-of-seeds direction checks per rounds setting; only the most iterative one can be hard."""
    by_key = {(r["measure"], r["rounds"], r["seed"]): r for r in rows}
    most = max(r["rounds"] for r in rows)
    for rounds in sorted({r["rounds"] for r in rows}):
        seeds = sorted({r["seed"] for r in rows if r["rounds"] == rounds})
        pairs = [
            ("magnitude-vs-loss-train-loss", "magnitude", "loss", lambda a, b: a["final_train_loss"] <= b["final_train_loss"]),
            ("proposed-vs-loss-eval-acc", "proposed", "loss", lambda a, b: a["final_eval_acc"] >= b["final_eval_acc"]),
        ]
        for name, left, right, holds in pairs:
            wins = [holds(by_key[(left, rounds, s)], by_key[(right, rounds, s)])
                    for s in seeds if (left, rounds, s) in by_key and (right, rounds, s) in by_key]
            if wins:
                run.check(f"{name}-r{rounds}", f"{sum(wins)}/{len(wins)}", 2 * sum(wins) > len(wins),
                          hard=hard and rounds == most)


def cmd_compare(config: dict, out_dir: str, workers: int = 1) -> tuple[RunDirectory, str]:
    """Final accuracy per measure × rounds × seed under one training budget."""
    _require_network(config, "compare")
    jobs = [(m, r, s) for m in config["compare"]["measures"] for r in config["compare"]["rounds"]
            for s in config["seeds"]]
    for measure, rounds, seed in jobs:
        train_config(config, seed, measure=measure, rounds=rounds)

    run = RunDirectory.create(out_dir, "compare", config)
    logger.info(f"Comparing {len(jobs)} runs on {workers} worker(s)")
    with run.timed("compare"):
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            rows = list(pool.map(lambda job: _compare_one(config, *job), jobs))

    columns = ("measure", "rounds", "seed", "final_train_loss", "final_train_acc", "final_eval_acc",
               "pruned_fraction", "steps")
    for row in rows:
        run.write(f"runlog-{row['measure']}-r{row['rounds']}-seed{row['seed']}.csv", row["runlog"])
    run.write("compare.csv", csv_bytes(columns, ([row[c] for c in columns] for row in rows)))

    steps = {row["steps"] for row in rows}
    run.check("budget-fairness", sorted(steps), len(steps) == 1)
    _direction_checks(run, rows, config["compare"]["enforce"])
    table = format_compare_table(rows)
    return run, table


# =============================================================================
# ANALYZE
# =============================================================================

def _stored_config(run_dir: str) -> dict:
    path = os.path.join(run_dir, CONFIG_FILE)
    if not os.path.exists(path):
        raise ConfigError(f"{run_dir} is not a run directory (no {CONFIG_FILE})")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _recorded_log(config: dict, seed: int, source: Optional[str]) -> Optional[RunLog]:
    """History a `train` run stored for `seed`, if it was trained under the same model, data and train sections."""
    if source is None:
        return None
    stored = _stored_config(source)
    if any(stored.get(section) != config[section] for section in ("model", "data", "train")):
        logger.info(f"Config of {source} differs in model/data/train; retraining seed {seed}")
        return None
    path = os.path.join(source, f"history-seed{seed}.bin")
    if not os.path.exists(path):
        return None
    with open(path, "rb") as f:
        log = RunLog.from_history_bytes(f.read())
    return log if log.param_history else None


def _dense_run(config: dict, seed: int, source: Optional[str] = None, step_history: bool = False):
    """
    (model, train split, RunLog) for one seed.

    Reads the history recorded in `source` when it matches the config,
    otherwise trains a dense model under the config's budget.
    """
    model = build_model(config, seed)
    data = build_data(config, seed)
    tc = train_config(config, seed)
    log = _recorded_log(config, seed, source)
    if log is not None and (log.step_param_history or not step_history):
        logger.info(f"Seed {seed}: using the history recorded in {source}")
        model.set_params(log.param_history[-1])
    else:
        tc = train_config(config, seed, measure=None, keep_history=True, step_history=step_history)
        log, _ = prune_and_train(model, data, tc)
    train, _ = data.split(tc.eval_fraction, seed)
    return model, train, log


def _checkpoints(log) -> dict[str, int]:
    last = len(log.param_history) - 1
    return {"init": 0, "mid": last // 2, "end": last}


def analyze_grasp_loss(run: RunDirectory, config: dict, source: Optional[str] = None):
    settings = config["analysis"]
    per_checkpoint: dict[tuple, list] = {}
    results = []
    for seed in config["seeds"]:
        model, train, log = _dense_run(config, seed, source)
        saved = model.params
        for label, epoch in _checkpoints(log).items():
            model.params = log.param_history[epoch]
            found = grasp_vs_loss_correlation(model, train, settings["grasp_temperature"], stamp=epoch)
            for granularity, result in found.items():
                result.seed = seed
                name = f"analysis-grasp_loss-{label}-{granularity}-seed{seed}.csv"
                run.write(name, write_scatter_csv(result))
                _check_reingestion(run, name, result)
                results.append(result)
                per_checkpoint.setdefault((label, granularity), []).append(result)
        model.params = saved

    averaged = []
    for (label, granularity), group in per_checkpoint.items():
        mean = average_results(group)
        mean.extra["checkpoint"] = label
        averaged.append(mean)
    run.write("analysis-grasp_loss-summary.csv", summary_csv(results + averaged))

    structured = [r for r in averaged if r.granularity == "structured" and r.pearson is not None]
    high = sum(r.pearson >= settings["min_correlation"] for r in structured)
    run.check("grasp-loss-correlation", [r.pearson for r in structured], high >= 2, hard=settings["enforce"])


def _check_reingestion(run: RunDirectory, name: str, result):
    _, a, b = read_scatter_csv(os.path.join(run.path, name))
    reread = pearson(a, b) if a.size >= 3 else None
    same = reread == result.pearson or (reread is None and result.pearson is None)
    run.check(f"reingest-{name}", reread, same)


def analyze_ebt(run: RunDirectory, config: dict, source: Optional[str] = None):
    settings = config["analysis"]
    per_step = settings["ebt_per_step"]
    rising = 0
    for seed in config["seeds"]:
        model, train, log = _dense_run(config, seed, source, step_history=per_step)
        points = ebt_correlation_trace(log, model, train, settings["every"], settings["sigma_target"], per_step)
        suffix = "-steps" if per_step else ""
        run.write(f"analysis-ebt{suffix}-seed{seed}.csv", rows_csv(ebt_rows(points)))
        correlation_trend = trend([p.correlation.pearson for p in points])
        distance_trend = trend([float(p.mask_distance) for p in points])
        logger.info(f"Seed {seed}: ebt correlation trend {correlation_trend}, mask distance trend {distance_trend}")
        if correlation_trend is not None and correlation_trend > 0 and (distance_trend is None or distance_trend <= 0):
            rising += 1
    run.check("ebt-trend", f"{rising}/{len(config['seeds'])}", 2 * rising > len(config["seeds"]),
              hard=settings["enforce"])


def analyze_l2_distance(run: RunDirectory, config: dict, source: Optional[str] = None):
    settings = config["analysis"]
    means, overlaps = [], []
    for seed in config["seeds"]:
        model, _, log = _dense_run(config, seed, source)
        results = l2_vs_distance_trace(log, model, settings["overlap_target"])
        for r in results:
            r.seed = seed
        run.write(f"analysis-l2_distance-seed{seed}.csv", summary_csv(results))
        defined = [r.pearson for r in results if r.pearson is not None]
        means.append(float(np.mean(defined)) if defined else None)
        overlaps.append(results[-1].extra["overlap"])
    run.write("analysis-l2_distance-summary.csv",
              csv_bytes(("seed", "mean_pearson", "final_overlap"), zip(config["seeds"], means, overlaps)))
    defined = [m for m in means if m is not None]
    value = float(np.mean(defined)) if defined else None
    run.check("l2-distance-correlation", value, value is not None and value >= 0.9, hard=settings["enforce"])
    run.check("l2-distance-overlap", float(np.mean(overlaps)), np.mean(overlaps) >= 0.9, hard=settings["enforce"])


def analyze_layerwise(run: RunDirectory, config: dict, source: Optional[str] = None):
    # both arms are pruned runs of their own; a recorded history cannot stand in for them
    settings = config["analysis"]
    aggressive = 0
    for seed in config["seeds"]:
        early = {}
        for measure in ("grasp", "grasp_abs"):
            model = build_model(config, seed)
            tc = train_config(config, seed, measure=measure, grasp_temperature=settings["grasp_temperature"])
            log, mask = prune_and_train(model, build_data(config, seed), tc)
            run.write(f"analysis-layerwise-{measure}-ratios-seed{seed}.csv",
                      rows_csv(layerwise_report(log.masks, "ratios")))
            run.write(f"analysis-layerwise-{measure}-gradnorm-seed{seed}.csv",
                      rows_csv(layerwise_report(log, "gradnorm")))
            early[measure] = early_layer_ratio(mask)
        logger.info(f"Seed {seed}: early-layer ratio grasp {early['grasp']:.3f}, |grasp| {early['grasp_abs']:.3f}")
        aggressive += early["grasp"] > early["grasp_abs"]
    run.check("grasp-early-layers", f"{aggressive}/{len(config['seeds'])}",
              2 * aggressive > len(config["seeds"]), hard=settings["enforce"])


ANALYSES = {
    "grasp_loss": analyze_grasp_loss,
    "ebt": analyze_ebt,
    "l2_distance": analyze_l2_distance,
    "layerwise": analyze_layerwise,
}


def cmd_analyze(config: dict, out_dir: str, experiments: Optional[list] = None,
                run_dir: Optional[str] = None) -> RunDirectory:
    """
    Run analysis experiments.

    With `run_dir`, the studies read the histories that run recorded. Outputs
    go into `run_dir` itself when the config is the one stored there, and
    into `run_dir/analyze-<hash>` when overrides or a seed pin changed it, so
    the run's own config.json is never rewritten. Without `run_dir` a fresh
    analyze-<hash> directory under `out_dir` is used.
    """
    _require_network(config, "analyze")
    experiments = experiments or config["analysis"]["experiments"]
    for experiment in experiments:
        if experiment not in ANALYSES:
            raise ConfigError(f"Unknown experiment '{experiment}' (expected one of {', '.join(EXPERIMENTS)})")

    if run_dir is None:
        run = RunDirectory.create(out_dir, "analyze", config)
    elif _stored_config(run_dir) == config:
        run = RunDirectory(run_dir, config)
    else:
        logger.info(f"Config differs from {os.path.join(run_dir, CONFIG_FILE)}; writing into a sub-directory")
        run = RunDirectory.create(run_dir, "analyze", config)

    for experiment in experiments:
        with run.timed(f"analysis-{experiment}"):
            ANALYSES[experiment](run, config, run_dir)
    return run
