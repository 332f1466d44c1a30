"""Reproducibility harness: configuration, single runs, sweeps over
tasks x methods x budgets x seeds x observations, and plot-data emission.

Configuration precedence is flags > config file > defaults; the resolved,
fully explicit configuration is written to the run directory as
``config.json`` and reproduces the run byte for byte.
"""

import argparse
import concurrent.futures
import csv
import itertools
import json
import os
import sys
import time
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from unle import metrics as metrics_mod
from unle import nets, pipelines, tasks
from unle.ebm import TrainConfig

METHODS = ("aunle", "sunle-exchange", "sunle-divi")

# dotted flag name -> (RunConfig attribute, type)
_KEYS = {
    "task": ("task", str),
    "method": ("method", str),
    "budget": ("budget", int),
    "rounds": ("rounds", int),
    "seed": ("seed", int),
    "observation": ("observation", int),
    "out": ("out", str),
    "train.max_iter": ("train_max_iter", int),
    "train.lr": ("train_lr", float),
    "train.mode": ("train_mode", str),
    "train.mcmc_steps": ("train_mcmc_steps", int),
    "train.batch": ("train_batch", int),
    "smc.L": ("smc_l", int),
    "smc.kernel_steps": ("smc_kernel_steps", int),
    "sampler.chains": ("sampler_chains", int),
    "sampler.steps": ("sampler_steps", int),
    "sampler.warmup": ("sampler_warmup", int),
    "sampler.inner_steps": ("sampler_inner_steps", int),
    "metric.n": ("metric_n", int),
    "metric.per_round": ("metric_per_round", int),
}


@dataclass
class RunConfig:
    """One experiment cell; every field has a default."""

    task: str = "two_moons"
    method: str = "aunle"
    budget: int = 1000
    rounds: int = 5
    seed: int = 0
    observation: int = 0
    out: str = None
    train_max_iter: int = None       # None -> per-task preset
    train_lr: float = None           # None -> per-task preset
    train_mode: str = "mcmc"
    train_mcmc_steps: int = 50
    train_batch: int = None
    smc_l: int = 20
    smc_kernel_steps: int = 3
    sampler_chains: int = 1000
    sampler_steps: int = 200
    sampler_warmup: int = 200
    sampler_inner_steps: int = 100
    metric_n: int = 1000
    metric_per_round: int = 0

    def resolved(self):
        """Apply per-task presets; afterwards nothing is implicit."""
        cfg = RunConfig(**asdict(self))
        if cfg.out is None:
            cfg.out = os.environ.get("UNLE_OUT", "runs")
        if cfg.train_max_iter is None:
            small = cfg.task == "gaussian_linear_uniform" and cfg.budget <= 1000
            cfg.train_max_iter = 10 if small else 500
        if cfg.train_lr is None:
            cfg.train_lr = 0.001 if cfg.task == "lotka_volterra" else 0.01
        return cfg

    def validate(self):
        if self.task not in tasks.task_names():
            raise ValueError(f"unknown task {self.task!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.budget < self.rounds:
            raise ValueError("budget must be at least the number of rounds")

    def to_flat_dict(self):
        d = asdict(self)
        return {dotted: d[attr] for dotted, (attr, _) in _KEYS.items()}

    @staticmethod
    def from_flat_dict(doc):
        kwargs = {}
        for dotted, (attr, typ) in _KEYS.items():
            if dotted in doc and doc[dotted] is not None:
                kwargs[attr] = typ(doc[dotted])
        return RunConfig(**kwargs)

    def pipeline_config(self):
        train = TrainConfig(
            max_iter=self.train_max_iter,
            learning_rate=self.train_lr,
            mcmc_steps=self.train_mcmc_steps,
            batch_size=self.train_batch,
            mode=self.train_mode,
            smc_steps=self.smc_l,
            smc_kernel_steps=self.smc_kernel_steps,
        )
        sampler = pipelines.SamplerConfig(
            chains=self.sampler_chains,
            steps=self.sampler_steps,
            warmup=self.sampler_warmup,
            inner_steps=self.sampler_inner_steps,
            exchange_chains=min(self.sampler_chains, 100),
            exchange_steps=2 * self.sampler_steps,
            exchange_burnin=2 * self.sampler_warmup,
        )
        return pipelines.PipelineConfig(train=train, sampler=sampler,
                                        n_posterior=self.metric_n)


def run_dir_for(cfg):
    return os.path.join(cfg.out, cfg.task, cfg.method,
                        f"b{cfg.budget}_s{cfg.seed}_o{cfg.observation}")


RESULT_COLUMNS = ["task", "method", "budget", "round", "metric", "value",
                  "seed", "observation", "train_minutes", "simulate_minutes",
                  "infer_minutes", "wall_minutes"]


def write_results_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def reference_samples(task_name, observation, n, out_root):
    """Reference-posterior samples for (task, observation), cached on disk.

    The cache file is created atomically so concurrent sweep cells cannot
    observe a partial write.
    """
    task = tasks.get_task(task_name)
    ref_dir = os.path.join(out_root, "reference", task_name)
    os.makedirs(ref_dir, exist_ok=True)
    path = os.path.join(ref_dir, f"obs{observation}_n{n}.csv")
    if os.path.exists(path):
        return tasks.load_samples_csv(path)
    _, x_o = tasks.sample_observation(task, observation)
    seed = np.random.SeedSequence([zlib.crc32(task_name.encode()), observation, n, 7])
    rng = np.random.Generator(np.random.PCG64(seed))
    samples = tasks.reference_posterior(task, x_o, n, rng)
    tmp = f"{path}.tmp.{os.getpid()}"
    tasks.save_samples_csv(tmp, samples)
    os.replace(tmp, path)
    return samples


def execute_run(cfg):
    """Run one experiment cell; returns (run_dir, result rows)."""
    cfg = cfg.resolved()
    cfg.validate()
    run_dir = run_dir_for(cfg)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_flat_dict(), fh, indent=2, sort_keys=True)

    task = tasks.get_task(cfg.task)
    _, x_o = tasks.sample_observation(task, cfg.observation)
    pcfg = cfg.pipeline_config()
    root = np.random.SeedSequence([cfg.seed, cfg.observation])
    records = []
    t0 = time.perf_counter()
    if cfg.method == "aunle":
        pipelines.aunle(task, cfg.budget, pcfg, root, x_o=x_o, record_out=records)
    else:
        mode = "divi" if cfg.method == "sunle-divi" else "exchange"
        pipelines.sunle(task, cfg.budget, cfg.rounds, pcfg, mode, root,
                        x_o=x_o, record_out=records)
    wall_s = time.perf_counter() - t0

    ref = None
    if task.has_true_loglik:
        ref = reference_samples(cfg.task, cfg.observation, cfg.metric_n, cfg.out)

    rows = []
    t_train = sum(r.timings.get("train_s", 0.0) for r in records) / 60.0
    t_sim = sum(r.timings.get("simulate_s", 0.0) for r in records) / 60.0
    t_infer = sum(r.timings.get("infer_s", 0.0) for r in records) / 60.0
    base = {
        "task": cfg.task, "method": cfg.method, "budget": cfg.budget,
        "seed": cfg.seed, "observation": cfg.observation,
        "train_minutes": repr(t_train), "simulate_minutes": repr(t_sim),
        "infer_minutes": repr(t_infer), "wall_minutes": repr(wall_s / 60.0),
    }
    metric_seed = np.random.SeedSequence([cfg.seed, cfg.observation, 999])
    metric_rng = np.random.Generator(np.random.PCG64(metric_seed))
    for rec in records:
        rdir = os.path.join(run_dir, f"round_{rec.round_index}")
        os.makedirs(rdir, exist_ok=True)
        rec.dataset.to_csv(os.path.join(rdir, "dataset.csv"))
        tasks.save_samples_csv(os.path.join(rdir, "posterior_samples.csv"),
                               rec.posterior_samples)
        ckpt = rec.energy.to_dict()
        if rec.lz_net is not None:
            ckpt["lz_net"] = rec.lz_net.to_dict()
        with open(os.path.join(rdir, "energy.ckpt"), "w", encoding="utf-8") as fh:
            json.dump(ckpt, fh)
        with open(os.path.join(rdir, "train_log.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["iter", "data_term_norm",
                                               "model_term_norm",
                                               "mean_acceptance", "ess"])
            w.writeheader()
            for row in rec.train_log:
                w.writerow(row)
        is_final = rec.round_index == records[-1].round_index
        if ref is not None and (cfg.metric_per_round or is_final):
            c = metrics_mod.c2st(rec.posterior_samples[:cfg.metric_n], ref,
                                 metric_rng)
            e = metrics_mod.energy_distance(rec.posterior_samples[:cfg.metric_n],
                                            ref)
            rec.metrics = {"c2st": c.value, "energy_distance": e.value}
            for name, value in rec.metrics.items():
                rows.append(dict(base, round=rec.round_index, metric=name,
                                 value=repr(value)))
        with open(os.path.join(rdir, "metrics.json"), "w", encoding="utf-8") as fh:
            json.dump({"metrics": rec.metrics, "diagnostics": rec.diagnostics,
                       "timings": rec.timings}, fh, indent=2, sort_keys=True)
    write_results_csv(os.path.join(run_dir, "results.csv"), rows)
    return run_dir, rows


def _sweep_cell(flat_cfg):
    cfg = RunConfig.from_flat_dict(flat_cfg)
    try:
        run_dir, rows = execute_run(cfg)
        return {"rows": rows, "error": None, "run_dir": run_dir}
    except Exception as exc:  # cell failures must not kill the sweep
        return {"rows": [], "error": f"{type(exc).__name__}: {exc}",
                "cfg": flat_cfg}


def execute_sweep(grid, jobs=1):
    """Cartesian product of tasks x methods x budgets x seeds x observations."""
    base = {k: v for k, v in grid.items()
            if k not in ("tasks", "methods", "budgets", "seeds", "observations")}
    cells = []
    for task, method, budget, seed, obs in itertools.product(
            grid.get("tasks", ["two_moons"]),
            grid.get("methods", ["aunle"]),
            grid.get("budgets", [1000]),
            grid.get("seeds", [0]),
            grid.get("observations", [0])):
        flat = dict(base)
        flat.update({"task": task, "method": method, "budget": int(budget),
                     "seed": int(seed), "observation": int(obs)})
        cells.append(flat)

    out_root = grid.get("out") or os.environ.get("UNLE_OUT", "runs")
    # warm the reference cache serially so parallel cells only read it
    n_metric = int(grid.get("metric.n", 1000))
    for cell in cells:
        task = tasks.get_task(cell["task"])
        if task.has_true_loglik:
            reference_samples(cell["task"], cell["observation"], n_metric, out_root)

    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_cell, cells))
    else:
        outcomes = [_sweep_cell(c) for c in cells]

    all_rows = []
    failures = []
    for cell, outcome in zip(cells, outcomes):
        if outcome["error"] is not None:
            failures.append({"cell": cell, "error": outcome["error"]})
        all_rows.extend(outcome["rows"])
    all_rows.sort(key=lambda r: (r["task"], r["method"], int(r["budget"]),
                                 int(r["seed"]), int(r["observation"]),
                                 int(r["round"]), r["metric"]))
    os.makedirs(out_root, exist_ok=True)
    results_path = os.path.join(out_root, "results.csv")
    write_results_csv(results_path, all_rows)
    if failures:
        with open(os.path.join(out_root, "failures.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(failures, fh, indent=2)
    return results_path, failures


def emit_plot_data(results_path, out_dir):
    """Reshape results.csv into tidy accuracy and runtime-breakdown CSVs."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    with open(results_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "metric" not in reader.fieldnames:
            raise ValueError(f"{results_path}: missing results header")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append({
                    "task": row["task"], "method": row["method"],
                    "budget": int(row["budget"]), "round": int(row["round"]),
                    "metric": row["metric"], "value": float(row["value"]),
                    "seed": int(row["seed"]),
                    "observation": int(row.get("observation", 0) or 0),
                    "train_minutes": float(row.get("train_minutes", 0) or 0),
                    "simulate_minutes": float(row.get("simulate_minutes", 0) or 0),
                    "infer_minutes": float(row.get("infer_minutes", 0) or 0),
                })
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{results_path}:{lineno}: bad row ({exc})") from exc

    acc_path = os.path.join(out_dir, "accuracy.csv")
    runs = {}
    for r in rows:
        if r["metric"] != "c2st":
            continue
        key = (r["task"], r["method"], r["budget"], r["seed"], r["observation"])
        if key not in runs or r["round"] > runs[key]["round"]:
            runs[key] = r
    groups = {}
    for r in runs.values():
        groups.setdefault((r["task"], r["method"], r["budget"]), []).append(r["value"])
    with open(acc_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "method", "budget", "metric", "value", "n_runs"])
        for (task, method, budget), vals in sorted(groups.items()):
            w.writerow([task, method, budget, "c2st",
                        repr(float(np.median(vals))), len(vals)])

    rt_path = os.path.join(out_dir, "runtime_breakdown.csv")
    seen = {}
    for r in rows:
        key = (r["task"], r["method"], r["budget"], r["seed"], r["observation"])
        seen[key] = r
    with open(rt_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "method", "budget", "seed", "observation",
                    "phase", "minutes"])
        for key in sorted(seen):
            r = seen[key]
            for phase, col in (("train", "train_minutes"),
                               ("simulate", "simulate_minutes"),
                               ("infer", "infer_minutes")):
                w.writerow([r["task"], r["method"], r["budget"], r["seed"],
                            r["observation"], phase, repr(r[col])])
    return acc_path, rt_path


# ---------------------------------------------------------------------------
# argument parsing


def _add_run_flags(p):
    p.add_argument("--config", default=None, help="JSON config file (flat keys)")
    for dotted, (_, typ) in _KEYS.items():
        p.add_argument(f"--{dotted}", type=typ, default=None, dest=dotted)


def _config_from_args(args):
    file_doc = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            file_doc = json.load(fh)
    merged = dict(file_doc)
    for dotted in _KEYS:
        val = getattr(args, dotted, None)
        if val is not None:
            merged[dotted] = val
    return RunConfig.from_flat_dict(merged)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="unle",
        description="Energy-based synthetic likelihood experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment cell")
    _add_run_flags(p_run)

    p_sweep = sub.add_parser("sweep", help="run a grid of cells")
    p_sweep.add_argument("--grid", required=True, help="JSON grid file")
    p_sweep.add_argument("--jobs", type=int, default=1)

    p_emit = sub.add_parser("emit-plot-data", help="tidy CSVs from results.csv")
    p_emit.add_argument("results", help="path to results.csv")
    p_emit.add_argument("--out", default="plot_data")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = _config_from_args(args)
            run_dir, _ = execute_run(cfg)
            print(run_dir)
            return 0
        if args.command == "sweep":
            with open(args.grid, encoding="utf-8") as fh:
                grid = json.load(fh)
            results_path, failures = execute_sweep(grid, jobs=args.jobs)
            print(results_path)
            return 0 if not failures else 1
        if args.command == "emit-plot-data":
            acc, rt = emit_plot_data(args.results, args.out)
            print(acc)
            print(rt)
            return 0
    except Exception as exc:
        record = {"error": str(exc), "type": type(exc).__name__}
        print(json.dumps(record), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
