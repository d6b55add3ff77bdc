"""Batch experiment harness.

Loads experiment configurations from YAML, runs seeded trials over
layout fixtures (optionally in parallel with deterministic output
order), aggregates success/violation/stuck metrics with Wilson
confidence intervals, fits GP lengthscales offline, and exports
plot-ready CSV data plus rendered PNG figures.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .environments import (
    GroundWorld,
    ground_safety_batch,
    parse_ground_fixture,
    validate_ground_world,
)
from .errors import ConfigError, FixtureError
from .explorer import TrialRecord, run_trial
from .gp import KernelParams, kernel_matrix
from .tabletop import ObjectWorld, parse_object_fixture, validate_object_world

DATA_DIR = Path(__file__).parent / "data"
FIXTURE_DIR = DATA_DIR / "fixtures"
CONFIG_DIR = DATA_DIR / "configs"

PRESETS = {
    "discrete-tab1": CONFIG_DIR / "discrete-tab1.yaml",
    "continuous-tab2": CONFIG_DIR / "continuous-tab2.yaml",
    "continuous-noise-sweep": CONFIG_DIR / "continuous-noise-sweep.yaml",
    "object-tab3": CONFIG_DIR / "object-tab3.yaml",
}

SEED_OFFSET_ENV = "SSX_SEED_OFFSET"


@dataclass(frozen=True)
class TrialSettings:
    """Flattened, trial-facing view of one experiment configuration."""

    case: str
    method: str
    kernel: KernelParams
    prior_mean: float
    beta: float
    beta_min: float
    beta_scale: float
    beta_scaling: bool
    lipschitz: float
    epsilon: float
    delta: float
    threshold: float
    step: float
    d_max: float
    max_iterations: int
    p_intended: float
    env_noise_var: float
    believed_noise_var: float
    thinning: bool
    config_hash: str


@dataclass(frozen=True)
class ExperimentConfig:
    case: str
    method: str
    layouts: tuple
    seeds: tuple
    gp: dict
    algo: dict
    noise: dict = field(default_factory=dict)
    believed_noise: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        try:
            seeds = doc["seeds"]
            if isinstance(seeds, str):  # "0-9" ranges
                a, b = seeds.split("-")
                seeds = list(range(int(a), int(b) + 1))
            return cls(
                case=doc["case"],
                method=doc.get("method", "ours"),
                layouts=tuple(doc["layouts"]),
                seeds=tuple(int(s) for s in seeds),
                gp=dict(doc["gp"]),
                algo=dict(doc["algo"]),
                noise=dict(doc.get("noise", {})),
                believed_noise=dict(doc.get("believed_noise", {})),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config key: {exc}") from exc

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} is not a mapping")
        return cls.from_dict(doc)

    def to_canonical(self) -> dict:
        return {
            "case": self.case,
            "method": self.method,
            "layouts": list(self.layouts),
            "seeds": list(self.seeds),
            "gp": self.gp,
            "algo": self.algo,
            "noise": self.noise,
            "believed_noise": self.believed_noise,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_canonical(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def settings(self) -> TrialSettings:
        gp = self.gp
        algo = self.algo
        kernel = KernelParams(
            float(gp["signal_variance"]),
            np.asarray(gp.get("lengthscales", [gp.get("lengthscale", 1.0)] * 2), float),
            float(gp.get("noise_variance", 0.0)),
        )
        prior_mean = float(gp.get("prior_mean", 0.0))
        beta = float(algo["beta"])
        threshold = float(algo["threshold"])
        step = float(algo["step"])
        settings = TrialSettings(
            case=self.case,
            method=self.method,
            kernel=kernel,
            prior_mean=prior_mean,
            beta=beta,
            beta_min=float(algo.get("beta_min", beta)),
            beta_scale=float(algo.get("beta_scale", 1.0)),
            beta_scaling=bool(algo.get("beta_scaling", False)),
            lipschitz=float(algo["lipschitz"]),
            epsilon=float(algo.get("epsilon", 0.0)),
            delta=float(algo["delta"]),
            threshold=threshold,
            step=step,
            d_max=float(algo.get("d_max", step)),
            max_iterations=int(algo.get("max_iterations", 5000)),
            p_intended=float(self.noise.get("p_intended", 1.0)),
            env_noise_var=float(self.noise.get("sigma_sq", 0.0)),
            believed_noise_var=float(
                self.believed_noise.get("sigma_sq", self.noise.get("sigma_sq", 0.0))
            ),
            thinning=bool(algo.get("thinning", False)),
            config_hash=self.config_hash(),
        )
        # unexplored states must read as unsafe at the configured beta,
        # otherwise expansion is unsound (a decayed beta may trade this
        # margin away deliberately)
        prior_upper = prior_mean + settings.beta * np.sqrt(kernel.signal_variance)
        if prior_upper <= threshold:
            raise ConfigError(
                "prior_mean + beta * prior std must exceed the threshold "
                f"({prior_upper:.3f} <= {threshold})"
            )
        return settings


def load_preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    cfg = ExperimentConfig.from_yaml(PRESETS[name])
    if overrides:
        doc = cfg.to_canonical()
        for key, val in overrides.items():
            if key in ("gp", "algo", "noise", "believed_noise"):
                doc[key] = {**doc[key], **val}
            else:
                doc[key] = val
        cfg = ExperimentConfig.from_dict(doc)
    return cfg


def load_world(layout: str):
    path = FIXTURE_DIR / f"{layout}.txt"
    if not path.exists():
        raise FixtureError(f"missing fixture {layout!r} ({path})")
    text = path.read_text()
    if layout.startswith("object"):
        return parse_object_fixture(text)
    return parse_ground_fixture(text)


def list_fixtures():
    return sorted(p.stem for p in FIXTURE_DIR.glob("*.txt"))


def seed_offset() -> int:
    return int(os.environ.get(SEED_OFFSET_ENV, "0"))


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def wilson_halfwidth(p_hat: float, n: int, z: float = 1.96) -> float:
    if n == 0:
        return 0.0
    denom = 1.0 + z * z / n
    return (z / denom) * np.sqrt(p_hat * (1 - p_hat) / n + z * z / (4 * n * n))


@dataclass
class MetricsSummary:
    n_trials: int
    success_rate: float
    violation_rate: float
    stuck_rate: float
    mean_states_explored: float
    success_hw: float
    violation_hw: float
    stuck_hw: float
    per_layout: dict

    @classmethod
    def from_records(cls, records) -> "MetricsSummary":
        n = len(records)
        if n == 0:
            return cls(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, {})
        succ = sum(r.outcome == "success" for r in records) / n
        viol = sum(r.outcome == "violation" for r in records) / n
        stuck = sum(r.outcome == "stuck" for r in records) / n
        states = float(np.mean([r.states_explored for r in records]))
        per_layout = {}
        for r in records:
            per_layout.setdefault(r.layout, []).append(r)
        layout_rows = {
            k: {
                "n": len(v),
                "success_rate": sum(x.outcome == "success" for x in v) / len(v),
                "violation_rate": sum(x.outcome == "violation" for x in v) / len(v),
                "stuck_rate": sum(x.outcome == "stuck" for x in v) / len(v),
                "mean_states_explored": float(
                    np.mean([x.states_explored for x in v])
                ),
            }
            for k, v in sorted(per_layout.items())
        }
        return cls(
            n_trials=n,
            success_rate=succ,
            violation_rate=viol,
            stuck_rate=stuck,
            mean_states_explored=states,
            success_hw=wilson_halfwidth(succ, n),
            violation_hw=wilson_halfwidth(viol, n),
            stuck_hw=wilson_halfwidth(stuck, n),
            per_layout=layout_rows,
        )

    def to_csv(self) -> str:
        header = (
            "scope,n,success_rate,violation_rate,stuck_rate,"
            "mean_states_explored,success_hw,violation_hw,stuck_hw"
        )
        rows = [header]
        rows.append(
            f"all,{self.n_trials},{self.success_rate:.6f},{self.violation_rate:.6f},"
            f"{self.stuck_rate:.6f},{self.mean_states_explored:.3f},"
            f"{self.success_hw:.6f},{self.violation_hw:.6f},{self.stuck_hw:.6f}"
        )
        for k, v in self.per_layout.items():
            rows.append(
                f"{k},{v['n']},{v['success_rate']:.6f},{v['violation_rate']:.6f},"
                f"{v['stuck_rate']:.6f},{v['mean_states_explored']:.3f},,,"
            )
        return "\n".join(rows) + "\n"


# --------------------------------------------------------------------------
# batch execution
# --------------------------------------------------------------------------


def _one_trial(args):
    layout, seed, canonical = args
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    cfg = ExperimentConfig.from_dict(canonical)
    world = load_world(layout)
    record = run_trial(world, cfg.settings(), seed)
    return record


def run_batch(config: ExperimentConfig, out_dir=None, workers: int = 1):
    """Execute |layouts| x |seeds| trials and aggregate metrics.

    The per-trial seed is shifted by the SSX_SEED_OFFSET environment
    variable.  Output order is deterministic regardless of worker
    scheduling.  Returns (records, summary).
    """
    for layout in config.layouts:
        load_world(layout)  # fail fast on missing fixtures
    offset = seed_offset()
    canonical = config.to_canonical()
    tasks = [
        (layout, seed + offset, canonical)
        for layout in config.layouts
        for seed in config.seeds
    ]
    if workers and workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_one_trial, tasks, chunksize=1))
    else:
        records = [_one_trial(t) for t in tasks]
    records.sort(key=lambda r: (r.layout, r.seed))
    summary = MetricsSummary.from_records(records)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "trajectories").mkdir(parents=True, exist_ok=True)
        with open(out / "records.jsonl", "w") as fh:
            for r in records:
                fh.write(r.to_json_line() + "\n")
        for r in records:
            path = out / "trajectories" / f"{r.layout}-seed{r.seed}.log"
            path.write_text("\n".join(r.trajectory_lines()) + "\n")
        (out / "summary.csv").write_text(summary.to_csv())
        (out / "config.json").write_text(
            json.dumps(config.to_canonical(), sort_keys=True, indent=2)
        )
    return records, summary


# --------------------------------------------------------------------------
# offline lengthscale fitting
# --------------------------------------------------------------------------


def fit_hyperparameters(
    layout: str,
    grid_resolution: float = 1.0,
    signal_variance: float = 8.0,
    noise_variance: float = 0.001,
    mode: str = "optimized",
    bounds=(0.2, 5.0),
) -> float:
    """Marginal-likelihood lengthscale fit on a dense safety sample.

    Signal and noise variances stay fixed; only the (shared, isotropic)
    lengthscale is optimised by bounded scalar search.  Mode
    ``optimized-inc`` adds 0.1 to the fitted value; ``fixed`` returns
    the preset default without fitting.
    """
    from scipy.optimize import minimize_scalar

    if mode == "fixed":
        return 1.5
    world = load_world(layout)
    if not isinstance(world, GroundWorld):
        raise ConfigError("lengthscale fitting is defined for ground layouts")
    ax = np.arange(world.low, world.high + 1e-9, grid_resolution)
    gx, gy = np.meshgrid(ax, ax, indexing="ij")
    X = np.column_stack([gx.ravel(), gy.ravel()])
    y = ground_safety_batch(world, X)

    def nll(log_l):
        ls = float(np.exp(log_l))
        params = KernelParams(signal_variance, [ls, ls], noise_variance)
        K = kernel_matrix(X, X, params)
        K[np.diag_indices_from(K)] += noise_variance
        try:
            L = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            return 1e12
        alpha = np.linalg.solve(L.T, np.linalg.solve(L, y))
        return float(
            0.5 * y @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * len(y) * np.log(2 * np.pi)
        )

    res = minimize_scalar(
        nll, bounds=(np.log(bounds[0]), np.log(bounds[1])), method="bounded"
    )
    fitted = float(np.exp(res.x))
    if mode == "optimized-inc":
        return fitted + 0.1
    if mode == "optimized":
        return fitted
    raise ConfigError(f"unknown fit mode {mode!r}")


# --------------------------------------------------------------------------
# plot data + figures
# --------------------------------------------------------------------------


def export_plot_data(run_dirs, out_dir, render: bool = True):
    """Aggregate bar-chart CSVs and trajectory overlays from run outputs.

    `run_dirs` is a list of directories produced by `run_batch`.  Writes
    ``bars.csv`` (one row per run: method, case, noise level, metrics),
    per-trial trajectory CSVs, and matplotlib PNG renderings alongside.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    runs = []
    for d in run_dirs:
        d = Path(d)
        cfg = json.loads((d / "config.json").read_text())
        recs = [json.loads(line) for line in (d / "records.jsonl").read_text().splitlines()]
        runs.append((d, cfg, recs))
        n = len(recs)
        if n == 0:
            continue
        succ = sum(r["outcome"] == "success" for r in recs) / n
        viol = sum(r["outcome"] == "violation" for r in recs) / n
        states = float(np.mean([r["states_explored"] for r in recs]))
        label = "ours" if cfg["method"] == "ours" else "baseline"
        if cfg["algo"].get("beta_scaling"):
            label += "+beta-scaling"
        rows.append(
            {
                "method": label,
                "case": cfg["case"],
                "sigma_sq": cfg.get("noise", {}).get("sigma_sq", ""),
                "p_intended": cfg.get("noise", {}).get("p_intended", ""),
                "n": n,
                "success_rate": succ,
                "violation_rate": viol,
                "mean_states_explored": states,
            }
        )
    header = "method,case,sigma_sq,p_intended,n,success_rate,violation_rate,mean_states_explored"
    lines = [header] + [
        f"{r['method']},{r['case']},{r['sigma_sq']},{r['p_intended']},{r['n']},"
        f"{r['success_rate']:.6f},{r['violation_rate']:.6f},{r['mean_states_explored']:.3f}"
        for r in rows
    ]
    (out / "bars.csv").write_text("\n".join(lines) + "\n")

    # per-trial trajectory CSVs (state, true q, sampled q per step)
    traj_dir = out / "trajectories"
    traj_dir.mkdir(exist_ok=True)
    for d, cfg, recs in runs:
        src = d / "trajectories"
        for log in sorted(src.glob("*.log")):
            csv_lines = ["x,y,action,ax,ay,true_q,sampled_q,violated"]
            for line in log.read_text().splitlines():
                if not line.strip():
                    continue
                state, action, arrival, tq, sq, flag = line.split()
                csv_lines.append(
                    f"{state},{action},{arrival},{tq},{sq},{flag}"
                )
            (traj_dir / (log.stem + ".csv")).write_text("\n".join(csv_lines) + "\n")

    if render:
        _render_figures(rows, runs, out)
    return out / "bars.csv"


def _render_figures(rows, runs, out: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if rows:
        labels = [
            f"{r['method']}\n{r['sigma_sq'] or r['p_intended']}" for r in rows
        ]
        fig, axes = plt.subplots(1, 3, figsize=(4 * 3, 3.2))
        for ax, key, title in zip(
            axes,
            ["success_rate", "violation_rate", "mean_states_explored"],
            ["Success rate", "Violation rate", "Mean states explored"],
        ):
            ax.bar(range(len(rows)), [r[key] for r in rows], color="#4878d0")
            ax.set_xticks(range(len(rows)))
            ax.set_xticklabels(labels, fontsize=7)
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(out / "bars.png", dpi=130)
        plt.close(fig)

    # one trajectory overlay per ground run directory
    for d, cfg, recs in runs:
        if cfg["case"] not in ("discrete", "continuous"):
            continue
        logs = sorted((d / "trajectories").glob("*.log"))
        if not logs:
            continue
        layout = logs[0].stem.rsplit("-seed", 1)[0]
        try:
            world = load_world(layout)
        except FixtureError:
            continue
        xs, ys, qs = [], [], []
        for line in logs[0].read_text().splitlines():
            if not line.strip():
                continue
            state, _, arrival, tq, _, _ = line.split()
            ax_, ay_ = map(float, arrival.split(","))
            xs.append(ax_)
            ys.append(ay_)
            qs.append(float(tq))
        grid = np.linspace(world.low, world.high, 161)
        gx, gy = np.meshgrid(grid, grid, indexing="ij")
        field = ground_safety_batch(
            world, np.column_stack([gx.ravel(), gy.ravel()])
        ).reshape(gx.shape)
        fig, ax = plt.subplots(figsize=(5, 4.5))
        im = ax.pcolormesh(gx, gy, np.minimum(field, 8.0), cmap="viridis")
        fig.colorbar(im, ax=ax, label="safety value")
        ax.plot(xs, ys, "w.-", lw=0.8, ms=2)
        ax.plot(*world.goal_center, "r*", ms=12)
        ax.set_title(f"{layout} ({cfg['method']})")
        fig.tight_layout()
        fig.savefig(out / f"trajectory-{d.name}.png", dpi=130)
        plt.close(fig)
