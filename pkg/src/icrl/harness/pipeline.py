"""End-to-end runs: simulate, identify latents, pick parents, train, evaluate.

Each stage reads its inputs from and writes its outputs to one directory
per seed, so running the stages one at a time from the command line
produces the same files as a single ``run_pipeline`` call.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..causal import EmptyParentSetError, assess_dimensions, fallback_parent
from ..ivae import encode_conditioning, infer_latents, mcc_score, train_ivae
from ..predictor import (
    NetModel,
    PhiModel,
    WModel,
    erm_baseline,
    evaluate,
    irm_penalty_value,
    irmv1_baseline,
    predict,
    train_phi,
    train_w,
)
from ..semgen import Dataset, EnvSpec, get_mixer, make_multi_env_dataset
from .config import ConfigError, ExperimentConfig, stream_seed

SCHEMA_VERSION = 1
PHASES = ("simulate", "identify", "discover", "predict", "baselines", "evaluate")
ENERGY_GRID = 50


class PhaseError(RuntimeError):
    def __init__(self, phase: str, message: str):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase


class MissingArtifactError(FileNotFoundError):
    def __init__(self, name: str, path):
        super().__init__(f"missing artifact {name!r} ({path})")
        self.name = name


# file helpers


def _plain(obj):
    """Convert numpy scalars and arrays so ``json.dumps`` output is stable."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_plain(obj), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path, name: str | None = None):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(name or path.name, path)
    with open(path) as fh:
        return json.load(fh)


def _need(run_dir: Path, name: str) -> Path:
    path = run_dir / name
    if not path.exists():
        raise MissingArtifactError(name, path)
    return path


def write_matrix(path, header, M) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.asarray(M, dtype=np.float64):
            w.writerow([format(v, ".17g") for v in row])


def read_matrix(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    return header, np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(header))


def _phase(name):
    """Run a stage, re-raising any failure tagged with the stage name."""
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except PhaseError:
                raise
            except Exception as exc:
                raise PhaseError(name, f"{type(exc).__name__}: {exc}") from exc
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        run.phase = name
        return run
    return wrap


# stages


def _dataset(config: ExperimentConfig, seed: int, envs, n: int, stream: str, threshold=None) -> Dataset:
    return make_multi_env_dataset(envs, n, config.mixing_spec(seed), stream_seed(seed, stream),
                                  task=config.task, threshold=threshold)


def _threshold(train: Dataset):
    return train.meta.get("threshold")


@_phase("simulate")
def simulate(config: ExperimentConfig, seed: int, run_dir) -> dict:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    train = _dataset(config, seed, config.train_envs(), config.n_per_env, "train")
    test = _dataset(config, seed, [config.test_env()], config.n_test or config.n_per_env, "test",
                    _threshold(train))
    train.to_csv(run_dir / "train.csv")
    test.to_csv(run_dir / "test.csv")
    info = {"train_rows": len(train), "test_rows": len(test), "threshold": _threshold(train)}
    write_json(run_dir / "simulate.json", info)
    return info


def _load(run_dir: Path, name: str, task: str) -> Dataset:
    return Dataset.from_csv(_need(run_dir, name), task=task)


def _conditioning(config: ExperimentConfig, data: Dataset) -> np.ndarray:
    y_levels = [0.0, 1.0] if config.task == "classification" else None
    return encode_conditioning(data.Y, data.E, list(range(len(config.train_sigma3))), y_levels)


@_phase("identify")
def identify(config: ExperimentConfig, seed: int, run_dir) -> dict:
    """Phase 1: fit the (i)VAE and store posterior means of the training latents."""
    run_dir = Path(run_dir)
    train = _load(run_dir, "train.csv", config.task)
    U = _conditioning(config, train)
    result = train_ivae(train.O, U, config.ivae_config(seed))
    Z = infer_latents(result.model, train.O, U).mean
    result.model.save(run_dir / "ivae.json")
    write_matrix(run_dir / "latents.csv", [f"x_hat_{j}" for j in range(Z.shape[1])], Z)
    info = {"elbo_curve": result.elbo_curve, "final_elbo": result.elbo_curve[-1],
            "warnings": list(result.warnings)}
    if train.X_true is not None and train.X_true.shape[1] == Z.shape[1]:
        mcc, perm = mcc_score(train.X_true, Z)
        info.update(mcc=mcc, permutation=perm)
    write_json(run_dir / "identify.json", info)
    return info


@_phase("discover")
def discover(config: ExperimentConfig, seed: int, run_dir) -> dict:
    """Phase 2: classify each latent dimension and keep the parents of Y."""
    run_dir = Path(run_dir)
    train = _load(run_dir, "train.csv", config.task)
    _, Z = read_matrix(_need(run_dir, "latents.csv"))
    warnings = []
    if not config.phase2:
        info = {"skipped": True, "verdicts": [], "rule_parents": [], "parents": list(range(Z.shape[1])),
                "fallback_used": False,
                "warnings": ["parent discovery disabled; regressing on every latent dimension"]}
        write_json(run_dir / "discover.json", info)
        return info
    verdicts = assess_dimensions(Z, train.Y, train.E, config.rules_config(seed))
    rule_parents = [v.latent_index for v in verdicts if v.is_parent]
    parents, fallback_used = rule_parents, False
    if not parents:
        k = fallback_parent(Z, train.Y)
        parents, fallback_used = [k], True
        warnings.append(f"{EmptyParentSetError.__name__}: no latent dimension matched a parent rule; "
                        f"fell back to dimension {k}, the one most rank-correlated with Y")
    info = {"skipped": False, "verdicts": [v.to_dict() for v in verdicts], "rule_parents": rule_parents,
            "parents": parents, "fallback_used": fallback_used, "warnings": warnings}
    write_json(run_dir / "discover.json", info)
    return info


def _two_stage(config, seed, train, test, Z, cols):
    cfg = config.predictor_config(seed)
    phi = train_phi(train.O, Z[:, cols], cfg)
    w = train_w(Z[:, cols], train.Y, cfg)
    metrics = {
        "latents": list(cols),
        "train": evaluate(train.Y, predict(phi, w, train.O), train.E, config.task).to_dict(),
        "test": evaluate(test.Y, predict(phi, w, test.O), test.E, config.task).to_dict(),
        "phi_loss": [phi.curve[0], phi.curve[-1]],
        "w_loss": [w.curve[0], w.curve[-1]],
    }
    return phi, w, metrics


@_phase("predict")
def train_predictor(config: ExperimentConfig, seed: int, run_dir) -> dict:
    """Phase 3: fit phi on the parent latents and w on (parents, Y); also the non-cause contrast."""
    run_dir = Path(run_dir)
    train = _load(run_dir, "train.csv", config.task)
    test = _load(run_dir, "test.csv", config.task)
    _, Z = read_matrix(_need(run_dir, "latents.csv"))
    parents = read_json(run_dir / "discover.json", "discover.json")["parents"]
    phi, w, icrl = _two_stage(config, seed, train, test, Z, parents)
    phi.save(run_dir / "phi.json")
    w.save(run_dir / "w.json")
    others = [j for j in range(Z.shape[1]) if j not in parents]
    non_cause = None
    if others:
        _, _, non_cause = _two_stage(config, seed, train, test, Z, others)
    info = {"icrl": icrl, "non_cause": non_cause}
    write_json(run_dir / "predict.json", info)
    return info


@_phase("baselines")
def run_baselines(config: ExperimentConfig, seed: int, run_dir) -> dict:
    run_dir = Path(run_dir)
    train = _load(run_dir, "train.csv", config.task)
    test = _load(run_dir, "test.csv", config.task)
    info = {}
    cfg = config.erm_config(seed)
    for name in config.baselines:
        if name == "erm":
            model, _ = erm_baseline(train.O, train.Y, train.E, cfg)
            extra = {}
        else:
            model, _, trace = irmv1_baseline(train.O, train.Y, train.E, cfg, config.irm_penalty_weight,
                                             config.irm_warmup_epochs)
            extra = {"final_penalty": irm_penalty_value(model, train.O, train.Y, train.E),
                     "penalty_steps": len(trace)}
        model.save(run_dir / f"{name}.json")
        info[name] = {
            "train": evaluate(train.Y, model(train.O), train.E, config.task).to_dict(),
            "test": evaluate(test.Y, model(test.O), test.E, config.task).to_dict(),
            "loss": [model.curve[0], model.curve[-1]],
            **extra,
        }
    write_json(run_dir / "baselines.json", info)
    return info


def energy_grid(phi: NetModel, config: ExperimentConfig, seed: int, X_train: np.ndarray,
                size: int = ENERGY_GRID, lo: float = 0.01, hi: float = 0.99):
    """Phi over a grid of true latents spanning the training quantiles of X1 and X2.

    Returns the grid columns (x1 slow, x2 fast) and phi's outputs.
    """
    g1 = np.quantile(X_train[:, 0], np.linspace(lo, hi, size))
    g2 = np.quantile(X_train[:, 1], np.linspace(lo, hi, size))
    x1, x2 = (a.ravel() for a in np.meshgrid(g1, g2, indexing="ij"))
    O = get_mixer(config.mixing_spec(seed))(np.column_stack([x1, x2]))
    return x1, x2, phi(O)


def energy_sensitivity(out: np.ndarray, size: int = ENERGY_GRID) -> dict:
    """Average range of phi along each axis of the grid, summed over outputs."""
    cube = out.reshape(size, size, -1)
    s1 = float(np.mean(cube.max(axis=0) - cube.min(axis=0), axis=0).sum())
    s2 = float(np.mean(cube.max(axis=1) - cube.min(axis=1), axis=0).sum())
    return {"x1_sensitivity": s1, "x2_sensitivity": s2, "ratio": s2 / s1 if s1 > 0 else None}


def _spread(values) -> float | None:
    values = np.asarray(values, dtype=np.float64)
    return float((values.max() - values.min()) / values.min()) if values.min() > 0 else None


@_phase("evaluate")
def evaluate_run(config: ExperimentConfig, seed: int, run_dir) -> dict:
    """Held-out invariance check, the phi energy summary and the per-seed report."""
    run_dir = Path(run_dir)
    train = _load(run_dir, "train.csv", config.task)
    phi = PhiModel.load(_need(run_dir, "phi.json"))
    w = WModel.load(_need(run_dir, "w.json"))
    models = {"icrl": lambda O: predict(phi, w, O)}
    if (run_dir / "erm.json").exists():
        erm = NetModel.load(run_dir / "erm.json")
        models["erm"] = erm
    invariance = {"sigma3": config.invariance_sigma3}
    if config.task == "regression" and config.invariance_sigma3:
        held = [_dataset(config, seed, [EnvSpec(config.sigma1, config.sigma2, s3)],
                         config.n_test or config.n_per_env, f"heldout-{s3}", _threshold(train))
                for s3 in config.invariance_sigma3]
        for name, model in models.items():
            var = [float(np.var(model(d.O) - d.Y)) for d in held]
            invariance[name] = {"residual_variance": var, "relative_spread": _spread(var)}
    energy = None
    if train.X_true is not None:
        _, _, out = energy_grid(phi, config, seed, train.X_true)
        energy = energy_sensitivity(out)
    report = {"seed": seed, "config_hash": config.digest()}
    for phase in ("simulate", "identify", "discover", "predict", "baselines"):
        path = run_dir / f"{phase}.json"
        if path.exists():
            report[phase] = read_json(path)
    report["invariance"] = invariance
    report["energy"] = energy
    report["warnings"] = [f"{p}: {m}" for p in ("identify", "discover")
                          for m in report.get(p, {}).get("warnings", [])]
    write_json(run_dir / "report.json", report)
    return report


STAGES = (simulate, identify, discover, train_predictor, run_baselines, evaluate_run)


def run_seed(config: ExperimentConfig, seed: int, run_dir) -> tuple[dict, dict]:
    """All stages for one seed. Returns the seed report and per-phase wall-clock seconds."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    for stage in STAGES:
        if stage is run_baselines and not config.baselines:
            continue
        t0 = time.perf_counter()
        out = stage(config, seed, run_dir)
        timings[stage.phase] = time.perf_counter() - t0
    write_json(run_dir / "timings.json", timings)
    return out, timings


# reports


def seed_dir(out_dir, seed: int) -> Path:
    return Path(out_dir) / f"seed_{seed}"


def _methods(run: dict) -> dict:
    rows = {}
    pred = run.get("predict", {})
    if pred.get("icrl"):
        rows["icrl"] = pred["icrl"]
    if pred.get("non_cause"):
        rows["non_cause"] = pred["non_cause"]
    rows.update(run.get("baselines", {}))
    return rows


def summarize(runs: list[dict]) -> dict:
    """Mean and standard deviation over seeds of each method's pooled train and test metric."""
    out = {}
    names = []
    for run in runs:
        names += [n for n in _methods(run) if n not in names]
    for name in names:
        entry = {}
        for split in ("train", "test"):
            vals = [_methods(r)[name][split]["pooled"] for r in runs if name in _methods(r)]
            entry[split] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
        entry["metric"] = next(_methods(r)[name]["test"]["metric"] for r in runs if name in _methods(r))
        out[name] = entry
    mccs = [r["identify"]["mcc"] for r in runs if "mcc" in r.get("identify", {})]
    if mccs:
        out["mcc"] = {"mean": float(np.mean(mccs)), "std": float(np.std(mccs)), "n": len(mccs)}
    return out


@dataclass
class PipelineReport:
    config: dict
    config_hash: str
    runs: list
    warnings: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def summary(self) -> dict:
        return summarize(self.runs)

    def to_dict(self) -> dict:
        """Deterministic content. Wall-clock timings are kept out so equal runs give equal bytes."""
        return {"schema_version": SCHEMA_VERSION, "config": self.config, "config_hash": self.config_hash,
                "runs": self.runs, "summary": self.summary, "warnings": self.warnings}

    def to_json(self) -> str:
        return json.dumps(_plain(self.to_dict()), indent=1, sort_keys=True) + "\n"

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(self.to_json())
        (out_dir / "summary.txt").write_text(self.table())
        write_json(out_dir / "timings.json", self.timings)
        return out_dir / "report.json"

    @classmethod
    def from_dict(cls, d: dict, timings=None) -> "PipelineReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(d["config"], d["config_hash"], d["runs"], d.get("warnings", []), timings or {})

    @classmethod
    def load(cls, path) -> "PipelineReport":
        path = Path(path)
        timings_path = path.with_name("timings.json")
        timings = read_json(timings_path) if timings_path.exists() else {}
        return cls.from_dict(read_json(path, "report.json"), timings)

    def table(self) -> str:
        s = self.summary
        lines = [f"mixing={self.config['mixing']} seeds={len(self.runs)} config={self.config_hash}",
                 f"{'method':<10} {'metric':<9} {'train':>22} {'test':>22}"]
        for name, e in s.items():
            if name == "mcc":
                continue
            cells = [f"{e[k]['mean']:.4g} +/- {e[k]['std']:.3g}" for k in ("train", "test")]
            lines.append(f"{name:<10} {e['metric']:<9} {cells[0]:>22} {cells[1]:>22}")
        if "mcc" in s:
            lines.append(f"mcc {s['mcc']['mean']:.3f} +/- {s['mcc']['std']:.3f}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines) + "\n"


def collect_report(config: ExperimentConfig, out_dir, seeds=None) -> PipelineReport:
    """Merge the per-seed reports found under ``out_dir``."""
    out_dir = Path(out_dir)
    seeds = config.seed_list if seeds is None else list(seeds)
    runs, timings, warnings = [], {}, []
    for s in seeds:
        d = seed_dir(out_dir, s)
        run = read_json(d / "report.json", f"seed_{s}/report.json")
        if run.get("config_hash") != config.digest():
            raise ConfigError(f"{d}: report was produced by a different config (pass the same --config and flags)")
        runs.append(run)
        warnings += [f"seed {s}: {m}" for m in run.get("warnings", [])]
        if (d / "timings.json").exists():
            timings[str(s)] = read_json(d / "timings.json")
    return PipelineReport(config.to_dict(), config.digest(), runs, warnings, timings)


def run_pipeline(config: ExperimentConfig, seeds=None, out_dir=None) -> PipelineReport:
    """Run every requested seed and write the merged report under ``out_dir``."""
    out_dir = Path(out_dir or config.out_dir)
    seeds = config.seed_list if seeds is None else list(seeds)
    for s in seeds:
        run_seed(config, s, seed_dir(out_dir, s))
    report = collect_report(config, out_dir, seeds)
    report.save(out_dir)
    return report
