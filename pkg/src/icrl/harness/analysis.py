"""Plot-ready CSV tables built from the artifacts of a pipeline run."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..predictor import PhiModel
from ..semgen import Dataset
from .config import ExperimentConfig
from .pipeline import ENERGY_GRID, MissingArtifactError, PipelineReport, energy_grid, read_matrix, seed_dir, write_matrix

FIGURES = ("fig4", "fig6", "fig7")


def _artifact(path: Path, name: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(name, path)
    return path


def latent_pairs(report: PipelineReport, root, dest) -> list[Path]:
    """True and inferred latents side by side, one file per seed, one row per training row.

    ``matched_*`` columns reorder the inferred latents by the MCC matching.
    """
    paths = []
    for run in report.runs:
        s = run["seed"]
        d = seed_dir(root, s)
        train = Dataset.from_csv(_artifact(d / "train.csv", f"seed_{s}/train.csv"))
        _, Z = read_matrix(_artifact(d / "latents.csv", f"seed_{s}/latents.csv"))
        if train.X_true is None:
            raise MissingArtifactError(f"seed_{s}/train.csv:x_true", d / "train.csv")
        perm = run.get("identify", {}).get("permutation")
        if perm is None:
            raise MissingArtifactError(f"seed_{s}/identify.json:permutation", d / "identify.json")
        k, m = train.X_true.shape[1], Z.shape[1]
        header = (["row", "env"] + [f"x_true_{j}" for j in range(k)] + [f"x_hat_{j}" for j in range(m)]
                  + [f"matched_{j}" for j in range(len(perm))])
        table = np.column_stack([np.arange(len(train)), train.E, train.X_true, Z, Z[:, perm]])
        path = Path(dest) / f"fig4_seed{s}.csv"
        write_matrix(path, header, table)
        paths.append(path)
    return paths


def cause_vs_noncause(report: PipelineReport, root, dest) -> list[Path]:
    """Per-seed train and test metrics of the parent-trained and non-parent-trained predictors."""
    path = Path(dest) / "fig6.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "metric", "cause_latents", "non_cause_latents",
                    "cause_train", "cause_test", "non_cause_train", "non_cause_test"])
        for run in report.runs:
            pred = run.get("predict")
            if pred is None:
                raise MissingArtifactError(f"seed_{run['seed']}/predict.json", seed_dir(root, run["seed"]))
            c, nc = pred["icrl"], pred.get("non_cause")
            cells = ["", "", ""] if nc is None else [
                " ".join(map(str, nc["latents"])), format(nc["train"]["pooled"], ".17g"),
                format(nc["test"]["pooled"], ".17g")]
            w.writerow([run["seed"], c["test"]["metric"], " ".join(map(str, c["latents"])), cells[0],
                        format(c["train"]["pooled"], ".17g"), format(c["test"]["pooled"], ".17g"),
                        cells[1], cells[2]])
    return [path]


def phi_energy(report: PipelineReport, root, dest, size: int = ENERGY_GRID) -> list[Path]:
    """Phi over a size x size grid of true (X1, X2), x1 varying slowest."""
    config = ExperimentConfig.from_dict(report.config)
    paths = []
    for run in report.runs:
        s = run["seed"]
        d = seed_dir(root, s)
        phi = PhiModel.load(_artifact(d / "phi.json", f"seed_{s}/phi.json"))
        train = Dataset.from_csv(_artifact(d / "train.csv", f"seed_{s}/train.csv"))
        if train.X_true is None:
            raise MissingArtifactError(f"seed_{s}/train.csv:x_true", d / "train.csv")
        x1, x2, out = energy_grid(phi, config, s, train.X_true, size)
        header = ["x1", "x2"] + [f"phi_{j}" for j in range(out.shape[1])]
        path = Path(dest) / f"fig7_seed{s}.csv"
        write_matrix(path, header, np.column_stack([x1, x2, out]))
        paths.append(path)
    return paths


_EMITTERS = {"fig4": latent_pairs, "fig6": cause_vs_noncause, "fig7": phi_energy}


def emit_analysis(report: PipelineReport, which: str, root, dest=None) -> list[Path]:
    """Write the CSV tables for one figure. ``root`` holds the ``seed_*`` run directories."""
    if which not in _EMITTERS:
        raise ValueError(f"which must be one of {FIGURES}, got {which!r}")
    dest = Path(dest or Path(root) / "analysis")
    dest.mkdir(parents=True, exist_ok=True)
    return _EMITTERS[which](report, root, dest)
