"""Synthetic multi-environment data.

``sample_model1`` draws the three-variable chain ``X1 -> Y -> X2`` whose
noise levels are set per environment. All ``sigma`` fields are noise
VARIANCES, which is the reading under which the closed-form regression
coefficients in :func:`ols_oracle` hold.

The module also builds observations from latents (identity, random linear,
frozen random relu network) and ground-truth datasets for each of the ten
two-variable-plus-environment causal structures the rule engine can return.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numkit import Mlp, MlpSpec

DEFAULT_SIGMA_MAX = 1e4


@dataclass(frozen=True)
class EnvSpec:
    sigma1: float = 1.0
    sigma2: float = 0.0
    sigma3: float = 1.0
    sigma_max: float = DEFAULT_SIGMA_MAX

    def __post_init__(self):
        for name in ("sigma1", "sigma2", "sigma3"):
            v = getattr(self, name)
            if not (v >= 0) or not math.isfinite(v):
                raise ValueError(f"{name} must be a finite nonnegative variance, got {v}")
            if v > self.sigma_max:
                raise ValueError(f"{name}={v} exceeds sigma_max={self.sigma_max}")

    def to_dict(self) -> dict:
        return {"sigma1": self.sigma1, "sigma2": self.sigma2, "sigma3": self.sigma3}


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_model1(env: EnvSpec, n: int, rng_seed=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``n`` rows of ``(X1, X2, Y)`` from the chain ``X1 -> Y -> X2``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _rng(rng_seed)
    noise = rng.standard_normal((3, n))
    x1 = math.sqrt(env.sigma1) * noise[0]
    y = x1 + math.sqrt(env.sigma2) * noise[1]
    x2 = y + math.sqrt(env.sigma3) * noise[2]
    return x1, x2, y


def ols_oracle(case: int, env: EnvSpec) -> tuple[float, float]:
    """Population least-squares coefficients ``(a1, a2)`` for ``Y ~ a1*X1 + a2*X2``.

    Case 1 regresses on X1 alone, case 2 on X2 alone, case 3 on both.
    """
    s1, s2, s3 = env.sigma1, env.sigma2, env.sigma3
    if case == 1:
        if s1 == 0:
            raise ZeroDivisionError("case 1 is degenerate: X1 has zero variance")
        return 1.0, 0.0
    if case == 2:
        if s1 + s2 + s3 == 0:
            raise ZeroDivisionError("case 2 is degenerate: X2 has zero variance")
        return 0.0, (s1 + s2) / (s1 + s2 + s3)
    if case == 3:
        if s2 + s3 == 0:
            raise ZeroDivisionError("case 3 is degenerate: sigma2 + sigma3 == 0 makes X1 and X2 collinear")
        return s3 / (s2 + s3), s2 / (s2 + s3)
    raise ValueError(f"case must be 1, 2 or 3, got {case}")


# Mixing


class MixingKind(str, enum.Enum):
    IDENTITY = "identity"
    LINEAR = "linear"
    NONLINEAR = "nonlinear"


@dataclass(frozen=True)
class MixingSpec:
    kind: MixingKind = MixingKind.NONLINEAR
    seed: int = 0
    out_dim: int | None = None

    def __post_init__(self):
        kind = MixingKind(self.kind)
        object.__setattr__(self, "kind", kind)
        default = 2 if kind is MixingKind.IDENTITY else 10
        out_dim = default if self.out_dim is None else int(self.out_dim)
        if kind is MixingKind.IDENTITY and out_dim != 2:
            raise ValueError("identity mixing has out_dim 2")
        if out_dim < 2:
            raise ValueError("out_dim must be at least the latent dimension 2")
        object.__setattr__(self, "out_dim", out_dim)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "seed": self.seed, "out_dim": self.out_dim}


def _full_rank_matrix(seed: int, out_dim: int) -> np.ndarray:
    s = seed
    while True:
        S = np.random.default_rng(s).standard_normal((2, out_dim))
        if np.linalg.matrix_rank(S) == 2:
            return S
        s += 1


# region the Jacobian check covers: |x1| <= 5, |x2| <= 40 spans every
# training and test environment with sigma3 <= 100 at 4 standard deviations
JACOBIAN_BOX = ((-5.0, 5.0), (-40.0, 40.0))


def _min_jacobian_singular_value(net: Mlp, grid: int = 400) -> float:
    """Smallest Jacobian singular value of the ReLU net over ``JACOBIAN_BOX``.

    The Jacobian is constant on each activation pattern, so it is enough to
    visit the patterns met on a dense grid.
    """
    (a0, a1), (b0, b1) = JACOBIAN_BOX
    g1, g2 = np.meshgrid(np.linspace(a0, a1, grid), np.linspace(b0, b1, grid))
    pts = np.column_stack([g1.ravel(), g2.ravel()])
    W0, b0_, W1 = net.params["0.W"], net.params["0.b"], net.params["1.W"]
    width = W0.shape[1]
    codes = np.unique(((pts @ W0 + b0_) > 0) @ (1 << np.arange(width)))
    worst = np.inf
    for code in codes:
        mask = (code >> np.arange(width)) & 1
        J = (W0 * mask) @ W1
        worst = min(worst, np.linalg.svd(J, compute_uv=False)[-1])
    return float(worst)


def _mixing_network(seed: int, out_dim: int, tol: float = 1e-3) -> Mlp:
    """Random ``2 -> 6 (relu) -> out_dim`` net: Glorot weights, biases uniform in [-1, 1].

    Redrawn from the next seed until its Jacobian has full column rank on
    the data region.
    """
    s = seed
    while True:
        rng = np.random.default_rng(s)
        net = Mlp(MlpSpec((2, 6, out_dim), ("relu", "identity")), rng)
        net.params["0.b"][...] = rng.uniform(-1.0, 1.0, 6)
        net.params["1.b"][...] = rng.uniform(-1.0, 1.0, out_dim)
        if _min_jacobian_singular_value(net) > tol:
            return net
        s += 1


class Mixer:
    """Frozen map from latents ``X`` (n x 2) to observations ``O`` (n x out_dim)."""

    def __init__(self, spec: MixingSpec):
        self.spec = spec
        self.matrix = None
        self.network = None
        if spec.kind is MixingKind.LINEAR:
            self.matrix = _full_rank_matrix(spec.seed, spec.out_dim)
            self.matrix.setflags(write=False)
        elif spec.kind is MixingKind.NONLINEAR:
            self.network = _mixing_network(spec.seed, spec.out_dim)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError(f"mixing expects latents with exactly 2 columns, got shape {X.shape}")
        if self.spec.kind is MixingKind.IDENTITY:
            return X.copy()
        if self.spec.kind is MixingKind.LINEAR:
            return X @ self.matrix
        return self.network(X)


_MIXERS: dict[MixingSpec, Mixer] = {}


def get_mixer(spec: MixingSpec) -> Mixer:
    if spec not in _MIXERS:
        _MIXERS[spec] = Mixer(spec)
    return _MIXERS[spec]


def apply_mixing(X: np.ndarray, spec: MixingSpec) -> np.ndarray:
    return get_mixer(spec)(X)


# Datasets


@dataclass
class Dataset:
    O: np.ndarray
    Y: np.ndarray
    E: np.ndarray
    X_true: np.ndarray | None = None
    task: str = "regression"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.O = np.atleast_2d(np.asarray(self.O, dtype=np.float64))
        Y = np.asarray(self.Y, dtype=np.float64)
        self.Y = Y.reshape(-1, 1) if Y.ndim == 1 else Y
        self.E = np.asarray(self.E).astype(np.int64).ravel()
        n = self.O.shape[0]
        if self.Y.shape[0] != n or self.E.shape[0] != n:
            raise ValueError(f"row counts disagree: O {n}, Y {self.Y.shape[0]}, E {self.E.shape[0]}")
        if self.X_true is not None:
            self.X_true = np.asarray(self.X_true, dtype=np.float64)
            if self.X_true.shape[0] != n:
                raise ValueError("X_true row count disagrees with O")
        if n and self.E.min() < 0:
            raise ValueError("environment indices must be nonnegative")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")

    def __len__(self) -> int:
        return self.O.shape[0]

    @property
    def n_envs(self) -> int:
        return int(self.E.max()) + 1 if len(self) else 0

    def subset(self, rows) -> "Dataset":
        return Dataset(
            self.O[rows], self.Y[rows], self.E[rows],
            None if self.X_true is None else self.X_true[rows], self.task, dict(self.meta),
        )

    def to_csv(self, path) -> None:
        d = self.O.shape[1]
        header = [f"o_{j}" for j in range(d)] + ["y", "e"]
        cols = [self.O, self.Y[:, :1], self.E[:, None].astype(np.float64)]
        if self.X_true is not None:
            header += [f"x_true_{j}" for j in range(self.X_true.shape[1])]
            cols.append(self.X_true)
        table = np.hstack(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in table:
                w.writerow([format(v, ".17g") for v in row])

    @classmethod
    def from_csv(cls, path, task: str | None = None) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in rows[0]]
        table = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(header))
        o_cols = [i for i, h in enumerate(header) if h.startswith("o_")]
        x_cols = [i for i, h in enumerate(header) if h.startswith("x_true_")]
        if "y" not in header or "e" not in header or not o_cols:
            raise ValueError(f"{path}: header must contain o_*, y and e columns")
        Y = table[:, header.index("y")]
        if task is None:
            task = "classification" if np.all(np.isin(Y, (0.0, 1.0))) else "regression"
        return cls(
            table[:, o_cols], Y, table[:, header.index("e")].astype(np.int64),
            table[:, x_cols] if x_cols else None, task,
        )


def make_multi_env_dataset(
    envs: Sequence[EnvSpec],
    n_per_env: int,
    mixing: MixingSpec,
    rng_seed=None,
    task: str = "regression",
    threshold: float | None = None,
) -> Dataset:
    """Sample every environment, mix the latents, and stack the rows.

    For ``task="classification"`` the target is binarised at ``threshold``
    (default: the median of this dataset's target).
    """
    if not envs:
        raise ValueError("need at least one environment")
    seeds = np.random.SeedSequence(rng_seed).spawn(len(envs))
    X, Y, E = [], [], []
    for e, (env, ss) in enumerate(zip(envs, seeds)):
        x1, x2, y = sample_model1(env, n_per_env, np.random.default_rng(ss))
        X.append(np.column_stack([x1, x2]))
        Y.append(y)
        E.append(np.full(n_per_env, e))
    X = np.vstack(X)
    Y = np.concatenate(Y)
    meta = {"envs": [env.to_dict() for env in envs], "mixing": mixing.to_dict()}
    if task == "classification":
        cut = float(np.median(Y)) if threshold is None else float(threshold)
        Y = (Y > cut).astype(np.float64)
        meta["threshold"] = cut
    return Dataset(apply_mixing(X, mixing), Y, np.concatenate(E), X, task, meta)


# Ground-truth structures over (X_i, Y, E)


class StructureKind(str, enum.Enum):
    """The ten admissible graphs over ``{X_i, Y, E}`` (``X_i -> O`` always present)."""

    C = "2c"
    D = "2d"
    E = "2e"
    F = "2f"
    G = "2g"
    I = "2i"  # noqa: E741
    J = "2j"
    K = "2k"
    L = "2l"
    M = "2m"

    @property
    def edges(self) -> frozenset[tuple[str, str]]:
        return STRUCTURE_EDGES[self]

    @property
    def is_parent(self) -> bool:
        return ("X", "Y") in self.edges

    @property
    def group(self) -> int:
        return STRUCTURE_GROUP[self]


STRUCTURE_EDGES: dict[StructureKind, frozenset] = {
    StructureKind.C: frozenset({("X", "Y")}),
    StructureKind.D: frozenset({("Y", "X")}),
    StructureKind.E: frozenset({("E", "X")}),
    StructureKind.F: frozenset({("E", "X"), ("X", "Y")}),
    StructureKind.G: frozenset({("E", "X"), ("Y", "X")}),
    StructureKind.I: frozenset({("X", "Y"), ("E", "Y")}),
    StructureKind.J: frozenset({("Y", "X"), ("E", "Y")}),
    StructureKind.K: frozenset({("E", "X"), ("E", "Y")}),
    StructureKind.L: frozenset({("E", "X"), ("E", "Y"), ("X", "Y")}),
    StructureKind.M: frozenset({("E", "X"), ("E", "Y"), ("Y", "X")}),
}

STRUCTURE_GROUP = {
    StructureKind.E: 1, StructureKind.I: 1, StructureKind.G: 1,
    StructureKind.K: 1, StructureKind.J: 1, StructureKind.F: 1,
    StructureKind.C: 2, StructureKind.D: 2,
    StructureKind.L: 3, StructureKind.M: 3,
}

PARENT_STRUCTURES = frozenset(k for k in StructureKind if k.is_parent)

DEFAULT_ENV_NOISE = (0.5, 4.0)


@dataclass
class StructureDataset:
    X: np.ndarray
    Y: np.ndarray
    E: np.ndarray
    kind: StructureKind
    coefficients: dict = field(default_factory=dict)


def _coef(rng: np.random.Generator) -> float:
    return float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5))


def generate_structure_dataset(
    kind: StructureKind | str,
    env_noise: Sequence[float] = DEFAULT_ENV_NOISE,
    n_per_env: int = 5000,
    rng_seed=None,
    noise: str = "auto",
) -> StructureDataset:
    """Linear additive-noise data following ``kind``.

    A root variable with an incoming edge from E draws its noise with
    variance ``env_noise[e]`` and mean ``log env_noise[e]`` (centred across
    environments) in environment ``e``, so two children of E are visibly
    correlated. A variable with both E and the other variable as parents
    gets a milder shift, the square root of the variance and half the mean,
    so its mechanism changes less than its cause's distribution. Everything
    else has zero-mean, unit-variance noise. Edge coefficients are drawn
    from +-[0.5, 1.5].

    ``noise`` is ``"gaussian"``, ``"uniform"`` (unit-variance uniform), or
    ``"auto"``: uniform when the X-Y edge is the only edge, where a Gaussian
    pair would be unorientable, Gaussian otherwise.
    """
    kind = StructureKind(kind)
    if len(env_noise) < 1:
        raise ValueError("need at least one environment")
    if np.any(np.asarray(env_noise, dtype=np.float64) <= 0):
        raise ValueError("env_noise variances must be positive")
    if noise == "auto":
        noise = "uniform" if kind.group == 2 else "gaussian"
    if noise not in ("gaussian", "uniform"):
        raise ValueError(f"unknown noise distribution {noise!r}")
    rng = _rng(rng_seed)
    edges = kind.edges
    n_env = len(env_noise)
    E = np.repeat(np.arange(n_env), n_per_env)
    n = E.size
    variances = np.asarray(env_noise, dtype=np.float64)

    shifts = np.log(variances) - np.log(variances).mean()

    def draw(var: str) -> np.ndarray:
        scale, shift = 1.0, 0.0
        if ("E", var) in edges:
            mild = 0.5 if ("X", var) in edges or ("Y", var) in edges else 1.0
            scale = (variances ** (0.5 * mild))[E]
            shift = (mild * shifts)[E]
        if noise == "uniform":
            return shift + scale * rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), n)
        return shift + scale * rng.standard_normal(n)

    coefs = {}
    if ("X", "Y") in edges:
        x = draw("X")
        coefs["X->Y"] = _coef(rng)
        y = coefs["X->Y"] * x + draw("Y")
    elif ("Y", "X") in edges:
        y = draw("Y")
        coefs["Y->X"] = _coef(rng)
        x = coefs["Y->X"] * y + draw("X")
    else:
        x, y = draw("X"), draw("Y")
    return StructureDataset(x, y, E, kind, coefs)
