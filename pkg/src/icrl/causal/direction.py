"""Orienting a dependent pair: additive-noise models and the mechanism-change score."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .independence import CIConfig, _col, dcor_permutation_test, test_independence
from .kernel_ridge import GaussianKernelRidge

X_TO_Y = "x->y"
Y_TO_X = "y->x"
UNDECIDED = "undecided"


@dataclass(frozen=True)
class DirectionResult:
    direction: str
    p_x_to_y: float
    p_y_to_x: float
    reason: str = ""

    def to_dict(self) -> dict:
        return {"direction": self.direction, "p_x_to_y": self.p_x_to_y,
                "p_y_to_x": self.p_y_to_x, "reason": self.reason}


def _fit_residuals(target, given, cfg: CIConfig) -> np.ndarray:
    model = GaussianKernelRidge(max_fit_rows=cfg.max_regression_rows, random_state=cfg.seed)
    model.fit(_col(given), target)
    return target - model.predict(_col(given))


def anm_direction(x, y, cfg: CIConfig = CIConfig(), check_dependence: bool = True) -> DirectionResult:
    """Additive-noise-model orientation of ``x`` and ``y``.

    Regresses each variable on the other and tests whether the residual is
    independent of the regressor. The direction whose residual looks more
    independent (larger p-value) is preferred. Returns ``undecided`` when
    both directions are rejected, when both fit perfectly, or when the two
    variables show no dependence to orient.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("x and y must be paired")
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    if check_dependence:
        dep = test_independence(x, y, cfg=cfg.with_seed("anm-dependence"))
        if dep.independent:
            return DirectionResult(UNDECIDED, 1.0, 1.0, "no dependence between x and y")
    r_y = _fit_residuals(y, x, cfg)
    r_x = _fit_residuals(x, y, cfg)
    tiny_y = r_y.var() <= 1e-10 * max(y.var(), 1e-300)
    tiny_x = r_x.var() <= 1e-10 * max(x.var(), 1e-300)
    if tiny_y and tiny_x:
        return DirectionResult(UNDECIDED, 1.0, 1.0, "both directions fit without residual")
    p_xy = dcor_permutation_test(r_y, x, cfg.with_seed("anm", "x->y")).p_value
    p_yx = dcor_permutation_test(r_x, y, cfg.with_seed("anm", "y->x")).p_value
    if p_xy < cfg.alpha and p_yx < cfg.alpha:
        return DirectionResult(UNDECIDED, p_xy, p_yx, "residuals dependent in both directions")
    if p_xy == p_yx:
        return DirectionResult(UNDECIDED, p_xy, p_yx, "tie")
    return DirectionResult(X_TO_Y if p_xy > p_yx else Y_TO_X, p_xy, p_yx)


@dataclass(frozen=True)
class DeltaScores:
    delta_x_to_y: float
    delta_y_to_x: float
    details: dict = field(default_factory=dict, compare=False)

    @property
    def direction(self) -> str:
        if self.delta_x_to_y < self.delta_y_to_x:
            return X_TO_Y
        if self.delta_y_to_x < self.delta_x_to_y:
            return Y_TO_X
        return UNDECIDED

    def to_dict(self) -> dict:
        return {"delta_x_to_y": self.delta_x_to_y, "delta_y_to_x": self.delta_y_to_x}


DENSITY_FLOOR = 1e-12


def _conditional_density(cause, effect, cfg: CIConfig, label: str):
    # the per-environment density is evaluated on every environment's rows,
    # so the mean needs the linear trend to extrapolate sensibly
    model = GaussianKernelRidge(max_fit_rows=cfg.max_regression_rows, linear_trend=True, random_state=cfg.seed)
    model.fit(cause[:, None], effect)

    def mean(c):
        return model.predict(c[:, None])

    var = float(np.mean((effect - mean(cause)) ** 2))
    if not var > 1e-12:
        raise FloatingPointError(f"degenerate conditional density for {label}: zero residual variance")
    sd = np.sqrt(var)
    return lambda c, e: stats.norm.pdf(e, mean(c), sd)


def _marginal_density(values: np.ndarray, rng: np.random.Generator, max_rows: int):
    if values.size > max_rows:
        values = rng.choice(values, size=max_rows, replace=False)
    if np.ptp(values) <= 0:
        raise FloatingPointError("degenerate marginal: constant values in an environment")
    return stats.gaussian_kde(values)


def _delta_one_way(cause, effect, labels, weights_prior, cfg: CIConfig, label: str) -> float:
    levels = np.unique(labels)
    rng = np.random.default_rng(cfg.seed)
    cond = np.empty((levels.size, cause.size))
    marg = np.empty((levels.size, cause.size))
    for k, g in enumerate(levels):
        rows = labels == g
        cond[k] = _conditional_density(cause[rows], effect[rows], cfg.with_seed("delta", label, k), label)(cause, effect)
        marg[k] = _marginal_density(cause[rows], rng, cfg.max_rows_discrete)(cause)
    post = weights_prior[:, None] * np.maximum(marg, 1e-300)
    post /= post.sum(axis=0, keepdims=True)
    pooled = np.maximum((post * cond).sum(axis=0), DENSITY_FLOOR)
    averaged = np.maximum((weights_prior[:, None] * cond).sum(axis=0), DENSITY_FLOOR)
    return float(np.mean(np.log(pooled / averaged)))


def delta_criterion(x, y, env, cfg: CIConfig = CIConfig()) -> DeltaScores:
    """Mechanism-change scores for both orientations of ``(x, y)``.

    ``delta_x_to_y`` is the sample mean of
    ``log(P_pooled(y | x) / <P_e(y | x)>)``, where ``P_e`` is a conditional
    Gaussian (linear trend plus kernel-ridge mean, residual variance) fitted
    in environment ``e`` and ``<.>`` averages over environments by their
    sample share. The pooled conditional is the environment-posterior mixture
    ``sum_e P(e | x) P_e(y | x)`` with ``P(e | x)`` from per-environment
    kernel density estimates of ``x``; it coincides with the average when
    ``x`` carries no information about the environment. The score is zero
    when the mechanism is invariant and positive otherwise; the smaller
    score marks the causal direction. Densities are floored at 1e-12.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    labels = np.unique(np.asarray(env).ravel(), return_inverse=True)[1]
    if not (x.size == y.size == labels.size):
        raise ValueError("x, y and env must be aligned")
    counts = np.bincount(labels)
    if counts.size < 2:
        raise ValueError("the mechanism-change score needs at least two environments")
    small = np.flatnonzero(counts < cfg.min_env_rows)
    if small.size:
        raise ValueError(f"environment {int(small[0])} has {int(counts[small[0]])} rows, fewer than min_env_rows={cfg.min_env_rows}")
    order = np.lexsort((y, x, labels))
    x, y, labels = x[order], y[order], labels[order]
    prior = counts / counts.sum()
    dxy = _delta_one_way(x, y, labels, prior, cfg, X_TO_Y)
    dyx = _delta_one_way(y, x, labels, prior, cfg, Y_TO_X)
    return DeltaScores(dxy, dyx)
