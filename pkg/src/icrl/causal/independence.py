"""Marginal and conditional independence tests.

Continuous pairs use distance correlation with a permutation p-value. When
one side is a discrete label (the environment), a Brown-Forsythe test for
equal spread and a distance-correlation test against the one-hot labels are
both run and combined with a Bonferroni correction, so the pair is declared
dependent when either test rejects at ``alpha / 2``.

Conditioning on a discrete variable stratifies and combines the per-level
p-values with Fisher's method. Conditioning on a continuous variable
regresses the continuous sides on it with Gaussian kernel ridge regression
on top of a linear trend and tests the residuals.

Before any subsampling or permuting, rows are put in a canonical order, so a
decision depends on the set of rows but not on their order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .kernel_ridge import GaussianKernelRidge


@dataclass(frozen=True)
class CIConfig:
    alpha: float = 0.01
    n_perm: int = 500
    min_rows: int = 200
    min_env_rows: int = 100
    max_rows: int = 400
    max_rows_discrete: int = 1000
    max_regression_rows: int = 600
    stop_after_exceedances: int = 25
    seed: int = 0

    def with_seed(self, *keys) -> "CIConfig":
        """A config whose permutation stream is derived from ``(seed, *keys)``."""
        mixed = np.random.SeedSequence([self.seed, *[_key(k) for k in keys]]).generate_state(1)[0]
        return replace(self, seed=int(mixed))


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode())


@dataclass(frozen=True)
class CITestResult:
    statistic: float
    p_value: float
    independent: bool
    alpha: float
    method: str = ""
    degenerate: bool = False
    details: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic, "p_value": self.p_value,
            "independent": self.independent, "alpha": self.alpha,
            "method": self.method, "degenerate": self.degenerate,
        }


def _decide(stat, p, cfg: CIConfig, method, degenerate=False, **details) -> CITestResult:
    p = float(min(1.0, max(0.0, p)))
    return CITestResult(float(stat), p, p > cfg.alpha, cfg.alpha, method, degenerate, details)


def _col(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def _labels(e) -> np.ndarray:
    e = np.asarray(e).ravel()
    _, inv = np.unique(e, return_inverse=True)
    return inv


def _is_constant(a: np.ndarray) -> bool:
    return bool(np.all(np.ptp(a, axis=0) <= 1e-12 * (1.0 + np.abs(a).max())))


def _canonical(*cols) -> np.ndarray:
    keys = np.hstack([_col(c) for c in cols])
    return np.lexsort(keys.T[::-1])


def _subsample(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    if n <= m:
        return np.arange(n)
    return np.sort(rng.choice(n, size=m, replace=False))


# distance correlation


def _centered_distances(a: np.ndarray) -> np.ndarray:
    if a.shape[1] == 1:
        d = np.abs(a - a.T)
    else:
        sq = np.sum(a * a, axis=1)
        d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * a @ a.T, 0.0))
    row = d.mean(axis=0)
    return d - row[None, :] - row[:, None] + row.mean()


def distance_correlation(a, b) -> float:
    """Sample distance correlation (V-statistic form), in [0, 1]."""
    A, B = _centered_distances(_col(a)), _centered_distances(_col(b))
    dxy = np.mean(A * B)
    denom = np.sqrt(np.mean(A * A) * np.mean(B * B))
    if denom <= 0:
        return 0.0
    return float(np.sqrt(max(dxy, 0.0) / denom))


def _sequential_p(observed: float, draw, cfg: CIConfig) -> tuple[float, int]:
    """Besag-Clifford sequential permutation p-value."""
    h = cfg.stop_after_exceedances
    exceed = 0
    for i in range(1, cfg.n_perm + 1):
        if draw() >= observed:
            exceed += 1
            if exceed >= h:
                return exceed / i, i
    return (exceed + 1) / (cfg.n_perm + 1), cfg.n_perm


def dcor_permutation_test(a, b, cfg: CIConfig = CIConfig()) -> CITestResult:
    a, b = _col(a), _col(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"paired samples required, got {a.shape[0]} and {b.shape[0]} rows")
    if _is_constant(a) or _is_constant(b):
        return _decide(0.0, 1.0, cfg, "dcor", degenerate=True)
    rng = np.random.default_rng(cfg.seed)
    order = _canonical(a, b)
    a, b = a[order], b[order]
    rows = _subsample(a.shape[0], cfg.max_rows, rng)
    A, B = _centered_distances(a[rows]), _centered_distances(b[rows])
    m = rows.size
    observed = float(np.sum(A * B))

    def draw():
        p = rng.permutation(m)
        return float(np.sum(A * B[p][:, p]))

    p_value, used = _sequential_p(observed - 1e-12 * abs(observed), draw, cfg)
    denom = np.sqrt(np.sum(A * A) * np.sum(B * B))
    stat = np.sqrt(max(observed, 0.0) / denom) if denom > 0 else 0.0
    return _decide(stat, p_value, cfg, "dcor", n_rows=m, n_perm=used)


def _dcor_vs_labels(a: np.ndarray, labels: np.ndarray, cfg: CIConfig, rng) -> tuple[float, float]:
    """Distance correlation of ``a`` against one-hot ``labels`` with batched permutations.

    For one-hot vectors the distance matrix is sqrt(2) * (1 - M M^T), so the
    double-centred cross term reduces to minus the within-group sums of the
    centred distance matrix of ``a``.
    """
    rows = _subsample(a.shape[0], cfg.max_rows_discrete, rng)
    a, labels = a[rows], labels[rows]
    A = _centered_distances(a)
    k = int(labels.max()) + 1
    n = labels.size

    def within(lab):  # lab: (n, P) label matrix
        total = np.zeros(lab.shape[1])
        for g in range(k):
            M = (lab == g).astype(np.float64)
            total += np.einsum("ip,ip->p", M, A @ M)
        return -total

    observed = float(within(labels[:, None])[0])
    perms = np.stack([rng.permutation(labels) for _ in range(cfg.n_perm)], axis=1)
    null = within(perms)
    p = (1 + np.sum(null >= observed - 1e-12 * abs(observed))) / (cfg.n_perm + 1)
    onehot = np.eye(k)[labels]
    stat = distance_correlation(a, onehot)
    return stat, float(p)


def _discrete_test(a: np.ndarray, labels: np.ndarray, cfg: CIConfig) -> CITestResult:
    if _is_constant(a) or labels.max() == 0:
        return _decide(0.0, 1.0, cfg, "levene+dcor", degenerate=True)
    rng = np.random.default_rng(cfg.seed)
    order = _canonical(labels, a)
    a, labels = a[order], labels[order]
    groups = [a[labels == g] for g in range(int(labels.max()) + 1)]
    if a.shape[1] == 1:
        lev_stat, lev_p = stats.levene(*[g[:, 0] for g in groups], center="median")
    else:
        # spread of each row around its group's coordinatewise median
        dev = [np.linalg.norm(g - np.median(g, axis=0), axis=1) for g in groups]
        lev_stat, lev_p = stats.f_oneway(*dev)
    dstat, dp = _dcor_vs_labels(a, labels, cfg, rng)
    lev_p = 1.0 if not np.isfinite(lev_p) else float(lev_p)
    combined = min(1.0, 2.0 * min(lev_p, dp))
    return _decide(dstat, combined, cfg, "levene+dcor", levene_p=lev_p, dcor_p=dp, levene_stat=float(lev_stat))


def _check_rows(n: int, cfg: CIConfig):
    if n < cfg.min_rows:
        raise ValueError(f"need at least {cfg.min_rows} paired rows, got {n}")


def test_independence(A, B, *, b_discrete: bool = False, cfg: CIConfig = CIConfig()) -> CITestResult:
    """Test ``A`` independent of ``B``. ``b_discrete`` marks ``B`` as a label column."""
    A = _col(A)
    n = A.shape[0]
    if (np.asarray(B).shape[0]) != n:
        raise ValueError("A and B must have the same number of rows")
    _check_rows(n, cfg)
    if b_discrete:
        return _discrete_test(A, _labels(B), cfg)
    return dcor_permutation_test(A, _col(B), cfg)


test_independence.__test__ = False


def fisher_combine(p_values) -> tuple[float, float]:
    p = np.clip(np.asarray(p_values, dtype=np.float64), 1e-300, 1.0)
    stat = -2.0 * np.sum(np.log(p))
    return float(stat), float(stats.chi2.sf(stat, 2 * p.size))


def residualize(target, given, cfg: CIConfig = CIConfig()) -> np.ndarray:
    """Residuals of ``target`` after kernel ridge regression on ``given``."""
    target, given = _col(target), _col(given)
    model = GaussianKernelRidge(max_fit_rows=cfg.max_regression_rows, random_state=cfg.seed)
    model.fit(given, target)
    return target - model.predict(given).reshape(target.shape)


def test_cond_independence(
    A, B, C, *, b_discrete: bool = False, c_discrete: bool = False,
    c_labels=None, cfg: CIConfig = CIConfig(),
) -> CITestResult:
    """Test ``A`` independent of ``B`` given ``C``.

    ``c_discrete`` stratifies on ``C``; otherwise continuous sides are
    regressed on ``C`` and their residuals tested. ``c_labels`` adds a
    discrete conditioning label on top of a continuous ``C`` (stratify, then
    residualise within each level).
    """
    A = _col(A)
    n = A.shape[0]
    _check_rows(n, cfg)
    B = np.asarray(B)
    if c_discrete:
        labels = _labels(C)
        return _stratified(A, B, labels, b_discrete, cfg, None)
    C = _col(C)
    if c_labels is not None:
        return _stratified(A, B, _labels(c_labels), b_discrete, cfg, C)
    return _residual_test(A, B, C, b_discrete, cfg)


test_cond_independence.__test__ = False


def _residual_test(A, B, C, b_discrete, cfg: CIConfig) -> CITestResult:
    if _is_constant(C):
        res = test_independence(A, B, b_discrete=b_discrete, cfg=cfg)
        return replace(res, method="marginal(" + res.method + ")")
    order = _canonical(C, A, _col(B))
    A, B, C = A[order], np.asarray(B)[order], C[order]
    rA = residualize(A, C, cfg)
    if b_discrete:
        res = _discrete_test(rA, _labels(B), cfg)
    else:
        rB = residualize(_col(B), C, cfg)
        res = dcor_permutation_test(rA, rB, cfg)
    return replace(res, method="krr-residual+" + res.method)


def _stratified(A, B, labels, b_discrete, cfg: CIConfig, C=None) -> CITestResult:
    ps, per_level = [], {}
    for g in range(int(labels.max()) + 1):
        rows = labels == g
        count = int(rows.sum())
        if count < cfg.min_env_rows:
            raise ValueError(f"conditioning level {g} has {count} rows, fewer than min_env_rows={cfg.min_env_rows}")
        sub = replace(cfg.with_seed("level", g), min_rows=min(cfg.min_rows, cfg.min_env_rows))
        if C is None:
            res = test_independence(A[rows], B[rows], b_discrete=b_discrete, cfg=sub)
        else:
            res = _residual_test(A[rows], B[rows], C[rows], b_discrete, sub)
        ps.append(res.p_value)
        per_level[g] = res.p_value
    stat, p = fisher_combine(ps)
    return _decide(stat, p, cfg, "stratified-fisher", per_level=per_level)
