"""Two-stage invariant predictor and pooled-risk baselines.

Stage one fits ``phi: O -> parent latents`` by regression on the posterior
means of the selected latent dimensions; stage two fits ``w: parents -> Y``.
The two fits never see each other's targets. Baselines fit a single network
``O -> Y`` on the pooled training environments, optionally with the IRMv1
penalty.

IRMv1 penalty: for environment ``e`` the derivative of the risk of
``c * f(O)`` with respect to the scalar ``c`` at ``c = 1`` is
``mean(2 (f - y) f)`` for squared error and ``mean((sigmoid(f) - y) f)`` for
cross-entropy on logits; the penalty is the sum over environments of its
square. Writing the derivative out keeps everything first order, so the
penalised loss differentiates on the ordinary tape.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .numkit import Mlp, MlpSpec, Tape, Tensor, fit_minibatch

TASKS = ("regression", "classification")


@dataclass(frozen=True)
class PredictorConfig:
    """``hidden=None`` gives an affine network."""

    hidden: int | None = 6
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 5e-3
    seed: int = 0
    task: str = "regression"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("need epochs >= 0, batch_size >= 1 and a positive learning rate")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EvalResult:
    metric: str
    per_env: dict
    rows: dict
    pooled: float

    def to_dict(self) -> dict:
        return {"metric": self.metric, "pooled": self.pooled,
                "per_env": {str(k): v for k, v in self.per_env.items()},
                "rows": {str(k): v for k, v in self.rows.items()}}


def evaluate(y_true, y_pred, env, task: str = "regression") -> EvalResult:
    """Per-environment MSE (regression) or accuracy (classification, ``y_pred`` a probability)."""
    y_true = np.asarray(y_true, dtype=np.float64).reshape(len(y_true), -1)
    y_pred = np.asarray(y_pred, dtype=np.float64).reshape(len(y_pred), -1)
    env = np.asarray(env).ravel()
    if not (y_true.shape == y_pred.shape and env.size == y_true.shape[0]):
        raise ValueError(f"misaligned shapes {y_true.shape}, {y_pred.shape}, {env.shape}")
    if task == "regression":
        per_row = np.mean((y_true - y_pred) ** 2, axis=1)
        metric = "mse"
    else:
        per_row = np.mean((y_pred >= 0.5) == (y_true >= 0.5), axis=1)
        metric = "accuracy"
    per_env, rows = {}, {}
    for e in np.unique(env):
        sel = env == e
        key = e.item() if hasattr(e, "item") else e
        per_env[key] = float(per_row[sel].mean())
        rows[key] = int(sel.sum())
    return EvalResult(metric, per_env, rows, float(per_row.mean()))


def _spec(n_in: int, n_out: int, config: PredictorConfig) -> MlpSpec:
    return MlpSpec.hidden(n_in, config.hidden, n_out)


def _rngs(config: PredictorConfig, stream: str):
    ss = np.random.SeedSequence([config.seed, sum(map(ord, stream))])
    init, shuffle = ss.spawn(2)
    return np.random.default_rng(init), np.random.default_rng(shuffle)


def _squared_error(tape: Tape, out: Tensor, target) -> Tensor:
    return tape.mean(tape.square(tape.subtract(out, target)))


def _cross_entropy(tape: Tape, logits: Tensor, target) -> Tensor:
    # softplus(f) - y f is -log-likelihood of a Bernoulli with logit f
    return tape.mean(tape.subtract(tape.softplus(logits), tape.multiply(logits, target)))


def _risk(task: str):
    return _squared_error if task == "regression" else _cross_entropy


def _numpy_risk(task: str, out: np.ndarray, target: np.ndarray) -> float:
    if task == "regression":
        return float(np.mean((out - target) ** 2))
    return float(np.mean(np.logaddexp(0.0, out) - out * target))


def _as_2d(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be 1-D or 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


@dataclass
class NetModel:
    """A trained network plus its pooled-loss curve (value before training first)."""

    net: Mlp
    task: str = "regression"
    curve: list = field(default_factory=list)

    @property
    def n_in(self) -> int:
        return self.net.spec.n_in

    @property
    def n_out(self) -> int:
        return self.net.spec.n_out

    def raw(self, X) -> np.ndarray:
        X = _as_2d(X, "input")
        if X.shape[1] != self.n_in:
            raise ValueError(f"expected {self.n_in} input columns, got {X.shape[1]}")
        return self.net(X)

    def __call__(self, X) -> np.ndarray:
        """Regression output, or the class-1 probability for classification."""
        out = self.raw(X)
        if self.task == "classification":
            return 0.5 * (1.0 + np.tanh(0.5 * out))
        return out

    def to_dict(self) -> dict:
        return {"task": self.task, "net": self.net.to_dict(), "curve": list(self.curve)}

    @classmethod
    def from_dict(cls, d: dict) -> "NetModel":
        return cls(Mlp.from_dict(d["net"]), d["task"], list(d.get("curve", [])))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "NetModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class PhiModel(NetModel):
    """Representation ``O -> parent latents``."""


class WModel(NetModel):
    """Head ``parent latents -> Y``."""


def _fit(model_cls, X, T, config: PredictorConfig, stream: str, task: str, env=None,
         penalty_weight: float = 0.0, warmup_epochs: int = 0, penalty_trace: list | None = None):
    init_rng, rng = _rngs(config, stream)
    net = Mlp(_spec(X.shape[1], T.shape[1], config), init_rng)
    risk = _risk(task)
    steps_per_epoch = -(-X.shape[0] // config.batch_size)
    calls = [0]
    if penalty_weight and env is None:
        raise ValueError("the invariance penalty needs environment labels")
    labels = None if env is None else np.unique(np.asarray(env).ravel(), return_inverse=True)[1]

    def loss_fn(tape, leaves, idx):
        epoch = calls[0] // steps_per_epoch
        calls[0] += 1
        out = net.forward(tape, X[idx], leaves["net"])
        loss = risk(tape, out, T[idx])
        if penalty_weight and epoch >= warmup_epochs:
            pen = _irm_penalty(tape, net, leaves["net"], X[idx], T[idx], labels[idx], task)
            if penalty_trace is not None:
                penalty_trace.append(pen.item())
            loss = tape.add(loss, tape.multiply(pen, float(penalty_weight)))
        return loss

    def eval_fn():
        return _numpy_risk(task, net(X), T)

    curve = fit_minibatch({"net": net}, loss_fn, X.shape[0], epochs=config.epochs,
                          batch_size=config.batch_size, learning_rate=config.learning_rate,
                          rng=rng, eval_fn=eval_fn)
    return model_cls(net, task, curve)


def _irm_penalty(tape: Tape, net: Mlp, leaves, X, T, labels, task: str) -> Tensor:
    terms = []
    for g in np.unique(labels):
        rows = labels == g
        f = net.forward(tape, X[rows], leaves)
        if task == "regression":
            slope = tape.multiply(tape.mean(tape.multiply(tape.subtract(f, T[rows]), f)), 2.0)
        else:
            slope = tape.mean(tape.multiply(tape.subtract(tape.sigmoid(f), T[rows]), f))
        terms.append(tape.square(slope))
    total = terms[0]
    for t in terms[1:]:
        total = tape.add(total, t)
    return total


def irm_penalty_value(model: NetModel, X, Y, env) -> float:
    """IRMv1 penalty of a trained network on ``(X, Y)``, summed over environments."""
    X, Y = _as_2d(X, "X"), _as_2d(Y, "Y")
    labels = np.unique(np.asarray(env).ravel(), return_inverse=True)[1]
    tape = Tape()
    return _irm_penalty(tape, model.net, model.net.leaves(), X, Y, labels, model.task).item()


def train_phi(O, parent_latents, config: PredictorConfig = PredictorConfig()) -> PhiModel:
    """Regress the parent latents on the observations by pooled squared error."""
    O, Z = _as_2d(O, "O"), _as_2d(parent_latents, "parent_latents")
    if O.shape[0] != Z.shape[0]:
        raise ValueError(f"O has {O.shape[0]} rows, parent_latents {Z.shape[0]}")
    if Z.shape[1] == 0:
        raise ValueError("no parent dimensions to learn")
    return _fit(PhiModel, O, Z, config, "phi", "regression")


def train_w(parent_latents, Y, config: PredictorConfig = PredictorConfig()) -> WModel:
    """Fit the target from the parent latents (squared error or cross-entropy)."""
    Z, Y = _as_2d(parent_latents, "parent_latents"), _as_2d(Y, "Y")
    if Z.shape[0] != Y.shape[0]:
        raise ValueError(f"parent_latents has {Z.shape[0]} rows, Y {Y.shape[0]}")
    if config.task == "classification" and not np.all(np.isin(Y, (0.0, 1.0))):
        raise ValueError("classification targets must be 0/1")
    return _fit(WModel, Z, Y, config, "w", config.task)


def predict(phi: PhiModel, w: WModel, O) -> np.ndarray:
    if phi.n_out != w.n_in:
        raise ValueError(f"phi outputs {phi.n_out} columns but w expects {w.n_in}")
    return w(phi(O))


def erm_baseline(O, Y, env, config: PredictorConfig = PredictorConfig()) -> tuple[NetModel, EvalResult]:
    """One network ``O -> Y`` minimising the pooled risk; returns it and its training evaluation."""
    return irmv1_baseline(O, Y, env, config, penalty_weight=0.0)[:2]


def irmv1_baseline(O, Y, env, config: PredictorConfig = PredictorConfig(), penalty_weight: float = 100.0,
                   warmup_epochs: int = 10) -> tuple[NetModel, EvalResult, list]:
    """Pooled risk plus ``penalty_weight`` times the IRMv1 penalty after ``warmup_epochs``.

    Returns the network, its training evaluation and the per-step penalty values.
    """
    O, Y = _as_2d(O, "O"), _as_2d(Y, "Y")
    env = np.asarray(env).ravel()
    if not (O.shape[0] == Y.shape[0] == env.size):
        raise ValueError("O, Y and env must have the same number of rows")
    if penalty_weight < 0:
        raise ValueError("penalty_weight must be nonnegative")
    trace: list = []
    model = _fit(NetModel, O, Y, config, "erm", config.task, env=env,
                 penalty_weight=penalty_weight, warmup_epochs=warmup_epochs, penalty_trace=trace)
    return model, evaluate(Y, model(O), env, config.task), trace


# estimators


class TwoStagePredictor(RegressorMixin, BaseEstimator):
    """``fit(O, y, parent_latents=Z)`` trains phi on ``Z`` and w on ``(Z, y)``; ``predict(O)`` = w(phi(O))."""

    def __init__(self, hidden=6, epochs=200, batch_size=64, learning_rate=5e-3, task="regression", random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.task = task
        self.random_state = random_state

    def _config(self) -> PredictorConfig:
        return PredictorConfig(self.hidden, self.epochs, self.batch_size, self.learning_rate,
                               int(self.random_state), self.task)

    def fit(self, X, y, parent_latents=None):
        X, y = check_X_y(X, y, y_numeric=True)
        if parent_latents is None:
            raise ValueError("parent_latents are required")
        cfg = self._config()
        self.phi_ = train_phi(X, parent_latents, cfg)
        self.w_ = train_w(parent_latents, y, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "phi_")
        return self.phi_(check_array(X))

    def predict(self, X):
        check_is_fitted(self, "phi_")
        return predict(self.phi_, self.w_, check_array(X)).ravel()


class PooledRiskPredictor(RegressorMixin, BaseEstimator):
    """ERM network ``O -> y``; a positive ``penalty_weight`` adds the IRMv1 penalty."""

    def __init__(self, hidden=6, penalty_weight=0.0, warmup_epochs=10, epochs=200, batch_size=64,
                 learning_rate=5e-3, task="regression", random_state=0):
        self.hidden = hidden
        self.penalty_weight = penalty_weight
        self.warmup_epochs = warmup_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.task = task
        self.random_state = random_state

    def fit(self, X, y, env=None):
        X, y = check_X_y(X, y, y_numeric=True)
        if env is None:
            env = np.zeros(X.shape[0], dtype=int)
        cfg = PredictorConfig(self.hidden, self.epochs, self.batch_size, self.learning_rate,
                              int(self.random_state), self.task)
        self.model_, self.train_eval_, self.penalty_trace_ = irmv1_baseline(
            X, y, env, cfg, self.penalty_weight, self.warmup_epochs)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_(check_array(X)).ravel()
