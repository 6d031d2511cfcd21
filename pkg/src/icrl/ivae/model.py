"""Conditional VAE with a learned, condition-dependent Gaussian prior.

Generative side: latent ``x ~ N(0, diag(exp lam(u)))`` where ``u`` is the
conditioning vector built from the target and the environment, and
``o | x ~ N(f(x), s2 I)`` with a fixed decoder variance ``s2``. Inference
side: ``q(x | o, u) = N(mu, diag(exp logvar))`` from an encoder with one
shared hidden layer and separate mean and log-variance heads.

The per-row lower bound is

    reconstruction + prior_term - entropy_term

with ``reconstruction = log N(o; f(x), s2 I)`` and
``prior_term = log N(x; 0, exp lam(u))`` at one reparameterised sample
``x = mu + exp(logvar / 2) * eps``, and the closed form

    entropy_term = E_q[log q] = -J/2 log(2 pi) - 1/2 sum_j (1 + logvar_j),

i.e. minus the differential entropy of ``q``, so subtracting it adds the
entropy. All three are reported as per-row means over the batch.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from ..numkit import Mlp, MlpSpec, Tape, Tensor, TrainingDivergence, fit_minibatch

LOG_2PI = float(np.log(2 * np.pi))


@dataclass(frozen=True)
class IvaeConfig:
    """Architecture and optimisation settings.

    A ``*_hidden`` of None makes that network a single affine map.
    ``conditional=False`` replaces the learned prior by a standard normal
    (plain VAE).
    """

    latent_dim: int = 2
    prior_hidden: int | None = 6
    encoder_hidden: int | None = 6
    decoder_hidden: int | None = 6
    decoder_variance: float = 0.01
    conditional: bool = True
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 5e-3
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        if not self.decoder_variance > 0:
            raise ValueError("decoder_variance must be positive")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("need epochs >= 0, batch_size >= 1 and a positive learning rate")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ElboBreakdown:
    reconstruction: float
    prior_term: float
    entropy_term: float

    @property
    def total(self) -> float:
        return self.reconstruction + self.prior_term - self.entropy_term

    def to_dict(self) -> dict:
        return {"reconstruction": self.reconstruction, "prior_term": self.prior_term,
                "entropy_term": self.entropy_term, "total": self.total}


@dataclass(frozen=True)
class LatentPosterior:
    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ValueError("mean and log_variance shapes differ")

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance)


def encode_conditioning(y, env, env_levels, y_levels=None) -> np.ndarray:
    """Conditioning vector: target (raw, or one-hot when ``y_levels`` is given) then one-hot env."""
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    env = np.asarray(env).ravel()
    levels = list(env_levels)
    unknown = sorted(set(env.tolist()) - set(levels))
    if unknown:
        raise ValueError(f"environment labels {unknown} were not seen in training")
    e_hot = np.zeros((env.size, len(levels)))
    e_hot[np.arange(env.size), [levels.index(v) for v in env.tolist()]] = 1.0
    if y_levels is not None:
        ylev = list(y_levels)
        bad = sorted(set(y.ravel().tolist()) - set(ylev))
        if bad:
            raise ValueError(f"class labels {bad} were not seen in training")
        y = np.eye(len(ylev))[[ylev.index(v) for v in y.ravel().tolist()]]
    return np.hstack([y, e_hot])


class IvaeModel:
    """Networks of the conditional VAE plus the lower bound on a batch."""

    def __init__(self, obs_dim: int, cond_dim: int, config: IvaeConfig = IvaeConfig()):
        if config.latent_dim > obs_dim:
            raise ValueError(f"latent_dim {config.latent_dim} exceeds observation dim {obs_dim}")
        self.obs_dim = int(obs_dim)
        self.cond_dim = int(cond_dim)
        self.config = config
        ss = np.random.SeedSequence(config.seed)
        seeds = ss.spawn(5)
        J, h_enc = config.latent_dim, config.encoder_hidden
        enc_width = obs_dim + cond_dim if h_enc is None else h_enc
        rngs = [np.random.default_rng(s) for s in seeds]
        self.nets: dict[str, Mlp] = {}
        if h_enc is not None:
            self.nets["encoder"] = Mlp(MlpSpec((obs_dim + cond_dim, h_enc), ("relu",)), rngs[0])
        self.nets["enc_mean"] = Mlp(MlpSpec.hidden(enc_width, None, J), rngs[1])
        self.nets["enc_logvar"] = Mlp(MlpSpec.hidden(enc_width, None, J), rngs[2])
        self.nets["decoder"] = Mlp(MlpSpec.hidden(J, config.decoder_hidden, obs_dim), rngs[3])
        if config.conditional:
            self.nets["prior"] = Mlp(MlpSpec.hidden(cond_dim, config.prior_hidden, J), rngs[4])

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def decoder_variance(self) -> float:
        return self.config.decoder_variance

    def _check(self, O, U):
        O = np.asarray(O, dtype=np.float64)
        U = np.asarray(U, dtype=np.float64)
        if O.ndim != 2 or O.shape[1] != self.obs_dim:
            raise ValueError(f"expected observations with {self.obs_dim} columns, got shape {O.shape}")
        if U.ndim != 2 or U.shape[1] != self.cond_dim or U.shape[0] != O.shape[0]:
            raise ValueError(f"expected conditioning of shape ({O.shape[0]}, {self.cond_dim}), got {U.shape}")
        if O.shape[0] == 0:
            raise ValueError("empty batch")
        return O, U

    # graph construction

    def _encode(self, tape: Tape, leaves, O, U):
        h = np.hstack([O, U])
        if "encoder" in self.nets:
            h = self.nets["encoder"].forward(tape, h, leaves["encoder"])
        mu = self.nets["enc_mean"].forward(tape, h, leaves["enc_mean"])
        logvar = self.nets["enc_logvar"].forward(tape, h, leaves["enc_logvar"])
        return mu, logvar

    def elbo_terms(self, tape: Tape, leaves, O, U, eps) -> tuple[Tensor, Tensor, Tensor]:
        """Per-row mean reconstruction, prior and entropy terms as tape tensors."""
        n, J, d = O.shape[0], self.latent_dim, self.obs_dim
        mu, logvar = self._encode(tape, leaves, O, U)
        std = tape.exp(tape.multiply(logvar, 0.5))
        x = tape.add(mu, tape.multiply(std, eps))
        out = self.nets["decoder"].forward(tape, x, leaves["decoder"])
        s2 = self.decoder_variance
        sq = tape.sum(tape.square(tape.subtract(out, O)))
        recon = tape.add(tape.multiply(sq, -0.5 / (s2 * n)), -0.5 * d * (LOG_2PI + np.log(s2)))
        if "prior" in self.nets:
            lam = self.nets["prior"].forward(tape, U, leaves["prior"])
            quad = tape.multiply(tape.square(x), tape.exp(tape.multiply(lam, -1.0)))
            inner = tape.add(lam, quad)
        else:
            inner = tape.square(x)
        prior = tape.add(tape.multiply(tape.sum(inner), -0.5 / n), -0.5 * J * LOG_2PI)
        ent = tape.add(tape.multiply(tape.sum(logvar), -0.5 / n), -0.5 * J * (LOG_2PI + 1.0))
        return recon, prior, ent

    def negative_elbo(self, tape: Tape, leaves, O, U, eps) -> Tensor:
        recon, prior, ent = self.elbo_terms(tape, leaves, O, U, eps)
        return tape.subtract(ent, tape.add(recon, prior))

    def elbo(self, O, U, rng=None, eps=None) -> ElboBreakdown:
        """Lower bound on ``(O, U)`` at one reparameterised sample per row."""
        O, U = self._check(O, U)
        if eps is None:
            eps = np.random.default_rng(rng).standard_normal((O.shape[0], self.latent_dim))
        tape = Tape()
        leaves = {k: net.leaves() for k, net in self.nets.items()}
        r, p, e = self.elbo_terms(tape, leaves, O, U, eps)
        out = ElboBreakdown(r.item(), p.item(), e.item())
        if not np.isfinite(out.total):
            raise TrainingDivergence(-1, "non-finite ELBO")
        return out

    # plain forward passes

    def posterior(self, O, U) -> LatentPosterior:
        O, U = self._check(O, U)
        h = np.hstack([O, U])
        if "encoder" in self.nets:
            h = self.nets["encoder"](h)
        return LatentPosterior(self.nets["enc_mean"](h), self.nets["enc_logvar"](h))

    def prior_log_variance(self, U) -> np.ndarray:
        U = np.asarray(U, dtype=np.float64)
        if "prior" not in self.nets:
            return np.zeros((U.shape[0], self.latent_dim))
        return self.nets["prior"](U)

    def decode(self, X) -> np.ndarray:
        return self.nets["decoder"](np.asarray(X, dtype=np.float64))

    # persistence

    def to_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "cond_dim": self.cond_dim,
            "config": self.config.to_dict(),
            "config_hash": self.config.digest(),
            "nets": {k: net.to_dict() for k, net in sorted(self.nets.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IvaeModel":
        config = IvaeConfig(**d["config"])
        if d.get("config_hash") not in (None, config.digest()):
            raise ValueError("checkpoint config hash does not match its config")
        model = cls(d["obs_dim"], d["cond_dim"], config)
        if set(d["nets"]) != set(model.nets):
            raise ValueError(f"checkpoint networks {sorted(d['nets'])} do not match {sorted(model.nets)}")
        model.nets = {k: Mlp.from_dict(v) for k, v in d["nets"].items()}
        return model

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "IvaeModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainingResult:
    model: IvaeModel
    elbo_curve: list[float]
    warnings: list[str] = field(default_factory=list)


def distinct_conditions(U) -> int:
    return int(np.unique(np.round(np.asarray(U, dtype=np.float64), 12), axis=0).shape[0])


def train_ivae(O, U, config: IvaeConfig = IvaeConfig()) -> TrainingResult:
    """Fit the model by minibatch Adam on the negative lower bound.

    The returned curve holds the full-data lower bound before training and
    after every epoch, each evaluated with the same fixed noise draw so
    the values are comparable.
    """
    O = np.asarray(O, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    model = IvaeModel(O.shape[1], U.shape[1], config)
    O, U = model._check(O, U)
    notes = []
    needed = config.latent_dim + 1
    if config.conditional and distinct_conditions(U) < needed:
        msg = (f"only {distinct_conditions(U)} distinct conditioning values; "
               f"identifiability needs at least {needed}")
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    eval_eps = np.random.default_rng(np.random.SeedSequence([config.seed, 2])).standard_normal(
        (O.shape[0], config.latent_dim))

    def loss_fn(tape, leaves, idx):
        eps = rng.standard_normal((idx.size, config.latent_dim))
        return model.negative_elbo(tape, leaves, O[idx], U[idx], eps)

    def eval_fn():
        return model.elbo(O, U, eps=eval_eps).total

    curve = fit_minibatch(
        model.nets, loss_fn, O.shape[0], epochs=config.epochs, batch_size=config.batch_size,
        learning_rate=config.learning_rate, rng=rng, eval_fn=eval_fn,
    )
    if not np.all(np.isfinite(curve)):
        raise TrainingDivergence(len(curve), "non-finite ELBO on the training data")
    return TrainingResult(model, curve, notes)


def infer_latents(model: IvaeModel, O, U) -> LatentPosterior:
    return model.posterior(O, U)
