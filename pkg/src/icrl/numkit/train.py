from __future__ import annotations

import logging
from typing import Callable, Mapping

import numpy as np

from .nn import Mlp
from .optim import AdamState, adam_step
from .tensor import DomainError, NonFiniteError, Tape, Tensor, backward

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


# numerical failures that mean the parameters have blown up
DIVERGENCE = (NonFiniteError, DomainError, FloatingPointError, OverflowError)

LossFn = Callable[[Tape, dict[str, dict[str, Tensor]], np.ndarray], Tensor]


def collect_leaves(nets: Mapping[str, Mlp]) -> dict[str, dict[str, Tensor]]:
    return {name: net.leaves() for name, net in nets.items()}


def gradients(nets: Mapping[str, Mlp], loss_fn: LossFn, idx: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and gradients keyed ``"<net>/<param>"`` for one batch."""
    tape = Tape()
    leaves = collect_leaves(nets)
    loss = loss_fn(tape, leaves, idx)
    flat = [t for d in leaves.values() for t in d.values()]
    grads = backward(tape, loss, wrt=flat)
    out = {}
    for name, d in leaves.items():
        for k, t in d.items():
            out[f"{name}/{k}"] = grads[t]
    return loss.item(), out


def fit_minibatch(
    nets: Mapping[str, Mlp],
    loss_fn: LossFn,
    n_rows: int,
    *,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    rng: np.random.Generator,
    eval_fn: Callable[[], float] | None = None,
) -> list[float]:
    """Minimise ``loss_fn`` with Adam over shuffled minibatches.

    Returns one value per epoch: ``eval_fn()`` if given, else the mean batch loss.
    The first entry is taken before any update.
    """
    params = {f"{name}/{k}": arr for name, net in nets.items() for k, arr in net.params.items()}
    state = AdamState(learning_rate=learning_rate)
    curve = []
    step = 0

    def evaluate():
        try:
            value = eval_fn()
        except DIVERGENCE as exc:
            raise TrainingDivergence(step, str(exc)) from exc
        if not np.isfinite(value):
            raise TrainingDivergence(step, "non-finite evaluation")
        return value

    if eval_fn is not None:
        curve.append(evaluate())
    for epoch in range(epochs):
        order = rng.permutation(n_rows)
        losses = []
        for start in range(0, n_rows, batch_size):
            idx = order[start:start + batch_size]
            try:
                value, grads = gradients(nets, loss_fn, idx)
            except DIVERGENCE as exc:
                raise TrainingDivergence(step, str(exc)) from exc
            if not np.isfinite(value):
                raise TrainingDivergence(step, "non-finite loss")
            adam_step(params, grads, state)
            losses.append(value)
            step += 1
        curve.append(evaluate() if eval_fn is not None else float(np.mean(losses)))
        if epoch % 50 == 0:
            log.debug("epoch %d loss %.5g", epoch, curve[-1])
    return curve
