"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .nn import Mlp, MlpSpec
from .tensor import Tape, backward


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference(f: Callable[[np.ndarray], float], flat: np.ndarray, coords, h: float = 1e-5) -> np.ndarray:
    out = np.empty(len(coords))
    for j, c in enumerate(coords):
        plus, minus = flat.copy(), flat.copy()
        plus[c] += h
        minus[c] -= h
        out[j] = (f(plus) - f(minus)) / (2 * h)
    return out


def pick_coords(n_params: int, n_coords: int, rng: np.random.Generator) -> np.ndarray:
    if n_params <= n_coords:
        return np.arange(n_params)
    return np.sort(rng.choice(n_params, size=n_coords, replace=False))


def check_mlp_gradients(spec: MlpSpec, n_coords: int = 100, seed: int = 0, n_rows: int = 16, h: float = 1e-5) -> float:
    """Worst relative error between tape and finite-difference gradients of a squared loss."""
    rng = np.random.default_rng(seed)
    net = Mlp(spec, rng)
    for k in net.params:
        if k.endswith(".b"):
            net.params[k] = rng.normal(scale=0.1, size=net.params[k].shape)
    x = rng.normal(size=(n_rows, spec.n_in))
    y = rng.normal(size=(n_rows, spec.n_out))

    tape = Tape()
    leaves = net.leaves()
    out = net.forward(tape, x, leaves)
    loss = tape.mean(tape.square(tape.subtract(out, y)))
    grads = backward(tape, loss, wrt=leaves.values())
    analytic = np.concatenate([grads[leaves[k]].ravel() for k in sorted(net.params)])

    base = net.get_flat()
    probe = Mlp(spec, 0)

    def numpy_loss(flat):
        probe.set_flat(flat)
        return float(np.mean((probe(x) - y) ** 2))

    coords = pick_coords(base.size, n_coords, rng)
    numeric = finite_difference(numpy_loss, base, coords, h)
    return max(relative_error(a, n) for a, n in zip(analytic[coords], numeric))
