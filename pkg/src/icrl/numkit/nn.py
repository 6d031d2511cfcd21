"""Fully connected networks on top of :mod:`icrl.numkit.tensor`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tape, Tensor

ACTIVATIONS = ("relu", "sigmoid", "identity")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[in, hidden..., out]`` and one activation per weight layer."""

    layer_sizes: tuple[int, ...]
    activations: tuple[str, ...] = field(default=())

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer widths must be positive, got {sizes}")
        acts = tuple(self.activations)
        if not acts:
            acts = ("relu",) * (len(sizes) - 2) + ("identity",)
        if len(acts) != len(sizes) - 1:
            raise ValueError(
                f"{len(sizes) - 1} weight layers but {len(acts)} activations"
            )
        bad = [a for a in acts if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown activation(s) {bad}; choose from {ACTIVATIONS}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activations", acts)

    @classmethod
    def hidden(cls, n_in: int, hidden: int | None, n_out: int, head: str = "identity") -> "MlpSpec":
        """``n_in -> hidden (relu) -> n_out``, or a single affine map when ``hidden`` is None."""
        if hidden is None:
            return cls((n_in, n_out), (head,))
        return cls((n_in, hidden, n_out), ("relu", head))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activations": list(self.activations)}


class Mlp:
    """Parameters of an :class:`MlpSpec` network, stored as named float64 arrays.

    Weights use Glorot-uniform initialisation, biases start at zero.
    """

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | int | None = None):
        self.spec = spec
        rng = np.random.default_rng(rng)
        self.params: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.params[f"{i}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"{i}.b"] = np.zeros(fan_out)

    @property
    def n_layers(self) -> int:
        return len(self.spec.layer_sizes) - 1

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, name=k) for k, v in self.params.items()}

    def forward(self, tape: Tape, x, leaves: dict[str, Tensor] | None = None) -> Tensor:
        """Record the network applied to ``x`` (n x n_in) on ``tape``."""
        if leaves is None:
            leaves = self.leaves()
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.spec.n_in:
            raise ShapeError(f"MLP expects (n, {self.spec.n_in}) input, got {x.shape}")
        h = x
        for i, act in enumerate(self.spec.activations):
            h = tape.add(tape.matmul(h, leaves[f"{i}.W"]), leaves[f"{i}.b"])
            if act == "relu":
                h = tape.relu(h)
            elif act == "sigmoid":
                h = tape.sigmoid(h)
        return h

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass (no tape)."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.spec.n_in:
            raise ShapeError(f"MLP expects (n, {self.spec.n_in}) input, got {h.shape}")
        for i, act in enumerate(self.spec.activations):
            h = h @ self.params[f"{i}.W"] + self.params[f"{i}.b"]
            if act == "relu":
                h = np.maximum(h, 0.0)
            elif act == "sigmoid":
                h = 1.0 / (1.0 + np.exp(-h))
        return h

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_parameters():
            raise ShapeError(f"expected {self.n_parameters()} values, got {flat.size}")
        pos = 0
        for k in sorted(self.params):
            p = self.params[k]
            self.params[k] = flat[pos:pos + p.size].reshape(p.shape).copy()
            pos += p.size

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "shapes": {k: list(v.shape) for k, v in sorted(self.params.items())},
            "params": self.get_flat().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        spec = MlpSpec(tuple(d["spec"]["layer_sizes"]), tuple(d["spec"]["activations"]))
        net = cls(spec, rng=0)
        for k, shape in d["shapes"].items():
            if tuple(net.params[k].shape) != tuple(shape):
                raise ShapeError(f"checkpoint shape mismatch for {k}: {shape}")
        net.set_flat(np.asarray(d["params"], dtype=np.float64))
        return net
