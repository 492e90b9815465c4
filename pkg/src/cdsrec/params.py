"""Trainable parameter tables for the full model."""

from __future__ import annotations

import numpy as np

from .numeric import Tensor, xavier_init

NORM_FLOOR = 1e-12


class ModelParameters:
    """Named trainable tensors; behaves like a mapping for the optimizer."""

    def __init__(self, tensors: dict):
        self._tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def keys(self):
        return self._tensors.keys()

    def values(self):
        return self._tensors.values()

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def n_scalars(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._tensors.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for t in self._tensors.values():
            t.data[...] = flat[offset:offset + t.size].reshape(t.shape)
            offset += t.size

    def to_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def save_npz(self, path) -> None:
        np.savez(path, **{name: t.data for name, t in self._tensors.items()})

    @classmethod
    def from_npz(cls, path) -> "ModelParameters":
        with np.load(path) as bundle:
            tensors = {name: Tensor(bundle[name], requires_grad=True) for name in bundle.files}
        return cls(tensors)


def init_parameters(n_nodes: int, n_items_a: int, n_items_b: int, *, d: int,
                    d_k: int, n_buckets: int, n_stacks: int, seed: int) -> ModelParameters:
    """Build all trainable tables for a given graph size.

    Weight matrices and embedding tables get Xavier-uniform values from a
    per-table seed stream; biases start at zero and layer-norm gains at
    one. Insertion order is fixed so flattened views are reproducible.
    """
    shapes = {
        "node_emb": (n_nodes, d),
        "interval_emb": (n_buckets, d),
        "prop_w1": (d, d),
        "prop_w2": (d, d),
        "enc_wk": (d, d_k),
        "enc_wq": (d, d_k),
        "ffn_w1": (d, d),
        "ffn_w2": (d, d),
        "pool_w1": (2 * d, d),
        "pool_w2": (d, 1),
        "pred_w_a": (n_items_a, 2 * d),
        "pred_w_b": (n_items_b, 2 * d),
    }
    streams = np.random.SeedSequence(seed).spawn(len(shapes))
    tensors = {}
    for (name, shape), stream in zip(shapes.items(), streams):
        tensors[name] = xavier_init(shape, np.random.default_rng(stream), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    tensors["ffn_b1"] = zeros((d,))
    tensors["ffn_b2"] = zeros((d,))
    tensors["pool_b"] = zeros((d,))
    tensors["pred_b_a"] = zeros((n_items_a,))
    tensors["pred_b_b"] = zeros((n_items_b,))
    for stack in range(n_stacks):
        tensors[f"ln_gain_{stack}"] = Tensor(np.ones(d), requires_grad=True)
        tensors[f"ln_bias_{stack}"] = zeros((d,))
    return ModelParameters(tensors)
