"""Named parameter collections, the Adam optimizer, and checkpoints.

One ParameterStore holds every trainable tensor of a model (or of several
models trained jointly), its Adam moment buffers, and a shared step
counter.  Checkpoints serialize all of that through the LMF1 container,
so a save/load round trip is bit-exact and resumes optimization mid-run.
"""

from __future__ import annotations

import numpy as np

from ..container import read_container, write_container
from .tensor import Tensor


class ParameterStore:
    """Ordered map of parameter name -> Tensor plus Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, values) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        tensor = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
        self.params[name] = tensor
        self.moment1[name] = np.zeros_like(tensor.values)
        self.moment2[name] = np.zeros_like(tensor.values)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def items(self):
        return self.params.items()

    def num_values(self) -> int:
        return sum(t.values.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def adam_step(
    store: ParameterStore,
    learning_rate: float,
    weight_decay=0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with decoupled weight decay over every parameter.

    Decay multiplies each parameter by (1 - lr*decay) independently of the
    gradient path, so a parameter receiving only zero gradients shrinks
    geometrically.  ``weight_decay`` is a float, or a callable mapping a
    parameter name to its decay (for stores holding several models with
    different regularization weights).  Gradients are consumed: they are
    cleared on return.
    """
    for name, p in store.params.items():
        if p.grad is None:
            raise ValueError(
                f"parameter {name!r} has no gradient; run backward() before adam_step"
            )
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = p.grad
        m1 = store.moment1[name]
        m2 = store.moment2[name]
        m1 *= beta1
        m1 += (1.0 - beta1) * g
        m2 *= beta2
        m2 += (1.0 - beta2) * (g * g)
        decay = weight_decay(name) if callable(weight_decay) else weight_decay
        if decay:
            p.values *= 1.0 - learning_rate * decay
        p.values -= learning_rate * (m1 / bc1) / (np.sqrt(m2 / bc2) + eps)
        p.grad = None


def unused_parameters(store: ParameterStore) -> list[str]:
    """Names of parameters whose last backward left no (or all-zero) gradient.

    Run right after backward() and before adam_step (which clears grads).
    """
    stale = []
    for name, p in store.params.items():
        if p.grad is None or not np.any(p.grad):
            stale.append(name)
    return stale


def save_checkpoint(store: ParameterStore, path) -> None:
    records: dict[str, np.ndarray] = {"meta/step": np.asarray(float(store.step_count))}
    for name, p in store.params.items():
        records[f"param/{name}"] = p.values
        records[f"m1/{name}"] = store.moment1[name]
        records[f"m2/{name}"] = store.moment2[name]
    write_container(path, records)


def load_checkpoint(store: ParameterStore, path) -> None:
    """Restore parameters and optimizer state in place.

    The store must already contain the same parameter names with the same
    shapes (construct the models first, then load).
    """
    records = read_container(path)
    if "meta/step" not in records:
        raise ValueError(f"{path}: not a checkpoint (no meta/step record)")
    expected = {"meta/step"}
    for name, p in store.params.items():
        for kind in ("param", "m1", "m2"):
            key = f"{kind}/{name}"
            expected.add(key)
            if key not in records:
                raise ValueError(f"{path}: missing record {key!r}")
            if records[key].shape != p.values.shape:
                raise ValueError(
                    f"{path}: record {key!r} has shape {records[key].shape}, "
                    f"expected {p.values.shape}"
                )
    extra = set(records) - expected
    if extra:
        raise ValueError(f"{path}: unexpected records {sorted(extra)}")
    store.step_count = int(records["meta/step"].reshape(-1)[0])
    for name, p in store.params.items():
        p.values = records[f"param/{name}"].astype(np.float64)
        p.grad = None
        store.moment1[name] = records[f"m1/{name}"].astype(np.float64)
        store.moment2[name] = records[f"m2/{name}"].astype(np.float64)
