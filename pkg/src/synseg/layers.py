"""Parameter containers and the handful of layers the decoder needs."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Module:
    """Minimal parameter container.

    Parameters and child modules are discovered from instance attributes in
    definition order, so names and ordering are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = [n for n in params if n not in state]
            if missing:
                raise KeyError(f"missing tensor {missing[0]!r}")
            extra = [n for n in state if n not in params]
            if extra:
                raise KeyError(f"unexpected tensor {extra[0]!r}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"tensor {name!r}: shape {value.shape} != expected {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
            p.grad = np.zeros_like(p.data)

    def astype(self, dtype) -> "Module":
        """Convert every parameter in place (used by float64 verification runs)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self


class Linear(Module):
    """Affine map over the last axis; weight stored as (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 bias: bool = True, init: str = "normal", std: float | None = None, decay: bool = True):
        if init == "zeros":
            w = np.zeros((in_features, out_features))
        elif init == "identity":
            if in_features != out_features:
                raise ValueError("identity init needs a square layer")
            w = np.eye(in_features)
        else:
            if rng is None:
                raise ValueError("random init needs an rng")
            std = 1.0 / np.sqrt(in_features) if std is None else std
            w = rng.standard_normal((in_features, out_features)) * std
        self.weight = Parameter(w.astype(np.float32), decay=decay)
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32), decay=False) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim, dtype=np.float32))
        self.bias = Parameter(np.zeros(dim, dtype=np.float32), decay=False)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)
