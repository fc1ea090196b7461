"""Module container, batch norm and the two optimizers used by the search."""

from __future__ import annotations

import math
from typing import Dict, Iterable, Iterator, List, Tuple

import numpy as np

from .tensor import ContractError, Tensor


class Module:
    """Minimal parameter container.

    Parameters are :class:`Tensor` attributes with ``requires_grad`` set at
    construction; submodules are :class:`Module` attributes or lists of them.
    Registration order follows attribute assignment order, which keeps
    ``named_parameters`` deterministic.
    """

    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_frozen"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{key}", item

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()
            elif isinstance(value, dict):
                for item in value.values():
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for i, m in enumerate(self.modules()):
            for key, arr in m.buffers().items():
                state[f"buffer.{i}.{key}"] = np.array(arr, dtype=np.float64)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            if state[name].shape != p.data.shape:
                raise ContractError(f"shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for i, m in enumerate(self.modules()):
            bufs = m.buffers()
            if bufs:
                m.load_buffers({k: state[f"buffer.{i}.{k}"] for k in bufs})

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def load_buffers(self, buffers: Dict[str, np.ndarray]) -> None:
        pass


class Parameter(Tensor):
    """A leaf tensor that belongs to a module."""

    __slots__ = ()

    def __init__(self, data) -> None:
        super().__init__(data, requires_grad=True)


class BatchNorm2d(Module):
    """Per-channel batch normalization with affine parameters.

    ``update_stats`` controls whether training-mode passes update the running
    estimates; the architecture pass of the search turns it off.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> None:
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.update_stats = True

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffers(self, buffers: Dict[str, np.ndarray]) -> None:
        self.running_mean = np.array(buffers["running_mean"])
        self.running_var = np.array(buffers["running_var"])

    def forward(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        if self.training:
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mean
            var = centered.square().mean(axis=(0, 2, 3), keepdims=True)
            if self.update_stats:
                m = self.momentum
                n = x.size // c
                unbiased = var.data.reshape(c) * n / max(n - 1, 1)
                self.running_mean = (1 - m) * self.running_mean + m * mean.data.reshape(c)
                self.running_var = (1 - m) * self.running_var + m * unbiased
            normed = centered / (var + self.eps).sqrt()
        else:
            normed = (x - self.running_mean.reshape(1, c, 1, 1)) / np.sqrt(
                self.running_var.reshape(1, c, 1, 1) + self.eps
            )
        return normed * self.weight.reshape(1, c, 1, 1) + self.bias.reshape(1, c, 1, 1)


class SGD:
    """SGD with momentum and L2 weight decay (torch semantics)."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf: List[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                buf = self._buf[i]
                buf = g.copy() if buf is None else self.momentum * buf + g
                self._buf[i] = buf
                g = buf
            p.data = p.data - self.lr * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            self._m[i] = b1 * self._m[i] + (1 - b1) * g
            self._v[i] = b2 * self._v[i] + (1 - b2) * g * g
            p.data = p.data - self.lr * (self._m[i] / c1) / (np.sqrt(self._v[i] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base_lr: float, epoch: int, total_epochs: int, min_lr: float = 0.0) -> float:
    """Cosine annealing from ``base_lr`` at epoch 0 to ``min_lr`` at ``total_epochs``."""
    if total_epochs <= 0:
        return base_lr
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * epoch / total_epochs))
