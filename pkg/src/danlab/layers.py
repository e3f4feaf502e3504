"""Layer vocabulary: fully-connected, per-task batch norm banks and heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    batch_norm,
    matmul,
    maxpool2d,
    relu,
    softmax_cross_entropy,
)

__all__ = [
    "BatchNormBank",
    "Head",
    "fully_connected",
    "maxpool2d",
    "relu",
    "softmax_cross_entropy",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"fully_connected: input {x.shape} vs weights {w.shape}")
    out = matmul(x, w)
    return add(out, b) if b is not None else out


@dataclass
class BNParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    frozen: bool = False

    def freeze(self, frozen: bool = True) -> None:
        self.frozen = frozen
        self.gamma.requires_grad = not frozen
        self.beta.requires_grad = not frozen

    def clone(self, frozen: bool = False) -> BNParams:
        p = BNParams(
            Tensor(self.gamma.data.copy()),
            Tensor(self.beta.data.copy()),
            self.running_mean.copy(),
            self.running_var.copy(),
        )
        p.freeze(frozen)
        return p


class BatchNormBank:
    """One set of batch-norm parameters and statistics per task.

    Frozen entries always normalize with their running statistics so that
    training another task can never move them.
    """

    def __init__(self, channels: int):
        self.channels = channels
        self.params: list[BNParams] = [self._fresh(channels)]
        self.active_task = 0
        self.mode = "eval"

    @staticmethod
    def _fresh(c: int) -> BNParams:
        p = BNParams(Tensor(np.ones(c)), Tensor(np.zeros(c)), np.zeros(c), np.ones(c))
        p.freeze(False)
        return p

    def add_task(self, copy_from: int = 0, frozen: bool = False) -> int:
        # new tasks start from the base task's parameters and statistics
        self.params.append(self.params[copy_from].clone(frozen=frozen))
        return len(self.params) - 1

    def __call__(self, x: Tensor, task: int | None = None) -> Tensor:
        t = self.active_task if task is None else task
        p = self.params[t]
        training = self.mode == "train" and not p.frozen
        return batch_norm(x, p.gamma, p.beta, p.running_mean, p.running_var,
                          training=training, momentum=BN_MOMENTUM, eps=BN_EPS)


@dataclass
class Head:
    """Fully-connected stack with ReLU between layers; weights are ``[D_in, D_out]``."""

    weights: list[Tensor]
    biases: list[Tensor]
    frozen: bool = False

    def __post_init__(self):
        self.freeze(self.frozen)

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator) -> Head:
        ws, bs = [], []
        for d_in, d_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(d_in)
            ws.append(Tensor(rng.uniform(-bound, bound, size=(d_in, d_out))))
            bs.append(Tensor(rng.uniform(-bound, bound, size=d_out)))
        return cls(ws, bs)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def freeze(self, frozen: bool = True) -> None:
        self.frozen = frozen
        for t in (*self.weights, *self.biases):
            t.requires_grad = not frozen

    def clone(self, frozen: bool = False) -> Head:
        return Head([Tensor(w.data.copy()) for w in self.weights],
                    [Tensor(b.data.copy()) for b in self.biases], frozen)

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = fully_connected(x, w, b)
            if i < last:
                x = relu(x)
        return x

    def num_params(self) -> int:
        return sum(w.data.size + b.data.size for w, b in zip(self.weights, self.biases))
