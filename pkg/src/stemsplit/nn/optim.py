"""Adam and the plateau learning-rate halving schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update with bias correction.

    ``params``/``grads`` are parallel lists of arrays; ``state`` is a dict
    holding ``t`` and the moment lists ``m``/``v`` (created on first use).
    """
    if "m" not in state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


class Adam:
    """Adam over a list of parameter tensors."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr, *self.betas, self.eps)


@dataclass
class PlateauHalver:
    """Halve the learning rate after ``patience`` epochs without a strictly lower loss."""

    lr: float = 1e-3
    patience: int = 3
    factor: float = 0.5
    best: float = float("inf")
    bad_epochs: int = 0
    history: list = field(default_factory=list)

    def step(self, validation_loss: float) -> float:
        self.history.append(float(validation_loss))
        if validation_loss < self.best:
            self.best = float(validation_loss)
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr

    def to_json(self) -> dict:
        return {"lr": self.lr, "patience": self.patience, "factor": self.factor, "best": self.best, "bad_epochs": self.bad_epochs}

    @classmethod
    def from_json(cls, d: dict) -> "PlateauHalver":
        return cls(lr=d["lr"], patience=d["patience"], factor=d["factor"], best=d["best"], bad_epochs=d["bad_epochs"])


def lr_schedule(state: PlateauHalver, validation_loss: float) -> float:
    return state.step(validation_loss)
