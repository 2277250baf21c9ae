"""Initialization helpers and small layer compositions."""

from __future__ import annotations

import math

import numpy as np

from .optim import ParameterStore
from .tensor import Tensor, add, lstm_cell, matmul


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_linear(
    store: ParameterStore,
    name: str,
    n_in: int,
    n_out: int,
    rng: np.random.Generator,
    zero: bool = False,
) -> None:
    w = np.zeros((n_in, n_out)) if zero else glorot_uniform(rng, n_in, n_out)
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(n_out))


def linear(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    return add(matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


def init_lstm(
    store: ParameterStore, name: str, n_in: int, hidden: int, rng: np.random.Generator
) -> None:
    store.add(f"{name}.wx", glorot_uniform(rng, n_in, 4 * hidden))
    store.add(f"{name}.wh", glorot_uniform(rng, hidden, 4 * hidden))
    store.add(f"{name}.b", np.zeros(4 * hidden))


def lstm_run(store: ParameterStore, name: str, xs: list[Tensor], hidden: int) -> Tensor:
    """Run a single-layer LSTM over the step inputs; returns the final hidden state."""
    batch = xs[0].data.shape[0]
    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    wx, wh, b = store[f"{name}.wx"], store[f"{name}.wh"], store[f"{name}.b"]
    for x in xs:
        h, c = lstm_cell(x, h, c, wx, wh, b)
    return h
