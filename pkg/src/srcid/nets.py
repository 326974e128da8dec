"""Tiny MLP / recurrent building blocks on top of the autodiff core."""

from __future__ import annotations

import numpy as np

from . import numgrad
from .numgrad import ParamStore, Tensor

HIDDEN_DEFAULT = 64


def init_mlp(store: ParamStore, prefix: str, in_dim: int, out_dim: int,
             hidden: int, rng, out_scale: float = 1.0) -> None:
    """Two-layer tanh MLP parameters, Xavier-ish init.

    out_scale < 1 shrinks the output layer so the function starts near zero.
    """
    s1 = 1.0 / np.sqrt(in_dim)
    s2 = out_scale / np.sqrt(hidden)
    store.add(f"{prefix}.W1", rng.normal(0.0, s1, size=(in_dim, hidden)))
    store.add(f"{prefix}.b1", np.zeros(hidden))
    store.add(f"{prefix}.W2", rng.normal(0.0, s2, size=(hidden, out_dim)))
    store.add(f"{prefix}.b2", np.zeros(out_dim))


def mlp_apply(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    h = numgrad.tanh(x @ store[f"{prefix}.W1"] + store[f"{prefix}.b1"])
    return h @ store[f"{prefix}.W2"] + store[f"{prefix}.b2"]


def init_rnn(store: ParamStore, prefix: str, in_dim: int, state_dim: int, rng) -> None:
    """Single-layer unidirectional tanh recurrence."""
    s = 1.0 / np.sqrt(in_dim + state_dim)
    store.add(f"{prefix}.Wx", rng.normal(0.0, s, size=(in_dim, state_dim)))
    store.add(f"{prefix}.Wc", rng.normal(0.0, s, size=(state_dim, state_dim)))
    store.add(f"{prefix}.b", np.zeros(state_dim))


def rnn_scan(store: ParamStore, prefix: str, z_seq: Tensor) -> Tensor:
    """Causal pass over a (T, D) sequence; returns (T, state_dim) contexts."""
    Wx, Wc, b = store[f"{prefix}.Wx"], store[f"{prefix}.Wc"], store[f"{prefix}.b"]
    T = z_seq.shape[0]
    c = numgrad.constant(np.zeros((1, Wc.shape[0])))
    outs = []
    for t in range(T):
        zt = z_seq[t:t + 1, :]
        c = numgrad.tanh(zt @ Wx + c @ Wc + b)
        outs.append(c)
    return numgrad.concat(outs, axis=0)
