"""Functional graph and the attention-bias generator.

The graph is a cosine-similarity matrix over training-range activity
profiles, symmetrically degree-normalized.  The bias generator turns
the node-mean differential of the (scaled) input into two gates: a
profile gate that modulates a trainable step-node projection, and a
per-step strength gate.  The projected graph then yields a step-by-step
additive bias for the backbone's attention logits.
"""
from __future__ import annotations

import logging

import numpy as np

from . import nn, tensor as T
from .tensor import Parameter, Tensor

log = logging.getLogger("gridcast.graph_bias")


def build_adjacency(train_values: np.ndarray) -> np.ndarray:
    """Symmetrically normalized cosine-similarity graph over node profiles.

    train_values: [T_train, N, C] normalized training-range series.  A node
    with an all-zero profile gets a one-hot self-loop row/column (logged).
    After D^-1/2 A D^-1/2 normalization the diagonal is raised to each
    row's maximum so every node stays its own strongest neighbor.
    """
    t_len, n_nodes, n_ch = train_values.shape
    profiles = train_values.transpose(1, 0, 2).reshape(n_nodes, t_len * n_ch)
    norms = np.linalg.norm(profiles, axis=1)
    zero = norms == 0.0
    if zero.any():
        log.warning("%d nodes have all-zero training profiles; one-hot rows used",
                    int(zero.sum()))
    safe = np.where(zero, 1.0, norms)
    unit = profiles / safe[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    sim[np.arange(n_nodes), np.arange(n_nodes)] = 1.0

    degree = sim.sum(axis=1)
    tiny = degree < 1e-6
    if tiny.any():
        log.warning("%d nodes have near-zero degree; clamping", int(tiny.sum()))
        degree = np.where(tiny, 1e-6, degree)
    inv_sqrt = 1.0 / np.sqrt(degree)
    normalized = sim * inv_sqrt[:, None] * inv_sqrt[None, :]
    # keep self-similarity dominant after normalization
    row_max = normalized.max(axis=1)
    np.fill_diagonal(normalized, np.maximum(np.diag(normalized), row_max))
    return normalized.astype(np.float32)


class GraphBiasGenerator(nn.Module):
    """Scaled input -> per-sample [L, L] additive attention bias."""

    def __init__(self, n_nodes: int, context_len: int, n_channels: int,
                 hidden: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float32, intensity_init: float = 0.1):
        super().__init__()
        self.n_nodes = n_nodes
        self.context_len = context_len
        # step-node projection of the graph; variance 1/sqrt(N)
        std = float(n_nodes) ** -0.25
        self.projection = Parameter(
            (rng.standard_normal((context_len, n_nodes)) * std).astype(dtype))
        self.adjacency = Parameter(np.eye(n_nodes, dtype=dtype), trainable=False)
        self.intensity = Parameter(np.array([intensity_init], dtype=dtype))
        # fan-in scaled init: the gates compose multiplicatively, so the
        # residual-stream default of 0.02 would collapse the bias to ~1e-17
        self.conv_in = nn.TemporalConv(n_channels, hidden, kernel, rng, dtype,
                                       std=(kernel * n_channels) ** -0.5)
        self.conv_out = nn.TemporalConv(hidden, hidden, kernel, rng, dtype,
                                        std=(kernel * hidden) ** -0.5)
        self.profile_gate = nn.Linear(hidden, n_nodes, rng, dtype,
                                      std=hidden ** -0.5)
        self.strength_gate = nn.Linear(hidden, 1, rng, dtype,
                                       std=hidden ** -0.5)

    def set_adjacency(self, matrix: np.ndarray):
        if matrix.shape != (self.n_nodes, self.n_nodes):
            raise ValueError(f"adjacency shape {matrix.shape} does not match "
                             f"{self.n_nodes} nodes")
        self.adjacency.data = matrix.astype(self.adjacency.data.dtype).copy()

    def differential_signal(self, x_scaled: Tensor) -> Tensor:
        """Node-mean step difference, z-normalized over time per channel."""
        node_mean = T.mean(x_scaled, axis=2)                     # [B, L, C]
        batch, _, n_ch = node_mean.shape
        zero = Tensor(np.zeros((batch, 1, n_ch), dtype=x_scaled.dtype))
        diffs = T.concat(
            [zero, T.sub(node_mean[:, 1:, :], node_mean[:, :-1, :])], axis=1)
        center = T.sub(diffs, T.mean(diffs, axis=1, keepdims=True))
        std = T.sqrt(T.mean(T.square(center), axis=1, keepdims=True))
        return T.div(center, T.maximum(std, 1e-6))

    def gates(self, signal: Tensor):
        """(profile gate [L, N] batch-averaged, strength gate [B, L] in (-1, 1))."""
        hidden = self.conv_out(T.gelu(self.conv_in(signal)))
        profile = T.mean(self.profile_gate(hidden), axis=0)      # [L, N]
        strength = T.tanh(self.strength_gate(hidden))            # [B, L, 1]
        return profile, T.reshape(strength, strength.shape[:2])

    def static_bias(self, profile_gate: Tensor, use_graph: bool = True) -> Tensor:
        """Projected graph [L, L]: tanh(P * gate) A tanh(P * gate)^T."""
        projected = T.tanh(T.mul(self.projection, profile_gate))
        if use_graph:
            coupled = T.matmul(projected, self.adjacency)
        else:
            coupled = projected
        return T.matmul(coupled, T.transpose(projected, (1, 0)))

    def combine(self, static: Tensor, strength: Tensor) -> Tensor:
        """intensity * outer(strength) ⊙ static -> per-sample [B, L, L]."""
        outer = T.mul(T.reshape(strength, strength.shape + (1,)),
                      T.reshape(strength, (strength.shape[0], 1, -1)))
        return T.mul(T.mul(outer, static), self.intensity)

    def __call__(self, x_scaled: Tensor, use_graph: bool = True) -> Tensor:
        """Per-sample additive bias [B, L, L] for the attention logits."""
        signal = self.differential_signal(x_scaled)
        profile, strength = self.gates(signal)
        return self.combine(self.static_bias(profile, use_graph), strength)
