"""Lightweight recurrent guidance paths.

Both tasks get a cheap node-independent estimate that is later blended
with the backbone output.  Prediction runs a GRU over the context and
reads the last `horizon` step estimates.  Imputation runs two
autoregressive refinement passes (forward, then backward over the
forward-refined sequence); at every step the estimate from the hidden
state replaces only the hidden entries, so observed values always pass
through untouched.
"""
from __future__ import annotations

import numpy as np

from . import nn, tensor as T
from .tensor import Tensor


def _nodes_to_batch(x: Tensor) -> Tensor:
    """[B, L, N, C] -> [B*N, L, C] so nodes share the recurrent weights."""
    b, l, n, c = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b * n, l, c))


def _batch_to_nodes(x: Tensor, batch: int, n_nodes: int) -> Tensor:
    """[B*N, L, C] -> [B, L, N, C]."""
    _, l, c = x.shape
    return T.transpose(T.reshape(x, (batch, n_nodes, l, c)), (0, 2, 1, 3))


class PredictionGuide(nn.Module):
    """GRU forecast: per-step estimates from the last `horizon` hidden states."""

    def __init__(self, n_channels: int, hidden: int, horizon: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.rnn = nn.GRU(n_channels, hidden, rng, dtype)
        self.head = nn.Linear(hidden, n_channels, rng, dtype)
        self.horizon = horizon

    def __call__(self, x_scaled: Tensor) -> Tensor:
        b, l, n, _ = x_scaled.shape
        seq = _nodes_to_batch(x_scaled)
        states = self.rnn(seq)                      # [B*N, L, hidden]
        estimates = self.head(states[:, l - self.horizon:, :])
        return _batch_to_nodes(estimates, b, n)     # [B, horizon, N, C]


class ImputationGuide(nn.Module):
    """Two-pass autoregressive refinement of a masked sequence.

    Forward pass: at each step the estimate head reads the running hidden
    state, the estimate fills hidden positions only, and the refined value
    feeds the cell.  Backward pass: runs right-to-left over the
    forward-refined sequence with its own cell and head; its estimates
    (again gated by the mask) are the final output.
    """

    def __init__(self, n_channels: int, hidden: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.fwd_cell = nn.GRUCell(n_channels, hidden, rng, dtype)
        self.fwd_head = nn.Linear(hidden, n_channels, rng, dtype)
        self.bwd_cell = nn.GRUCell(n_channels, hidden, rng, dtype)
        self.bwd_head = nn.Linear(hidden, n_channels, rng, dtype)
        self.hidden = hidden

    def __call__(self, x_scaled: Tensor, mask: np.ndarray) -> Tensor:
        b, l, n, c = x_scaled.shape
        seq = _nodes_to_batch(x_scaled)                       # [B*N, L, C]
        m = np.transpose(mask, (0, 2, 1, 3)).reshape(b * n, l, c)

        dtype = x_scaled.dtype
        h = Tensor(np.zeros((b * n, self.hidden), dtype=dtype))
        refined_fwd = []
        for t in range(l):
            est = self.fwd_head(h)
            step = T.add(T.mul(seq[:, t], m[:, t]), T.mul(est, 1.0 - m[:, t]))
            refined_fwd.append(step)
            h = self.fwd_cell.step(self.fwd_cell.project_inputs(step), h)

        h = Tensor(np.zeros((b * n, self.hidden), dtype=dtype))
        out = [None] * l
        for t in range(l - 1, -1, -1):
            est = self.bwd_head(h)
            out[t] = T.add(T.mul(seq[:, t], m[:, t]), T.mul(est, 1.0 - m[:, t]))
            h = self.bwd_cell.step(self.bwd_cell.project_inputs(refined_fwd[t]), h)

        return _batch_to_nodes(T.stack(out, axis=1), b, n)    # [B, L, N, C]
