"""Output reconstruction and guidance blending.

A per-task head maps backbone tokens back to node space: a temporal
convolution produces per-step node/channel values, a linear time
resampling shrinks the context length to the output length (identity
when they match), and a learned blend gate mixes in the guidance
estimate.  The blend weight starts at one half and stays in (0, 1).
"""
from __future__ import annotations

import numpy as np

from . import nn, tensor as T
from .tensor import Parameter, Tensor


def _resample_init(in_len: int, out_len: int) -> np.ndarray:
    """Hat-function interpolation matrix [in_len, out_len], columns sum 1."""
    weights = np.zeros((in_len, out_len))
    span = in_len / out_len
    for s in range(out_len):
        center = (s + 0.5) * span - 0.5
        for l in range(in_len):
            w = max(0.0, 1.0 - abs(l - center) / span)
            weights[l, s] = w
    return weights / weights.sum(axis=0, keepdims=True)


class OutputHead(nn.Module):
    """[B, L, width] tokens + [B, out_len, N, C] guidance -> blended output."""

    def __init__(self, width: int, n_nodes: int, n_channels: int,
                 context_len: int, out_len: int, kernel: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.n_nodes = n_nodes
        self.n_channels = n_channels
        self.out_len = out_len
        self.reconstruct = nn.TemporalConv(width, n_nodes * n_channels, kernel,
                                           rng, dtype)
        if out_len != context_len:
            self.resample = Parameter(
                _resample_init(context_len, out_len).astype(dtype))
        else:
            self.resample = None
        # raw 0 -> sigmoid 1/2: equal parts backbone and guidance at start
        self.blend_raw = Parameter(np.zeros(1, dtype=dtype))

    def blend_weight(self) -> Tensor:
        return T.sigmoid(self.blend_raw)

    def __call__(self, tokens: Tensor, guide: Tensor,
                 blend_off: bool = False) -> Tensor:
        b = tokens.shape[0]
        values = self.reconstruct(tokens)                 # [B, L, N*C]
        if self.resample is not None:
            values = T.swapaxes(T.matmul(T.swapaxes(values, 1, 2), self.resample), 1, 2)
        body = T.reshape(values, (b, self.out_len, self.n_nodes, self.n_channels))
        if blend_off:
            return body
        lam = self.blend_weight()
        return T.add(T.mul(body, T.sub(1.0, lam)), T.mul(guide, lam))
