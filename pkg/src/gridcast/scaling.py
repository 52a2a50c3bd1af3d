"""Randomized input scaling with learned bounds.

Every forward pass multiplies the (masked) input by a scale factor drawn
uniformly from a learned per-sample interval [low, high]; the model output
is divided by the same factor.  The interval is predicted from a summary
of the input, anchored at a learned center with a learned spread, so the
network trains across a continuum of input magnitudes and learns to be
equivariant to them instead of memorizing one scale.
"""
from __future__ import annotations

import numpy as np

from . import nn, tensor as T
from .tensor import Parameter, Tensor


class InputScaler(nn.Module):
    """Predicts scale bounds, samples a scale, applies and inverts it."""

    def __init__(self, n_features: int, hidden: int, rng: np.random.Generator,
                 dtype=np.float32, center_init: float = 1.0,
                 spread_init: float = 0.1, floor: float = 1e-6):
        super().__init__()
        self.center = Parameter(np.array([center_init], dtype=dtype))
        self.spread = Parameter(np.array([spread_init], dtype=dtype))
        self.hidden = nn.Linear(n_features, hidden, rng, dtype)
        self.offsets = nn.Linear(hidden, 2, rng, dtype)
        self.floor = floor

    def summarize(self, x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
        """Feature vector at the last step with any observation, per sample.

        x: [B, L, N, C] raw (already masked) input; mask: same shape,
        1 = observed, or None when nothing is hidden (prediction task).
        """
        batch, length = x.shape[0], x.shape[1]
        out = np.empty((batch, x.shape[2] * x.shape[3]), dtype=x.dtype)
        if mask is None:
            idx = np.full(batch, length - 1)
        else:
            any_obs = mask.reshape(batch, length, -1).sum(axis=2) > 0
            idx = np.where(any_obs.any(axis=1),
                           length - 1 - any_obs[:, ::-1].argmax(axis=1),
                           length - 1)
        for b in range(batch):
            out[b] = x[b, idx[b]].reshape(-1)
        return out

    def bounds(self, summary: np.ndarray):
        """Learned interval around the center; reordered so low <= high."""
        h = T.tanh(self.hidden(Tensor(summary)))
        offsets = self.offsets(h)  # [B, 2]
        a = T.add(self.center, T.mul(offsets[:, 0:1], self.spread))
        b = T.add(self.center, T.mul(offsets[:, 1:2], self.spread))
        return T.minimum(a, b), T.maximum(a, b)

    def sample(self, low: Tensor, high: Tensor, u: np.ndarray) -> Tensor:
        """Reparameterized draw s = low + u * (high - low), u in [0, 1].

        Magnitudes below the floor are pushed out to +-floor so the
        inverse scaling stays finite.
        """
        s = T.add(low, T.mul(u, T.sub(high, low)))
        return T.clamp_away_from_zero(s, self.floor)

    @staticmethod
    def apply(x: Tensor, s: Tensor) -> Tensor:
        """Scale an [B, L, N, C] input by per-sample s [B, 1]."""
        return T.mul(x, T.reshape(s, (-1, 1, 1, 1)))

    @staticmethod
    def invert(y: Tensor, s: Tensor) -> Tensor:
        """Undo the scaling on an output of any [B, ...] shape."""
        return T.div(y, T.reshape(s, (s.shape[0],) + (1,) * (y.ndim - 1)))

    def draw(self, x: np.ndarray, mask: np.ndarray | None, u: np.ndarray | None):
        """Full path: summary -> bounds -> sampled scale.  u=None means the
        deterministic midpoint (evaluation mode)."""
        low, high = self.bounds(self.summarize(x, mask))
        if u is None:
            u = np.full((x.shape[0], 1), 0.5, dtype=x.dtype)
        return self.sample(low, high, np.asarray(u, dtype=x.dtype))
