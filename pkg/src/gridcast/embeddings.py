"""Calendar embeddings and the perception encoder.

The calendar component maps each absolute step index to the sum of an
intra-day slot embedding and a day-of-week embedding.  The perception
encoder compresses the channel axis, mixes node groups with a grouped
temporal convolution, folds in the calendar signal, and summarizes with
a recurrent pass before projecting to the backbone width.
"""
from __future__ import annotations

import numpy as np

from . import nn, tensor as T
from .tensor import Tensor


class CalendarEmbedding(nn.Module):
    """slot-of-day + day-of-week lookup, summed to [B, L, width]."""

    def __init__(self, intervals_per_day: int, week_period: int, width: int,
                 rng: np.random.Generator, dtype=np.float32,
                 steps_per_interval: int = 1):
        super().__init__()
        self.intervals_per_day = intervals_per_day
        self.week_period = week_period
        self.steps_per_interval = steps_per_interval
        self.day_table = nn.Embedding(intervals_per_day, width, rng, dtype)
        self.week_table = nn.Embedding(week_period, width, rng, dtype)

    def time_indices(self, starts: np.ndarray, length: int):
        """(slot-of-day, day-of-week) integer indices for each window step."""
        t = np.asarray(starts, dtype=np.int64)[:, None] + np.arange(length)
        interval = t // self.steps_per_interval
        day_idx = interval % self.intervals_per_day
        week_idx = (interval // self.intervals_per_day) % self.week_period
        return day_idx, week_idx

    def __call__(self, starts: np.ndarray, length: int) -> Tensor:
        day_idx, week_idx = self.time_indices(starts, length)
        return T.add(self.day_table(day_idx), self.week_table(week_idx))


class PerceptionEncoder(nn.Module):
    """[B, L, N, C] scaled input -> [B, L, width] backbone tokens.

    channel collapse (1x1 conv, GELU) -> grouped temporal conv over node
    blocks (GELU) -> add tanh(calendar) -> GRU -> linear projection.
    """

    def __init__(self, n_nodes: int, n_channels: int, groups: int,
                 gru_hidden: int, width: int, kernel: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.collapse = nn.ChannelCollapseConv(n_channels, rng, dtype)
        self.mixer = nn.GroupedTemporalConv(n_nodes, groups, kernel, rng, dtype)
        self.rnn = nn.GRU(groups, gru_hidden, rng, dtype)
        self.proj = nn.Linear(gru_hidden, width, rng, dtype)

    def __call__(self, x_scaled: Tensor, calendar: Tensor | None) -> Tensor:
        compressed = T.gelu(self.collapse(x_scaled))      # [B, L, N]
        features = T.gelu(self.mixer(compressed))         # [B, L, groups]
        if calendar is not None:
            features = T.add(features, T.tanh(calendar))
        hidden = self.rnn(features)                       # [B, L, gru_hidden]
        return self.proj(hidden)                          # [B, L, width]
