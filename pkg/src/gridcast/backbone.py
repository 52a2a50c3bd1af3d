"""Frozen transformer backbone with low-rank adaptation.

Blocks are pre-norm: attention reads a normalized copy and adds back to
the residual stream, then the feed-forward does the same.  The base
weights are frozen everywhere (a stand-in for a pretrained language
model trunk).  Only the top `adapted_blocks` differ: their query/key
projections (optionally value/output too) carry trainable low-rank
correction factors, their attention-side layer norms are trainable, and
they receive the additive attention bias.  Lower blocks run shared and
untouched.
"""
from __future__ import annotations

import numpy as np

from . import nn, tensor as T
from .tensor import Parameter, Tensor

NEG_INF = -1e30  # causal mask additive constant; finite so f32 stays NaN-free


class LowRankLinear(nn.Module):
    """Frozen base projection plus trainable low-rank delta.

    out = x W0 + scale * (x F_in) F_out, with F_in [d, r] zero-initialized
    and F_out [r, d] drawn N(0, 1/r).  A fresh adapter is therefore an
    exact no-op on the forward values.
    """

    def __init__(self, width: int, rank: int, rng: np.random.Generator,
                 dtype=np.float32, scale: float = 1.0):
        super().__init__()
        self.base = nn.Linear(width, width, rng, dtype)
        self.rank = rank
        self.scale = scale
        if rank > 0:
            self.factor_in = Parameter(np.zeros((width, rank), dtype=dtype))
            self.factor_out = Parameter(
                (rng.standard_normal((rank, width)) / np.sqrt(rank)).astype(dtype))

    def __call__(self, x: Tensor) -> Tensor:
        out = self.base(x)
        if self.rank > 0:
            delta = T.matmul(T.matmul(x, self.factor_in), self.factor_out)
            out = T.add(out, T.mul(delta, self.scale))
        return out


class SelfAttention(nn.Module):
    def __init__(self, width: int, n_heads: int, rng: np.random.Generator,
                 dtype=np.float32, lora_rank: int = 0, lora_scale: float = 1.0,
                 adapt_value_output: bool = False):
        super().__init__()
        if width % n_heads != 0:
            raise ValueError(f"width {width} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        qk_rank = lora_rank
        vo_rank = lora_rank if adapt_value_output else 0
        self.query = LowRankLinear(width, qk_rank, rng, dtype, lora_scale)
        self.key = LowRankLinear(width, qk_rank, rng, dtype, lora_scale)
        self.value = LowRankLinear(width, vo_rank, rng, dtype, lora_scale)
        self.out = LowRankLinear(width, vo_rank, rng, dtype, lora_scale)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, l, _ = x.shape
        return T.transpose(T.reshape(x, (b, l, self.n_heads, self.head_dim)),
                           (0, 2, 1, 3))

    def __call__(self, x: Tensor, bias: Tensor | None, causal: bool,
                 capture: list | None = None) -> Tensor:
        b, l, width = x.shape
        q = self._split_heads(self.query(x))
        k = self._split_heads(self.key(x))
        v = self._split_heads(self.value(x))
        scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)),
                       1.0 / np.sqrt(self.head_dim))        # [B, h, L, L]
        if bias is not None:
            scores = T.add(scores, T.reshape(bias, (b, 1, l, l)))
        if causal:
            blocked = np.triu(np.full((l, l), NEG_INF, dtype=x.dtype), k=1)
            scores = T.add(scores, blocked)
        attn = T.softmax_lastaxis(scores)
        if capture is not None:
            capture.append(attn.data.copy())
        mixed = T.matmul(attn, v)                            # [B, h, L, hd]
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, l, width))
        return self.out(merged)


class FeedForward(nn.Module):
    def __init__(self, width: int, rng: np.random.Generator, dtype=np.float32,
                 expansion: int = 4):
        super().__init__()
        self.up = nn.Linear(width, expansion * width, rng, dtype)
        self.down = nn.Linear(expansion * width, width, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + Attn(LN(x)), then z + FFN(LN(z))."""

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator,
                 dtype=np.float32, lora_rank: int = 0, lora_scale: float = 1.0,
                 adapt_value_output: bool = False):
        super().__init__()
        self.norm_attn = nn.LayerNorm(width, dtype)
        self.attn = SelfAttention(width, n_heads, rng, dtype, lora_rank,
                                  lora_scale, adapt_value_output)
        self.norm_ffn = nn.LayerNorm(width, dtype)
        self.ffn = FeedForward(width, rng, dtype)

    def __call__(self, x: Tensor, bias, causal, capture=None) -> Tensor:
        mid = T.add(x, self.attn(self.norm_attn(x), bias, causal, capture))
        return T.add(mid, self.ffn(self.norm_ffn(mid)))


class AdaptedBackbone(nn.Module):
    """Stack of frozen blocks; the top `adapted` ones carry trainable
    low-rank factors and attention layer norms and receive the bias."""

    def __init__(self, width: int, n_layers: int, n_heads: int, adapted: int,
                 rng: np.random.Generator, dtype=np.float32, lora_rank: int = 4,
                 lora_scale: float = 1.0, adapt_value_output: bool = False):
        super().__init__()
        if adapted > n_layers:
            raise ValueError(f"adapted blocks {adapted} exceed depth {n_layers}")
        self.n_layers = n_layers
        self.adapted = adapted
        self.blocks = nn.Module()
        for i in range(n_layers):
            is_adapted = i >= n_layers - adapted
            block = TransformerBlock(
                width, n_heads, rng, dtype,
                lora_rank=lora_rank if is_adapted else 0,
                lora_scale=lora_scale,
                adapt_value_output=adapt_value_output)
            setattr(self.blocks, f"b{i}", block)
        self._apply_freezing()

    def _apply_freezing(self):
        """Base weights frozen everywhere; adapters and adapted-block
        attention norms stay trainable."""
        for i in range(self.n_layers):
            block = getattr(self.blocks, f"b{i}")
            is_adapted = i >= self.n_layers - self.adapted
            for name, p in block.named_parameters():
                keep = is_adapted and ("factor_in" in name or "factor_out" in name
                                       or name.startswith("norm_attn."))
                if not keep:
                    p.freeze()

    def block(self, i: int) -> TransformerBlock:
        return getattr(self.blocks, f"b{i}")

    def __call__(self, x: Tensor, bias: Tensor | None, causal: bool,
                 capture: dict | None = None) -> Tensor:
        h = x
        for i in range(self.n_layers):
            is_adapted = i >= self.n_layers - self.adapted
            attn_capture = None
            if capture is not None:
                attn_capture = capture.setdefault("attention", [])
            h = self.block(i)(h, bias if is_adapted else None, causal, attn_capture)
            if capture is not None and i == 0:
                capture["first_block_hidden"] = h.data.copy()
        return h


def matrix_trainable_count(module: nn.Module) -> int:
    """Total elements of trainable parameters with rank >= 2 (the low-rank
    factors, in a frozen backbone)."""
    return sum(p.data.size for p in module.parameters()
               if p.trainable and p.data.ndim >= 2)
