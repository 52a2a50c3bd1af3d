"""Neural-network layers built on the autodiff tape.

Modules own Parameters and child modules; `collect_parameters` walks a
module tree and returns the flat name -> Parameter table, enforcing
name uniqueness.  All layers take an explicit numpy Generator for
weight initialization so model construction is fully seeded.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Base class; attribute assignment auto-registers Parameters and Modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def freeze(self):
        for p in self.parameters():
            p.freeze()
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, allow_missing=()):
        """Name-matched load.  Unknown names in `state` are rejected; names
        missing from `state` are allowed only if listed in `allow_missing`
        (by substring), everything else must be present."""
        own = dict(self.named_parameters())
        unknown = sorted(set(state) - set(own))
        if unknown:
            raise KeyError(f"unknown tensors in state: {unknown}")
        missing = sorted(set(own) - set(state))
        hard_missing = [n for n in missing if not any(tag in n for tag in allow_missing)]
        if hard_missing:
            raise KeyError(f"missing tensors in state: {hard_missing}")
        for name, arr in state.items():
            p = own[name]
            if p.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}")
            p.data = np.asarray(arr, dtype=p.data.dtype).copy()


def collect_parameters(module: Module) -> dict:
    """Flat name -> Parameter map.  Raises if a name or a Parameter object
    appears more than once, and stamps each Parameter with its path name."""
    table = {}
    seen_ids = {}
    for name, p in module.named_parameters():
        if name in table:
            raise ValueError(f"duplicate parameter name: {name}")
        if id(p) in seen_ids:
            raise ValueError(f"parameter shared under two names: {seen_ids[id(p)]} and {name}")
        table[name] = p
        seen_ids[id(p)] = name
        p.name = name
    return table


def count_parameters(module: Module, trainable_only: bool = False) -> int:
    total = 0
    for p in module.parameters():
        if trainable_only and not p.trainable:
            continue
        total += p.data.size
    return total


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng, dtype=np.float32,
                 std: float = 0.02, bias: bool = True):
        super().__init__()
        self.weight = Parameter(_normal(rng, (in_features, out_features), std, dtype))
        if bias:
            self.bias = Parameter(np.zeros(out_features, dtype=dtype))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, width: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.scale = Parameter(np.ones(width, dtype=dtype))
        self.shift = Parameter(np.zeros(width, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        m = T.mean(x, axis=-1, keepdims=True)
        centered = T.sub(x, m)
        var = T.mean(T.square(centered), axis=-1, keepdims=True)
        norm = T.div(centered, T.sqrt(T.add(var, self.eps)))
        return T.add(T.mul(norm, self.scale), self.shift)


class Embedding(Module):
    """Lookup table [rows, width], rows indexed by integer arrays."""

    def __init__(self, rows: int, width: int, rng, dtype=np.float32, std: float = 0.02):
        super().__init__()
        self.table = Parameter(_normal(rng, (rows, width), std, dtype))

    def __call__(self, indices) -> Tensor:
        return T.embedding(self.table, indices)


class ChannelCollapseConv(Module):
    """1x1 convolution over the channel axis: [B, L, N, C] -> [B, L, N]."""

    def __init__(self, channels: int, rng, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(_normal(rng, (channels, 1), 0.02, dtype))
        self.bias = Parameter(np.zeros(1, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        out = T.add(T.matmul(x, self.weight), self.bias)
        b, l, n, _ = out.shape
        return T.reshape(out, (b, l, n))


class TemporalConv(Module):
    """1-D convolution over the time axis with zero 'same' padding.

    Input [B, L, C_in] -> [B, L, C_out].
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng,
                 dtype=np.float32, std: float = 0.02):
        super().__init__()
        self.kernel = kernel
        self.weight = Parameter(_normal(rng, (kernel, in_channels, out_channels), std, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        _, length, _ = x.shape
        left = (self.kernel - 1) // 2
        padded = T.pad_axis(x, 1, left, self.kernel - 1 - left)
        out = None
        for tap in range(self.kernel):
            term = T.matmul(padded[:, tap:tap + length, :], self.weight[tap])
            out = term if out is None else T.add(out, term)
        return T.add(out, self.bias)


class GroupedTemporalConv(Module):
    """Grouped 1-D convolution over time: [B, L, N] -> [B, L, groups].

    The N input channels are split into `groups` contiguous equal blocks;
    output channel g reads only block g.  Zero 'same' padding in time.
    """

    def __init__(self, in_channels: int, groups: int, kernel: int, rng,
                 dtype=np.float32):
        super().__init__()
        if in_channels % groups != 0:
            raise ValueError(f"in_channels {in_channels} not divisible by groups {groups}")
        self.groups = groups
        self.block = in_channels // groups
        self.kernel = kernel
        self.weight = Parameter(_normal(rng, (groups, kernel, self.block), 0.02, dtype))
        self.bias = Parameter(np.zeros(groups, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        b, length, n = x.shape
        left = (self.kernel - 1) // 2
        padded = T.pad_axis(x, 1, left, self.kernel - 1 - left)
        out = None
        for tap in range(self.kernel):
            window = T.reshape(padded[:, tap:tap + length, :], (b, length, self.groups, self.block))
            term = T.sum_(T.mul(window, self.weight[:, tap, :]), axis=-1)
            out = term if out is None else T.add(out, term)
        return T.add(out, self.bias)


class GRUCell(Module):
    """Single gated recurrent step.

    Gates: z, r = sigmoid(x W_zr + h U_zr + b_zr)
    Candidate: n = tanh(x W_n + (r * h) U_n + b_n)
    Update: h' = z * h + (1 - z) * n
    With linear_mode=True the gates are pinned at 1/2 (their zero-input
    value) and the candidate nonlinearity is dropped, which makes the
    recurrence affine in the inputs (a diagnostic seam for tests).
    """

    def __init__(self, input_size: int, hidden_size: int, rng, dtype=np.float32):
        super().__init__()
        self.hidden_size = hidden_size
        bound = 1.0 / np.sqrt(hidden_size)
        self.w_in = Parameter(_uniform(rng, (input_size, 3 * hidden_size), bound, dtype))
        self.b_in = Parameter(np.zeros(3 * hidden_size, dtype=dtype))
        self.u_gates = Parameter(_uniform(rng, (hidden_size, 2 * hidden_size), bound, dtype))
        self.u_cand = Parameter(_uniform(rng, (hidden_size, hidden_size), bound, dtype))

    def step(self, x_proj: Tensor, h: Tensor, linear_mode: bool = False) -> Tensor:
        """Advance one step from the precomputed input projection x W_in + b_in."""
        hs = self.hidden_size
        if linear_mode:
            cand = T.add(x_proj[:, 2 * hs:], T.matmul(T.mul(h, 0.5), self.u_cand))
            return T.add(T.mul(h, 0.5), T.mul(cand, 0.5))
        gates = T.sigmoid(T.add(x_proj[:, :2 * hs], T.matmul(h, self.u_gates)))
        z = gates[:, :hs]
        r = gates[:, hs:]
        cand_pre = T.add(x_proj[:, 2 * hs:], T.matmul(T.mul(r, h), self.u_cand))
        return T.add(T.mul(z, h), T.mul(T.sub(1.0, z), T.tanh(cand_pre)))

    def project_inputs(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w_in), self.b_in)


class GRU(Module):
    """Unidirectional GRU over [B, T, input] -> [B, T, hidden], zero initial state."""

    def __init__(self, input_size: int, hidden_size: int, rng, dtype=np.float32):
        super().__init__()
        self.cell = GRUCell(input_size, hidden_size, rng, dtype)
        self.hidden_size = hidden_size
        self.dtype = dtype

    def __call__(self, x: Tensor, linear_mode: bool = False) -> Tensor:
        batch, steps, _ = x.shape
        proj = self.cell.project_inputs(x)
        h = Tensor(np.zeros((batch, self.hidden_size), dtype=x.dtype))
        outputs = []
        for t in range(steps):
            h = self.cell.step(proj[:, t], h, linear_mode)
            outputs.append(h)
        return T.stack(outputs, axis=1)
