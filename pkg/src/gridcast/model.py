"""The composed forecasting/imputation model.

Forward path, for a [B, L, N, C] window of normalized node series:

  1. hide masked entries (imputation) and draw a per-sample input scale
     from the learned interval; multiply the input by it
  2. encode with the perception pathway plus calendar embeddings and a
     learned positional table
  3. synthesize the graph-conditioned attention bias from the scaled input
  4. run the frozen, low-rank-adapted transformer trunk (causal for
     forecasting, bidirectional for imputation)
  5. reconstruct node values per task, blend with the recurrent guidance
     estimate, and divide by the input scale

Component knock-outs used by the ablation harness are forward-time
switches: "ste" drops the calendar term, "gs" drops the guidance blend,
"ge" replaces the learned graph with the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import get_type_hints

import numpy as np

from . import nn, tensor as T
from .backbone import AdaptedBackbone, matrix_trainable_count
from .embeddings import CalendarEmbedding, PerceptionEncoder
from .fusion import OutputHead
from .graph_bias import GraphBiasGenerator, build_adjacency
from .guidance import ImputationGuide, PredictionGuide
from .scaling import InputScaler
from .tensor import Parameter, Tensor

TASKS = ("predict", "impute")
ABLATIONS = ("ste", "gs", "ge")


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int
    n_channels: int
    context_len: int
    horizon: int
    width: int = 64
    gru_hidden: int = 64
    embed_width: int = 8          # calendar width == grouped-conv group count
    guide_hidden: int = 32
    n_layers: int = 6
    n_heads: int = 4
    adapted_blocks: int = 3       # top blocks with adapters; the rest are shared
    lora_rank: int = 4
    lora_scale: float = 1.0
    adapt_value_output: bool = False
    intervals_per_day: int = 144
    week_period: int = 7
    steps_per_interval: int = 1
    scale_hidden: int = 16
    scale_center: float = 1.0
    scale_spread: float = 0.1
    scale_floor: float = 1e-6
    gate_hidden: int = 16
    kernel: int = 3
    bias_intensity: float = 0.1
    use_positional: bool = True
    dropout: float = 0.0

    def validate(self):
        if self.n_nodes % self.embed_width != 0:
            raise ValueError(f"n_nodes {self.n_nodes} not divisible by "
                             f"embed_width {self.embed_width} node groups")
        if self.width % self.n_heads != 0:
            raise ValueError("width must be divisible by n_heads")
        if self.adapted_blocks > self.n_layers:
            raise ValueError("adapted_blocks exceeds n_layers")
        if not 0 < self.horizon <= self.context_len:
            raise ValueError("horizon must be in [1, context_len]")
        return self

    def to_vector(self) -> np.ndarray:
        """Every field as float64, in declaration order.  Ints and bools
        are exact in f64, so the encoding round-trips losslessly."""
        return np.array([float(getattr(self, f.name)) for f in fields(self)],
                        dtype=np.float64)

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "ModelConfig":
        flds = fields(cls)
        if len(vec) != len(flds):
            raise ValueError(f"architecture vector has {len(vec)} entries, "
                             f"expected {len(flds)}")
        hints = get_type_hints(cls)
        return cls(**{f.name: hints[f.name](value)
                      for f, value in zip(flds, vec)})


@dataclass
class ForwardResult:
    output: Tensor               # [B, out_len, N, C], back in input units
    scale: Tensor                # [B, 1]
    scale_low: Tensor
    scale_high: Tensor
    bias: Tensor                 # [B, L, L]
    guide: Tensor | None
    capture: dict | None = field(default=None)


class TrafficModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c = config

        self.scaler = InputScaler(c.n_nodes * c.n_channels, c.scale_hidden, rng,
                                  dtype, c.scale_center, c.scale_spread,
                                  c.scale_floor)
        self.calendar = CalendarEmbedding(c.intervals_per_day, c.week_period,
                                          c.embed_width, rng, dtype,
                                          c.steps_per_interval)
        self.perception = PerceptionEncoder(c.n_nodes, c.n_channels,
                                            c.embed_width, c.gru_hidden,
                                            c.width, c.kernel, rng, dtype)
        self.pred_guide = PredictionGuide(c.n_channels, c.guide_hidden,
                                          c.horizon, rng, dtype)
        self.imp_guide = ImputationGuide(c.n_channels, c.guide_hidden, rng, dtype)
        self.bias_gen = GraphBiasGenerator(c.n_nodes, c.context_len,
                                           c.n_channels, c.gate_hidden,
                                           c.kernel, rng, dtype,
                                           c.bias_intensity)
        self.backbone = AdaptedBackbone(c.width, c.n_layers, c.n_heads,
                                        c.adapted_blocks, rng, dtype,
                                        c.lora_rank, c.lora_scale,
                                        c.adapt_value_output)
        if c.use_positional:
            self.positions = Parameter(
                (rng.standard_normal((c.context_len, c.width)) * 0.02).astype(dtype))
        else:
            self.positions = None
        self.pred_head = OutputHead(c.width, c.n_nodes, c.n_channels,
                                    c.context_len, c.horizon, c.kernel, rng, dtype)
        self.imp_head = OutputHead(c.width, c.n_nodes, c.n_channels,
                                   c.context_len, c.context_len, c.kernel, rng, dtype)
        # fixes duplicate names early and stamps canonical parameter names
        self.param_table = nn.collect_parameters(self)

    def set_adjacency(self, matrix: np.ndarray):
        self.bias_gen.set_adjacency(matrix)

    def fit_adjacency(self, dataset):
        """Build the functional graph from the dataset's training range."""
        self.set_adjacency(build_adjacency(
            dataset.values[:dataset.train_end].astype(np.float64)))

    def forward(self, x: np.ndarray, starts: np.ndarray, task: str,
                mask: np.ndarray | None = None, train: bool = False,
                u: np.ndarray | None = None,
                rng: np.random.Generator | None = None,
                ablate: frozenset = frozenset(),
                capture: dict | None = None) -> ForwardResult:
        """x: [B, L, N, C] normalized values; starts: [B] absolute step index
        of each window; mask: observation mask for imputation (1 = visible).
        u: per-sample uniforms for the scale draw (None = midpoint)."""
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        unknown = set(ablate) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation switches {sorted(unknown)}")
        c = self.config
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != (c.context_len, c.n_nodes, c.n_channels):
            raise ValueError(f"input shape {x.shape} does not match config")
        if task == "impute":
            if mask is None:
                raise ValueError("imputation requires a mask")
            mask = np.asarray(mask, dtype=self.dtype)
            x_in = x * mask
        else:
            if mask is not None:
                raise ValueError("prediction takes no mask")
            x_in = x

        low, high = self.scaler.bounds(self.scaler.summarize(x_in, mask))
        if u is None:
            u = np.full((x.shape[0], 1), 0.5, dtype=self.dtype)
        scale = self.scaler.sample(low, high, np.asarray(u, dtype=self.dtype))
        x_scaled = self.scaler.apply(Tensor(x_in), scale)

        calendar = None if "ste" in ablate else self.calendar(starts, c.context_len)
        tokens = self.perception(x_scaled, calendar)
        if self.positions is not None:
            tokens = T.add(tokens, self.positions)
        if train and c.dropout > 0.0:
            if rng is None:
                raise ValueError("dropout requires an rng in training mode")
            tokens = T.dropout(tokens, c.dropout, rng)

        bias = self.bias_gen(x_scaled, use_graph="ge" not in ablate)
        hidden = self.backbone(tokens, bias, causal=(task == "predict"),
                               capture=capture)
        if capture is not None:
            capture["bias"] = bias.data.copy()

        blend_off = "gs" in ablate
        if task == "predict":
            guide = None if blend_off else self.pred_guide(x_scaled)
            blended = self.pred_head(hidden, guide, blend_off)
        else:
            guide = None if blend_off else self.imp_guide(x_scaled, mask)
            blended = self.imp_head(hidden, guide, blend_off)

        output = self.scaler.invert(blended, scale)
        return ForwardResult(output, scale, low, high, bias, guide, capture)

    # ---- accounting ----------------------------------------------------

    def parameter_counts(self) -> dict:
        total = nn.count_parameters(self)
        trainable = nn.count_parameters(self, trainable_only=True)
        return {
            "total": total,
            "trainable": trainable,
            "frozen": total - trainable,
            "backbone_matrix_trainable": matrix_trainable_count(self.backbone),
        }


def model_from_checkpoint(path, dtype=np.float32) -> TrafficModel:
    """Rebuild a model from a checkpoint alone: the architecture vector
    stored at save time picks the config, then every weight is restored
    (including the fitted adjacency), so no side files are needed."""
    from .checkpoint import CONFIG_KEY, load_checkpoint

    state = load_checkpoint(path)
    vec = state.pop(CONFIG_KEY, None)
    if vec is None:
        raise ValueError(f"{path}: checkpoint carries no architecture record")
    model = TrafficModel(ModelConfig.from_vector(vec), dtype=dtype)
    model.load_state_dict(state)
    return model
