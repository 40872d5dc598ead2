"""Patch-based transformer over fixed-width multi-lead ECG windows.

The window is cut into contiguous 64-sample patches across all leads, each
patch is flattened lead-major and linearly projected to the embedding width,
a learnable class token is prepended, positional embeddings are added, and a
pre-norm encoder stack runs self-attention over the sequence. The class
token's final state feeds a two-layer head; hand-crafted per-record (wide)
features are concatenated between the two layers, and a sigmoid yields one
probability per diagnosis class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dsp import ProcessedWindow
from .errors import ConfigError, ShapeError


@dataclass
class ModelConfig:
    num_leads: int
    d_patch: int = 64
    d_model: int = 768
    num_layers: int = 12
    num_heads: int = 12
    d_ff: int = 768
    dropout_encoder: float = 0.1
    d_deep: int = 64
    d_wide: int = 22
    d_class: int = 26
    dropout_head: float = 0.2
    window_samples: int = 7680
    positional: str = "learned"  # or "sinusoidal"
    dropout_positional: bool = True
    mask_padding: bool = False
    gelu_exact: bool = False

    def __post_init__(self):
        dims = (self.num_leads, self.d_patch, self.d_model, self.num_layers, self.num_heads,
                self.d_ff, self.d_deep, self.d_wide, self.d_class, self.window_samples)
        if any(d < 1 for d in dims):
            raise ConfigError("all model dimensions must be >= 1")
        if self.d_model % self.num_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.window_samples % self.d_patch != 0:
            raise ConfigError(f"window_samples {self.window_samples} not divisible by d_patch {self.d_patch}")
        if self.positional not in ("learned", "sinusoidal"):
            raise ConfigError(f"positional must be learned|sinusoidal, got {self.positional!r}")

    @property
    def num_patches(self) -> int:
        return self.window_samples // self.d_patch

    @property
    def d_token(self) -> int:
        return self.num_leads * self.d_patch

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    def to_text(self) -> str:
        keys = ["num_leads", "d_patch", "d_model", "num_layers", "num_heads", "d_ff",
                "dropout_encoder", "d_deep", "d_wide", "d_class", "dropout_head",
                "window_samples", "positional", "dropout_positional", "mask_padding", "gelu_exact"]
        return "".join(f"{k}={getattr(self, k)}\n" for k in keys)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kwargs[key.strip()] = value.strip()
        casts = {"dropout_encoder": float, "dropout_head": float, "positional": str,
                 "dropout_positional": lambda v: v == "True", "mask_padding": lambda v: v == "True",
                 "gelu_exact": lambda v: v == "True"}
        for k in list(kwargs):
            kwargs[k] = casts.get(k, int)(kwargs[k])
        return cls(**kwargs)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos positional table (interleaved pairs)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    out = np.zeros((length, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles[:, : dim - dim // 2])
    return out


class ModelParams:
    """All learnable arrays, keyed by dotted names in a fixed order."""

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig):
        self.tensors = tensors
        self.config = config
        for name, shape in expected_shapes(config).items():
            if name not in tensors:
                raise ShapeError(f"missing parameter {name!r}")
            if tensors[name].shape != shape:
                raise ShapeError(f"parameter {name!r} has shape {tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def total_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}


def expected_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Name -> shape map; also fixes the canonical parameter order."""
    d, ff, deep = config.d_model, config.d_ff, config.d_deep
    shapes: dict[str, tuple] = {
        "patch_projection.weight": (config.d_token, d),
        "patch_projection.bias": (d,),
        "class_token": (d,),
        "positional_embedding": (config.num_patches + 1, d),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        for mat in ("w_q", "w_k", "w_v", "w_o"):
            shapes[p + f"attn.{mat}.weight"] = (d, d)
            shapes[p + f"attn.{mat}.bias"] = (d,)
        shapes[p + "ff.fc1.weight"] = (d, ff)
        shapes[p + "ff.fc1.bias"] = (ff,)
        shapes[p + "ff.fc2.weight"] = (ff, d)
        shapes[p + "ff.fc2.bias"] = (d,)
        shapes[p + "norm1.gain"] = (d,)
        shapes[p + "norm1.bias"] = (d,)
        shapes[p + "norm2.gain"] = (d,)
        shapes[p + "norm2.bias"] = (d,)
    shapes["final_norm.gain"] = (d,)
    shapes["final_norm.bias"] = (d,)
    shapes["head.fc1.weight"] = (d, deep)
    shapes["head.fc1.bias"] = (deep,)
    shapes["head.fc2.weight"] = (deep + config.d_wide, config.d_class)
    shapes["head.fc2.bias"] = (config.d_class,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    """Closed-form total parameter count for a configuration."""
    d, ff, deep = config.d_model, config.d_ff, config.d_deep
    per_layer = 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 4 * d
    return (
        config.d_token * d + d  # patch projection
        + d  # class token
        + (config.num_patches + 1) * d  # positional table
        + config.num_layers * per_layer
        + 2 * d  # final norm
        + d * deep + deep  # head fc1
        + (deep + config.d_wide) * config.d_class + config.d_class  # head fc2
    )


def _truncated_normal(rng: np.random.Generator, shape, sigma: float = 0.02) -> np.ndarray:
    """Normal(0, sigma) with redraws outside two sigma."""
    out = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(out) > 2.0 * sigma
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * sigma
    return out


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization: truncated normal for projections and
    embeddings, zeros for biases, ones for layer-norm gains."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".bias") or name == "final_norm.bias":
            data = np.zeros(shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        elif name == "positional_embedding" and config.positional == "sinusoidal":
            data = sinusoidal_positions(shape[0], shape[1])
        else:
            data = _truncated_normal(rng, shape)
        trainable = not (name == "positional_embedding" and config.positional == "sinusoidal")
        tensors[name] = Tensor(data, requires_grad=trainable)
    return ModelParams(tensors, config)


def patchify(window: ProcessedWindow, config: ModelConfig) -> np.ndarray:
    """[num_leads x window] -> [N x (num_leads * d_patch)], lead-major per token."""
    sig = window.signal
    if sig.shape != (config.num_leads, config.window_samples):
        raise ShapeError(
            f"window shape {sig.shape} does not match config ({config.num_leads}, {config.window_samples})"
        )
    n, p = config.num_patches, config.d_patch
    # [leads, N, p] -> [N, leads, p] -> [N, leads*p]
    tokens = sig.reshape(config.num_leads, n, p).transpose(1, 0, 2).reshape(n, config.num_leads * p)
    return np.ascontiguousarray(tokens)


@dataclass
class ModelOutput:
    probabilities: Tensor
    logits: Tensor
    attention_maps: list[np.ndarray] | None = None


def _linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ag.add(ag.matmul(x, params[prefix + ".weight"]), params[prefix + ".bias"])


def _attention_block(
    x: Tensor,
    params: ModelParams,
    layer: int,
    config: ModelConfig,
    training: bool,
    rng,
    key_mask: np.ndarray | None,
    capture: list | None,
) -> Tensor:
    p = f"layers.{layer}.attn."
    t = x.shape[0]
    q = _linear(x, params, p + "w_q")
    k = _linear(x, params, p + "w_k")
    v = _linear(x, params, p + "w_v")
    scale = 1.0 / math.sqrt(config.head_dim)

    head_outputs = []
    head_maps = [] if capture is not None else None
    for h in range(config.num_heads):
        cols = slice(h * config.head_dim, (h + 1) * config.head_dim)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        scores = ag.mul(ag.matmul(qh, ag.transpose(kh)), scale)
        if key_mask is not None:
            # Padded-token keys are pushed to -inf-like scores before softmax.
            bias = np.where(key_mask, 0.0, -1e30)[None, :]
            scores = ag.add(scores, Tensor(np.broadcast_to(bias, (t, t)).copy()))
        attn = ag.softmax(scores)
        if head_maps is not None:
            head_maps.append(attn.data.copy())
        attn = ag.dropout(attn, config.dropout_encoder, rng, training)
        head_outputs.append(ag.matmul(attn, vh))
    if head_maps is not None:
        capture.append(np.stack(head_maps))
    merged = ag.concat(head_outputs, axis=1)
    return _linear(merged, params, p + "w_o")


def forward(
    window: ProcessedWindow,
    wide: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | int | None = None,
    capture_attention: bool = False,
) -> ModelOutput:
    """One record through the network; mode is 'train' (dropout live) or 'eval'."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be train|eval, got {mode!r}")
    training = mode == "train"
    if training and rng is not None and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    wide = np.asarray(wide, dtype=np.float64)
    if wide.shape != (config.d_wide,):
        raise ShapeError(f"wide feature vector has shape {wide.shape}, expected ({config.d_wide},)")

    tokens = Tensor(patchify(window, config))
    projected = _linear(tokens, params, "patch_projection")
    cls = ag.reshape(params["class_token"], (1, config.d_model))
    seq = ag.concat([cls, projected], axis=0)
    positions = ag.embedding_row_select(params["positional_embedding"], np.arange(config.num_patches + 1))
    x = ag.add(seq, positions)
    if config.dropout_positional:
        x = ag.dropout(x, config.dropout_encoder, rng, training)

    key_mask = None
    if config.mask_padding:
        # Token t covers samples [t*d_patch, (t+1)*d_patch); it is a padding
        # token when it starts at or past pad_start. The class token (row 0)
        # is always attendable.
        starts = np.arange(config.num_patches) * config.d_patch
        key_mask = np.concatenate([[True], starts < window.pad_start])

    attention_maps: list[np.ndarray] | None = [] if capture_attention else None
    for layer in range(config.num_layers):
        pre = ag.layer_norm(x, params[f"layers.{layer}.norm1.gain"], params[f"layers.{layer}.norm1.bias"])
        attn_out = _attention_block(pre, params, layer, config, training, rng, key_mask, attention_maps)
        x = ag.add(x, ag.dropout(attn_out, config.dropout_encoder, rng, training))
        pre = ag.layer_norm(x, params[f"layers.{layer}.norm2.gain"], params[f"layers.{layer}.norm2.bias"])
        ff = _linear(ag.gelu(_linear(pre, params, f"layers.{layer}.ff.fc1"), config.gelu_exact), params, f"layers.{layer}.ff.fc2")
        x = ag.add(x, ag.dropout(ff, config.dropout_encoder, rng, training))

    x = ag.layer_norm(x, params["final_norm.gain"], params["final_norm.bias"])
    cls_state = ag.reshape(x[0, :], (1, config.d_model))
    deep = ag.gelu(_linear(cls_state, params, "head.fc1"), config.gelu_exact)
    deep = ag.dropout(deep, config.dropout_head, rng, training)
    combined = ag.concat([deep, Tensor(wide.reshape(1, config.d_wide))], axis=1)
    logits = ag.reshape(_linear(combined, params, "head.fc2"), (config.d_class,))
    probabilities = ag.sigmoid(logits)
    return ModelOutput(probabilities=probabilities, logits=logits, attention_maps=attention_maps)


def params_from_arrays(arrays: dict[str, np.ndarray], config: ModelConfig) -> ModelParams:
    """Rebuild ModelParams (e.g. from a checkpoint) with trainability flags."""
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name not in arrays:
            raise ShapeError(f"checkpoint is missing parameter {name!r}")
        trainable = not (name == "positional_embedding" and config.positional == "sinusoidal")
        tensors[name] = Tensor(np.asarray(arrays[name], dtype=np.float64).reshape(shape), requires_grad=trainable)
    return ModelParams(tensors, config)
