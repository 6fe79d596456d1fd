"""Deformable Transformer Encoder Neck.

The three backbone levels are projected to a common width, normalised, flattened and
concatenated into ``m_f [C, N_in]``. A single deformable-attention encoder layer
enhances them. The finest enhanced level is then folded back into the original maps
through three stacked Feature-Add blocks, coarse to fine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .config import NUM_LEVELS, EncoderConfig, ModelConfig
from .errors import ShapeError
from .network import MultiScaleFeatures, Params, ParamStore, conv_block
from .rng import Rng
from .tensor import Tensor

POS_TEMPERATURE = 10000.0

Shapes = Sequence[tuple[int, int]]


@dataclass
class ReferencePoints:
    """Normalized (x, y) base coordinates ``[N_in, 2]`` for every flattened pixel."""

    points: Tensor
    shapes: list[tuple[int, int]]

    @property
    def level_starts(self) -> list[int]:
        return level_starts(self.shapes)


def level_starts(shapes: Shapes) -> list[int]:
    starts = [0]
    for h, w in shapes:
        starts.append(starts[-1] + h * w)
    return starts


def init_dten(store: ParamStore, config: ModelConfig) -> None:
    enc = config.encoder
    c = enc.hidden_dim
    samples = enc.heads * enc.levels * enc.points
    for level, c_in in enumerate(config.backbone.channels, start=1):
        store.conv(f"dten.input_proj.{level}", c, c_in, 1)
        store.norm(f"dten.input_norm.{level}", c)
    store.add("dten.level_embed", store.rng.normal_array((enc.levels, c)))
    store.linear("dten.attn.value", c, c)
    # zero offsets start sampling at the reference points; zero logits give uniform weights
    store.linear("dten.attn.offsets", c, samples * 2, zero=True)
    store.linear("dten.attn.weights", c, samples, zero=True)
    store.linear("dten.attn.output", c, c)
    store.norm("dten.encoder.norm1", c)
    store.linear("dten.encoder.ffn1", c, enc.ffn_dim)
    store.prelu("dten.encoder.ffn1.slope")
    store.linear("dten.encoder.ffn2", enc.ffn_dim, c)
    store.norm("dten.encoder.norm2", c)
    for level, c_in in enumerate(config.backbone.channels, start=1):
        store.conv(f"dten.fa.{level}", c, c_in, 3)
        store.prelu(f"dten.fa.{level}.slope")


# ---------- flattening ----------


def project_and_flatten(feats: MultiScaleFeatures, params: Params, cfg: EncoderConfig) -> Tensor:
    """1x1 conv to C channels, per-level layer norm over channels, row-major flatten, concat."""
    if len(feats.maps) != cfg.levels:
        raise ShapeError(f"expected {cfg.levels} levels, got {len(feats.maps)}")
    blocks = []
    for level, m in enumerate(feats.maps, start=1):
        proj = ops.conv2d(
            ops.reshape(m, (1, *m.shape)),
            params[f"dten.input_proj.{level}.weight"],
            bias=params[f"dten.input_proj.{level}.bias"],
        )
        c, h, w = proj.shape[1:]
        flat = ops.reshape(proj, (c, h * w))
        blocks.append(
            ops.layer_norm(
                flat, params[f"dten.input_norm.{level}.gamma"], params[f"dten.input_norm.{level}.beta"], axis=0
            )
        )
    return ops.concat(blocks, axis=1)


def split_levels(o: Tensor, shapes: Shapes) -> MultiScaleFeatures:
    """Inverse of the flatten/concat: ``[C, N_in]`` back to per-level ``[C, H_l, W_l]``."""
    starts = level_starts(shapes)
    if o.ndim != 2 or o.shape[1] != starts[-1]:
        raise ShapeError(f"cannot split {o.shape} into levels {list(shapes)} ({starts[-1]} columns)")
    c = o.shape[0]
    maps = [
        ops.reshape(ops.slice_axis(o, 1, starts[i], starts[i + 1]), (c, h, w)) for i, (h, w) in enumerate(shapes)
    ]
    return MultiScaleFeatures(maps)


def generate_reference_points(shapes: Shapes) -> ReferencePoints:
    """Pixel centers ((x + 0.5) / W_l, (y + 0.5) / H_l), ordered like the flattened features."""
    rows = []
    for h, w in shapes:
        if h < 1 or w < 1:
            raise ShapeError(f"level extents must be positive, got {h}x{w}")
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        rows.append(np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1))
    return ReferencePoints(Tensor(np.concatenate(rows, axis=0)), [tuple(s) for s in shapes])


# ---------- embeddings ----------


def sinusoidal_encoding(shapes: Shapes, channels: int) -> np.ndarray:
    """2-D sine/cosine positional encoding ``[C, N_in]``: first half encodes y, second half x."""
    if channels % 4:
        raise ShapeError(f"positional encoding needs channels divisible by 4, got {channels}")
    half = channels // 2
    dim_t = POS_TEMPERATURE ** (2 * (np.arange(half) // 2) / half)
    points = generate_reference_points(shapes).points.data * 2.0 * math.pi

    def encode(coord: np.ndarray) -> np.ndarray:
        angles = coord[:, None] / dim_t[None, :]
        enc = np.empty_like(angles)
        enc[:, 0::2] = np.sin(angles[:, 0::2])
        enc[:, 1::2] = np.cos(angles[:, 1::2])
        return enc

    return np.concatenate([encode(points[:, 1]), encode(points[:, 0])], axis=1).T


def build_embeddings(shapes: Shapes, params: Params, cfg: EncoderConfig) -> Tensor:
    """E = positional encoding + the learned vector of each token's level."""
    c = cfg.hidden_dim
    level_embed = params["dten.level_embed"]
    columns = []
    for level, (h, w) in enumerate(shapes):
        vec = ops.reshape(ops.slice_axis(level_embed, 0, level, level + 1), (c, 1))
        columns.append(ops.expand(vec, (c, h * w)))
    return ops.add(ops.concat(columns, axis=1), Tensor(sinusoidal_encoding(shapes, c)))


# ---------- deformable attention ----------


def sampling_plan(query: Tensor, params: Params, cfg: EncoderConfig) -> tuple[Tensor, Tensor]:
    """Offsets ``[N, N_h, N_l, N_p, 2]`` and softmax weights ``[N, N_h, N_l, N_p]`` from ``query [N, C]``."""
    n = query.shape[0]
    offsets = ops.linear(query, params["dten.attn.offsets.weight"], params["dten.attn.offsets.bias"])
    offsets = ops.reshape(offsets, (n, cfg.heads, cfg.levels, cfg.points, 2))
    logits = ops.linear(query, params["dten.attn.weights.weight"], params["dten.attn.weights.bias"])
    weights = ops.softmax(ops.reshape(logits, (n, cfg.heads, cfg.levels * cfg.points)), axis=-1)
    return offsets, ops.reshape(weights, (n, cfg.heads, cfg.levels, cfg.points))


def deformable_attention(
    m_f: Tensor, embeddings: Tensor, ref: ReferencePoints, params: Params, cfg: EncoderConfig
) -> Tensor:
    """Multi-scale deformable attention; returns ``O_DA [C, N_in]``."""
    c = cfg.hidden_dim
    starts = ref.level_starts
    n = starts[-1]
    if m_f.shape != (c, n) or embeddings.shape != (c, n) or ref.points.shape != (n, 2):
        raise ShapeError(
            f"deformable_attention: m_f {m_f.shape}, E {embeddings.shape}, P {ref.points.shape} "
            f"do not match C={c}, N_in={n}"
        )
    if len(ref.shapes) != cfg.levels:
        raise ShapeError(f"config has {cfg.levels} levels but reference points cover {len(ref.shapes)}")
    d, heads, points = cfg.head_dim, cfg.heads, cfg.points

    tokens = ops.transpose(m_f, (1, 0))
    query = ops.transpose(ops.add(m_f, embeddings), (1, 0))
    value = ops.linear(tokens, params["dten.attn.value.weight"], params["dten.attn.value.bias"])
    offsets, weights = sampling_plan(query, params, cfg)
    base = ops.expand(ops.reshape(ref.points, (n, 1, 2)), (n, points, 2))

    head_outputs = []
    for h in range(heads):
        head_value = ops.slice_axis(value, 1, h * d, (h + 1) * d)
        total = None
        for level, (lh, lw) in enumerate(ref.shapes):
            level_value = ops.slice_axis(head_value, 0, starts[level], starts[level + 1])
            value_map = ops.reshape(ops.transpose(level_value, (1, 0)), (d, lh, lw))
            delta = ops.slice_axis(ops.slice_axis(offsets, 1, h, h + 1), 2, level, level + 1)
            locations = ops.add(base, ops.reshape(delta, (n, points, 2)))
            sampled = ops.bilinear_sample(value_map, ops.reshape(locations, (n * points, 2)))
            w = ops.slice_axis(ops.slice_axis(weights, 1, h, h + 1), 2, level, level + 1)
            w = ops.expand(ops.reshape(w, (1, n, points)), (d, n, points))
            contrib = ops.sum(ops.mul(ops.reshape(sampled, (d, n, points)), w), axis=2)
            total = contrib if total is None else ops.add(total, contrib)
        head_outputs.append(total)
    o_s = ops.transpose(ops.concat(head_outputs, axis=0), (1, 0))
    o_da = ops.linear(o_s, params["dten.attn.output.weight"], params["dten.attn.output.bias"])
    return ops.transpose(o_da, (1, 0))


def encoder_forward(
    m_f: Tensor,
    embeddings: Tensor,
    ref: ReferencePoints,
    params: Params,
    cfg: EncoderConfig,
    training: bool = False,
    rng: Optional[Rng] = None,
) -> Tensor:
    """One encoder layer: O = FFN(LN(Dropout(O_DA) + m_f)), FFN with its own residual and norm."""
    o_da = deformable_attention(m_f, embeddings, ref, params, cfg)
    tokens = ops.transpose(m_f, (1, 0))
    attended = ops.transpose(ops.dropout(o_da, cfg.dropout_rate, training, rng), (1, 0))
    x = ops.layer_norm(
        ops.add(tokens, attended),
        params["dten.encoder.norm1.gamma"],
        params["dten.encoder.norm1.beta"],
        axis=1,
    )
    hidden = ops.linear(x, params["dten.encoder.ffn1.weight"], params["dten.encoder.ffn1.bias"])
    hidden = ops.prelu(hidden, params["dten.encoder.ffn1.slope"])
    hidden = ops.dropout(hidden, cfg.dropout_rate, training, rng)
    ffn = ops.linear(hidden, params["dten.encoder.ffn2.weight"], params["dten.encoder.ffn2.bias"])
    out = ops.layer_norm(
        ops.add(x, ffn), params["dten.encoder.norm2.gamma"], params["dten.encoder.norm2.beta"], axis=1
    )
    return ops.transpose(out, (1, 0))


# ---------- feature add ----------


def fa_block(original: Tensor, enhanced: Tensor, params: Params, level: int) -> Tensor:
    """Embed ``original`` (conv3x3 + PReLU) and add ``enhanced`` resized to its resolution."""
    embedded = conv_block(original, params, f"dten.fa.{level}")
    _, h, w = original.shape
    return ops.add(embedded, ops.interpolate_bilinear(enhanced, h, w))


def dten_forward(
    feats: MultiScaleFeatures,
    params: Params,
    cfg: EncoderConfig,
    training: bool = False,
    rng: Optional[Rng] = None,
) -> Tensor:
    """Full neck; returns the enhanced finest-resolution map ``[C, H_3, W_3]``."""
    if len(feats.maps) != NUM_LEVELS:
        raise ShapeError(f"expected {NUM_LEVELS} levels, got {len(feats.maps)}")
    shapes = feats.shapes
    m_f = project_and_flatten(feats, params, cfg)
    ref = generate_reference_points(shapes)
    embeddings = build_embeddings(shapes, params, cfg)
    o = encoder_forward(m_f, embeddings, ref, params, cfg, training, rng)
    running = split_levels(o, shapes).maps[-1]
    for level, original in enumerate(feats.maps, start=1):
        running = fa_block(original, running, params, level)
    return running
