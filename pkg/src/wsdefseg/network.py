"""Segmentation network: conv backbone, optional deformable neck and a vanilla head."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from . import ops
from .config import NUM_LEVELS, ModelConfig
from .data import Sample
from .errors import ShapeError
from .rng import Rng
from .tensor import Tensor

logger = logging.getLogger(__name__)

PRELU_INIT = 0.25
BACKBONE_STRIDE = 16

Params = Mapping[str, Tensor]


class Role(str, Enum):
    TEACHER = "teacher"
    STUDENT = "student"


@dataclass
class MultiScaleFeatures:
    """Feature maps m_1..m_3 as ``[C_l, H_l, W_l]``, coarsest first."""

    maps: list[Tensor]

    def __post_init__(self) -> None:
        if len(self.maps) != NUM_LEVELS:
            raise ShapeError(f"expected {NUM_LEVELS} feature levels, got {len(self.maps)}")
        for m in self.maps:
            if m.ndim != 3 or min(m.shape) < 1:
                raise ShapeError(f"feature map must be [C, H, W] with positive extents, got {m.shape}")
        for coarse, fine in zip(self.maps, self.maps[1:]):
            if not (coarse.shape[1] < fine.shape[1] and coarse.shape[2] < fine.shape[2]):
                raise ShapeError(f"levels must grow in resolution: {coarse.shape} then {fine.shape}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(m.shape[1], m.shape[2]) for m in self.maps]


class ParamStore:
    """Ordered, uniquely named trainable tensors, created deterministically from one Rng."""

    def __init__(self, rng: Rng):
        self.rng = rng
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = Tensor(data, requires_grad=True, name=name)
        self.tensors[name] = tensor
        return tensor

    def kaiming(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = math.sqrt(6.0 / ((1.0 + PRELU_INIT**2) * fan_in))
        return self.add(name, self.rng.uniform_array(-bound, bound, shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def conv(self, prefix: str, c_out: int, c_in: int, k: int) -> None:
        self.kaiming(f"{prefix}.weight", (c_out, c_in, k, k), c_in * k * k)
        self.zeros(f"{prefix}.bias", (c_out,))

    def linear(self, prefix: str, d_in: int, d_out: int, zero: bool = False) -> None:
        if zero:
            self.zeros(f"{prefix}.weight", (d_in, d_out))
        else:
            self.kaiming(f"{prefix}.weight", (d_in, d_out), d_in)
        self.zeros(f"{prefix}.bias", (d_out,))

    def prelu(self, name: str) -> None:
        self.add(name, np.full((1,), PRELU_INIT))

    def norm(self, prefix: str, dim: int) -> None:
        self.add(f"{prefix}.gamma", np.ones((dim,)))
        self.zeros(f"{prefix}.beta", (dim,))


def conv_block(x: Tensor, params: Params, prefix: str, stride: int = 1, norm: bool = False) -> Tensor:
    """Conv (same padding), optional layer norm over channels, then PReLU on ``[C, H, W]``."""
    weight = params[f"{prefix}.weight"]
    pad = weight.shape[-1] // 2
    out = ops.conv2d(ops.reshape(x, (1, *x.shape)), weight, stride=stride, pad=pad, bias=params[f"{prefix}.bias"])
    out = ops.reshape(out, out.shape[1:])
    if norm:
        out = ops.layer_norm(out, params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"], axis=0)
    return ops.prelu(out, params[f"{prefix}.slope"])


# ---------- backbone ----------

BACKBONE_BLOCKS = ("stem", "stage3", "stage2", "stage1")


def init_backbone(store: ParamStore, config: ModelConfig) -> None:
    c1, c2, c3 = config.backbone.channels
    plan = {"stem": (config.backbone.in_channels, c3), "stage3": (c3, c3), "stage2": (c3, c2), "stage1": (c2, c1)}
    for block in BACKBONE_BLOCKS:
        c_in, c_out = plan[block]
        store.conv(f"backbone.{block}", c_out, c_in, 3)
        store.norm(f"backbone.{block}.norm", c_out)
        store.prelu(f"backbone.{block}.slope")


def backbone_forward(image: Tensor, params: Params) -> MultiScaleFeatures:
    """Stride-2 conv stages (conv, channel norm, PReLU) emitting maps at strides 16, 8 and 4 (l = 1, 2, 3)."""
    if image.ndim != 3:
        raise ShapeError(f"image must be [3, H, W], got {image.shape}")
    _, h, w = image.shape
    if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
        raise ShapeError(f"image extents {h}x{w} must be divisible by {BACKBONE_STRIDE}")
    x = conv_block(image, params, "backbone.stem", stride=2, norm=True)
    m3 = conv_block(x, params, "backbone.stage3", stride=2, norm=True)
    m2 = conv_block(m3, params, "backbone.stage2", stride=2, norm=True)
    m1 = conv_block(m2, params, "backbone.stage1", stride=2, norm=True)
    return MultiScaleFeatures([m1, m2, m3])


# ---------- head ----------


def init_head(store: ParamStore, c_in: int, hidden: int) -> None:
    store.conv("head.conv1", hidden, c_in, 3)
    store.prelu("head.conv1.slope")
    store.conv("head.conv2", 1, hidden, 1)


def head_forward(x: Tensor, out_h: int, out_w: int, params: Params) -> Tensor:
    """Conv3x3 -> PReLU -> Conv1x1 -> bilinear upsample -> sigmoid, giving ``[1, out_h, out_w]``."""
    hidden = conv_block(x, params, "head.conv1")
    logits = ops.conv2d(
        ops.reshape(hidden, (1, *hidden.shape)), params["head.conv2.weight"], bias=params["head.conv2.bias"]
    )
    logits = ops.reshape(logits, logits.shape[1:])
    return ops.sigmoid(ops.interpolate_bilinear(logits, out_h, out_w))


# ---------- model ----------


class SegModel:
    """Named parameter store plus the forward pass of one teacher or student network."""

    def __init__(self, config: ModelConfig, seed: int, role: Role = Role.TEACHER):
        from . import dten

        self.config = config
        self.seed = seed
        self.role = Role(role)
        store = ParamStore(Rng(seed))
        init_backbone(store, config)
        if config.use_dten:
            dten.init_dten(store, config)
            head_in = config.encoder.hidden_dim
        else:
            head_in = config.backbone.channels[2]
        init_head(store, head_in, config.head_dim)
        self.params: dict[str, Tensor] = store.tensors
        logger.debug("built %s model with %d parameter tensors", self.role.value, len(self.params))

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def forward(self, image: Tensor, training: bool = False, rng: Optional[Rng] = None) -> Tensor:
        from . import dten

        feats = backbone_forward(image, self.params)
        if self.config.use_dten:
            x = dten.dten_forward(feats, self.params, self.config.encoder, training, rng)
        else:
            x = feats.maps[-1]
        _, h, w = image.shape
        return head_forward(x, h, w, self.params)

    __call__ = forward


def predict(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Inference-mode prediction ``[H, W]`` in (0, 1) for an image ``[3, H, W]``."""
    out = model.forward(Tensor(image), training=False)
    return out.data[0].copy()


def predict_samples(model: SegModel, samples: Sequence[Sample], workers: int = 1) -> dict[str, np.ndarray]:
    """Predictions keyed by sample id, fanned out over ``workers`` threads sharing the read-only model."""

    def run(sample: Sample) -> np.ndarray:
        return predict(model, sample.image)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(run, samples))
    else:
        outputs = [run(s) for s in samples]
    return {s.id: out for s, out in zip(samples, outputs)}
