"""Central finite-difference checks for the autodiff engine and the network."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import ops
from .config import BackboneConfig, EncoderConfig, ModelConfig
from .network import MultiScaleFeatures
from .rng import Rng
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
LOSS_TOLERANCE = 1e-5


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; tiny norms compare absolutely."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff / scale if scale > 1e-8 else diff


def analytic_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    with Tape() as tape:
        out = fn(*inputs)
        # a fixed random projection turns any output into a scalar
        loss = ops.sum(ops.mul(out, Tensor(_projection(out.shape))))
    tape.backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad for t in inputs]


@lru_cache(maxsize=64)
def _projection(shape: tuple[int, ...]) -> np.ndarray:
    return Rng(0xC0FFEE).uniform_array(-1.0, 1.0, shape) if shape else np.array(1.0)


def numeric_gradient(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    index: int,
    entries: Optional[Sequence[int]] = None,
    step: float = FD_STEP,
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of the projected output wrt ``inputs[index]``.

    Returns ``(flat_positions, estimates)``; ``entries`` restricts the estimate to a subset.
    """
    target = inputs[index]
    base = target.data.copy().reshape(-1)
    positions = np.arange(base.size) if entries is None else np.asarray(entries)
    estimates = np.zeros(len(positions))

    def evaluate(values: np.ndarray) -> float:
        shifted = Tensor(values.reshape(target.shape))
        args = list(inputs)
        args[index] = shifted
        out = fn(*args)
        return float((out.data * _projection(out.shape)).sum())

    for k, pos in enumerate(positions):
        plus = base.copy()
        plus[pos] += step
        minus = base.copy()
        minus[pos] -= step
        estimates[k] = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
    return positions, estimates


def check_gradients(
    name: str,
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    max_entries: Optional[int] = None,
    rng: Optional[Rng] = None,
    step: float = FD_STEP,
) -> GradCheckResult:
    """Compare analytic and numeric gradients for every input tensor.

    With ``max_entries`` each input is spot-checked on that many randomly chosen entries.
    """
    analytic = analytic_gradients(fn, inputs)
    worst = 0.0
    rng = rng or Rng(1)
    for i, tensor in enumerate(inputs):
        entries = None
        if max_entries is not None and tensor.size > max_entries:
            entries = sorted(rng.permutation(tensor.size)[:max_entries])
        positions, numeric = numeric_gradient(fn, inputs, i, entries, step)
        err = relative_error(analytic[i].reshape(-1)[positions], numeric)
        worst = max(worst, err)
    result = GradCheckResult(name, worst, tolerance)
    logger.debug("gradcheck %s: max rel err %.3e", name, worst)
    return result


# ---------- named suite ----------


@dataclass
class GradCase:
    name: str
    fn: Callable[..., Tensor]
    inputs: list[Tensor]
    tolerance: float = 1e-4
    max_entries: Optional[int] = None
    step: float = FD_STEP


TINY_IMAGE = (32, 32)


def tiny_model_config(use_dten: bool = True) -> ModelConfig:
    """Levels 2x2 / 4x4 / 8x8 on a 32x32 image, C=8, two heads, two points, no dropout."""
    return ModelConfig(
        backbone=BackboneConfig(channels=(6, 5, 4)),
        encoder=EncoderConfig(hidden_dim=8, heads=2, points=2, dropout_rate=0.0),
        use_dten=use_dten,
    )


def jitter_params(
    params: Mapping[str, Tensor],
    rng: Rng,
    scale: float = 0.02,
    prefixes: Sequence[str] = ("dten.attn.offsets", "dten.attn.weights"),
) -> dict[str, Tensor]:
    """Copy of ``params`` with zero-initialised sampling parameters replaced by small noise.

    Zero offsets put every sample exactly on a pixel center, where bilinear sampling has a kink.
    """
    out = dict(params)
    for name, t in params.items():
        if name.startswith(tuple(prefixes)):
            out[name] = Tensor(t.data + rng.uniform_array(-scale, scale, t.shape), requires_grad=True, name=name)
    return out


def _rand(rng: Rng, shape: tuple[int, ...], low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform_array(low, high, shape))


def _with_params(base: Mapping[str, Tensor], names: Sequence[str], body: Callable[..., Tensor]):
    """Adapt ``body(params, *rest)`` so the named parameters become leading positional inputs."""

    def fn(*args: Tensor) -> Tensor:
        params = dict(base)
        params.update(zip(names, args[: len(names)]))
        return body(params, *args[len(names) :])

    return fn


def op_cases(rng: Rng) -> list[GradCase]:
    def x(*shape: int) -> Tensor:
        return _rand(rng, shape)

    def unit(*shape: int) -> Tensor:
        return _rand(rng, shape, 0.05, 0.95)

    signs = np.where(np.arange(12) % 2, 1.0, -1.0).reshape(3, 4)
    return [
        GradCase("add", ops.add, [x(3, 4), x(3, 4)]),
        GradCase("sub", ops.sub, [x(3, 4), x(3, 4)]),
        GradCase("mul", ops.mul, [x(3, 4), x(3, 4)]),
        GradCase("mul_scalar", ops.mul, [x(3, 4), x(1)]),
        GradCase("abs", ops.abs, [Tensor(signs * rng.uniform_array(0.1, 1.0, (3, 4)))]),
        GradCase("clamp", lambda t: ops.clamp(t, -0.5, 0.5), [x(4, 5)]),
        GradCase("log", ops.log, [unit(3, 4)]),
        GradCase("sigmoid", ops.sigmoid, [x(3, 4)]),
        GradCase("sum", lambda t: ops.sum(t, axis=1), [x(3, 4)]),
        GradCase("mean", lambda t: ops.mean(t, axis=0, keepdims=True), [x(3, 4)]),
        GradCase("reshape", lambda t: ops.reshape(t, (4, 3)), [x(3, 4)]),
        GradCase("transpose", lambda t: ops.transpose(t, (2, 0, 1)), [x(2, 3, 4)]),
        GradCase("expand", lambda t: ops.expand(t, (3, 4)), [x(3, 1)]),
        GradCase("concat", lambda a, b: ops.concat([a, b], axis=1), [x(2, 3), x(2, 2)]),
        GradCase("slice_axis", lambda t: ops.slice_axis(t, 1, 1, 3), [x(2, 4)]),
        GradCase("softmax", lambda t: ops.softmax(t, axis=-1), [x(3, 5)]),
        GradCase("linear", ops.linear, [x(4, 3), x(3, 2), x(2)]),
        GradCase(
            "conv2d", lambda a, k, b: ops.conv2d(a, k, stride=2, pad=1, bias=b), [x(1, 2, 6, 6), x(3, 2, 3, 3), x(3)]
        ),
        GradCase("prelu", ops.prelu, [x(3, 4), Tensor(np.array([0.25]))]),
        GradCase("layer_norm_channels", lambda t, g, b: ops.layer_norm(t, g, b, axis=0), [x(4, 6), x(4), x(4)]),
        GradCase("layer_norm_last", lambda t, g, b: ops.layer_norm(t, g, b, axis=-1), [x(5, 4), x(4), x(4)]),
        GradCase("bilinear_sample", ops.bilinear_sample, [x(2, 4, 5), _rand(rng, (7, 2), -0.1, 1.1)]),
        GradCase("interpolate_bilinear", lambda t: ops.interpolate_bilinear(t, 7, 5), [x(2, 3, 4)]),
    ]


def loss_cases(rng: Rng) -> list[GradCase]:
    from . import losses
    from .data import WeakLabelMap

    states = rng.random_array((6, 6))
    labels = WeakLabelMap(np.select([states < 0.2, states < 0.4], [1, 0], 2).astype(np.uint8))
    teacher = rng.uniform_array(0.05, 0.95, (1, 6, 6))

    def pred() -> Tensor:
        return _rand(rng, (1, 6, 6), 0.05, 0.95)

    return [
        GradCase("partial_ce", lambda p: losses.partial_ce(p, labels), [pred()], LOSS_TOLERANCE),
        GradCase(
            "sparse_foreground_loss", lambda p: losses.sparse_foreground_loss(p, labels), [pred()], LOSS_TOLERANCE
        ),
        GradCase("consistency_loss", lambda p: losses.consistency_loss(p, teacher), [pred()], LOSS_TOLERANCE),
        GradCase(
            "semi_loss",
            lambda p, q: losses.semi_loss([p, q], [teacher, teacher], [labels, None]).tensor,
            [pred(), pred()],
            LOSS_TOLERANCE,
        ),
    ]


def network_cases(rng: Rng) -> list[GradCase]:
    from . import dten
    from .network import SegModel

    model_cfg = tiny_model_config()
    enc = model_cfg.encoder
    model = SegModel(model_cfg, seed=7)
    params = jitter_params(model.params, rng)
    h, w = TINY_IMAGE
    shapes = [(h // 16, w // 16), (h // 8, w // 8), (h // 4, w // 4)]
    n = sum(a * b for a, b in shapes)
    ref = dten.generate_reference_points(shapes)
    embeddings = dten.build_embeddings(shapes, params, enc)

    attn_names = [
        "dten.attn.value.weight",
        "dten.attn.offsets.weight",
        "dten.attn.offsets.bias",
        "dten.attn.weights.weight",
        "dten.attn.output.weight",
    ]
    attention = _with_params(params, attn_names, lambda p, m: dten.deformable_attention(m, embeddings, ref, p, enc))
    enc_names = attn_names + [
        "dten.encoder.norm1.gamma",
        "dten.encoder.ffn1.weight",
        "dten.encoder.ffn1.slope",
        "dten.encoder.ffn2.weight",
        "dten.encoder.norm2.beta",
    ]
    encoder = _with_params(params, enc_names, lambda p, m: dten.encoder_forward(m, embeddings, ref, p, enc))

    feats = [_rand(rng, (c, a, b)) for c, (a, b) in zip(model_cfg.backbone.channels, shapes)]
    neck_names = [
        "dten.input_proj.1.weight",
        "dten.input_norm.2.gamma",
        "dten.level_embed",
        "dten.fa.3.weight",
        "dten.fa.1.slope",
    ]
    neck = _with_params(
        params, neck_names, lambda p, a, b, c: dten.dten_forward(MultiScaleFeatures([a, b, c]), p, enc)
    )

    image = _rand(rng, (3, h, w), 0.0, 1.0)
    all_names = list(params)
    whole = _with_params(params, all_names, lambda p, img: _forward(model, p, img))
    m_f = _rand(rng, (enc.hidden_dim, n))
    return [
        GradCase("deformable_attention", attention, [params[k] for k in attn_names] + [m_f], max_entries=12, step=1e-6),
        GradCase("encoder", encoder, [params[k] for k in enc_names] + [m_f], max_entries=12, step=1e-6),
        GradCase("neck", neck, [params[k] for k in neck_names] + feats, max_entries=12, step=1e-6),
        GradCase("model", whole, [params[k] for k in all_names] + [image], tolerance=1e-3, max_entries=4, step=1e-6),
    ]


def _forward(model, params: Mapping[str, Tensor], image: Tensor) -> Tensor:
    saved = model.params
    model.params = dict(params)
    try:
        return model.forward(image, training=False)
    finally:
        model.params = saved


def default_suite(seed: int = 0) -> list[GradCase]:
    rng = Rng(seed)
    return op_cases(rng) + loss_cases(rng) + network_cases(rng)


def run_suite(cases: Sequence[GradCase], seed: int = 1) -> list[GradCheckResult]:
    rng = Rng(seed)
    results = []
    for case in cases:
        inputs = [Tensor(t.data) for t in case.inputs]
        result = check_gradients(case.name, case.fn, inputs, case.tolerance, case.max_entries, rng, case.step)
        status = "ok" if result.passed else "FAIL"
        logger.info("gradcheck %-22s %s (max rel err %.2e)", case.name, status, result.max_rel_error)
        results.append(result)
    return results
