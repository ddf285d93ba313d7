"""Network stand-ins: SFT conditioning, a tiny segmenter, and the denoisers.

The segmenter is a three-stage encoder/decoder with two skip connections.
The denoiser is a residual dilated stack; its conditioned form inserts an
SFT site before every layer after the head, all sites sharing one condition
branch. Every network is fully convolutional and batch-norm free.
"""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import CheckpointMismatchError, ConfigurationError
from .tensor import Tensor

# SFT heads start at this fraction of the Kaiming scale (gamma near 1, beta
# near 0); the residual tail starts smaller still so a fresh denoiser is close
# to the identity map.
NEAR_IDENTITY_GAIN = 0.1
RESIDUAL_TAIL_GAIN = 0.02

VARIANTS = ("conditioned", "plain", "img-condition", "gt-condition")


class Module:
    """Parameter container; submodules and parameters are found by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.name == "param":
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        problems = []
        for name in own.keys() - state.keys():
            problems.append(f"missing {name} {own[name].shape}")
        for name in state.keys() - own.keys():
            problems.append(f"unexpected {name} {np.shape(state[name])}")
        for name in own.keys() & state.keys():
            if own[name].shape != np.shape(state[name]):
                problems.append(f"shape {name}: model {own[name].shape} vs stored {np.shape(state[name])}")
        if problems:
            raise CheckpointMismatchError("parameter mismatch:\n  " + "\n  ".join(sorted(problems)))
        for name, p in own.items():
            p.data = np.array(state[name], dtype=p.dtype)


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name="param")


class Conv(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, *, stride: int = 1,
                 dilation: int = 1, gain: float = 1.0, bias_init: float = 0.0, dtype=np.float64):
        fan_in = cin * k * k
        std = gain * np.sqrt(2.0 / fan_in)
        self.weight = _param(rng.normal(0.0, std, size=(cout, cin, k, k)), dtype)
        self.bias = _param(np.full(cout, bias_init), dtype)
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k // 2)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class SftParams(Module):
    """Shared condition branch plus per-site gamma/beta heads."""

    def __init__(self, cond_channels: int, feature_channels: Sequence[int], width: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.shared = [
            Conv(cond_channels, width, 3, rng, dtype=dtype),
            Conv(width, width, 3, rng, dtype=dtype),
        ]
        self.gamma_heads = [
            Conv(width, c, 3, rng, gain=NEAR_IDENTITY_GAIN, bias_init=1.0, dtype=dtype) for c in feature_channels
        ]
        self.beta_heads = [Conv(width, c, 3, rng, gain=NEAR_IDENTITY_GAIN, dtype=dtype) for c in feature_channels]

    @property
    def cond_channels(self) -> int:
        return self.shared[0].weight.shape[1]

    def condition_features(self, condition: Tensor) -> Tensor:
        h = condition
        for conv in self.shared:
            h = T.relu(conv(h))
        return h

    def modulation(self, site: int, cond_features: Tensor) -> tuple[Tensor, Tensor]:
        return self.gamma_heads[site](cond_features), self.beta_heads[site](cond_features)


def sft_apply(features: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """F' = gamma * F + beta."""
    return T.add(T.mul(gamma, features), beta)


def sft_forward(features: Tensor, condition: Tensor, params: SftParams, site: int = 0,
                cond_features: Tensor | None = None) -> Tensor:
    if features.shape[2:] != condition.shape[2:] or features.shape[0] != condition.shape[0]:
        raise ConfigurationError(f"sft: features {features.shape} and condition {condition.shape} misaligned")
    if cond_features is None:
        cond_features = params.condition_features(condition)
    gamma, beta = params.modulation(site, cond_features)
    return sft_apply(features, gamma, beta)


class SegNetTiny(Module):
    """Encoder 16-32-64 with stride-2 downsampling, nearest-upsample decoder with skips."""

    def __init__(self, n_classes: int, rng: np.random.Generator, widths: Sequence[int] = (16, 32, 64),
                 in_channels: int = 3, dtype=np.float64):
        if n_classes < 2:
            raise ConfigurationError("segmentation needs at least two classes")
        w1, w2, w3 = widths
        self.enc1 = Conv(in_channels, w1, 3, rng, dtype=dtype)
        self.enc2 = Conv(w1, w2, 3, rng, stride=2, dtype=dtype)
        self.enc3 = Conv(w2, w3, 3, rng, stride=2, dtype=dtype)
        self.dec2 = Conv(w3 + w2, w2, 3, rng, dtype=dtype)
        self.dec1 = Conv(w2 + w1, w1, 3, rng, dtype=dtype)
        self.classifier = Conv(w1, n_classes, 1, rng, gain=0.5, dtype=dtype)
        self.n_classes = n_classes

    def logits(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % 4 or w % 4:
            raise ConfigurationError(f"segmentation input {h}x{w} must be divisible by 4")
        e1 = T.relu(self.enc1(x))
        e2 = T.relu(self.enc2(e1))
        e3 = T.relu(self.enc3(e2))
        d2 = T.relu(self.dec2(T.concat_channels([T.upsample_nearest(e3), e2])))
        d1 = T.relu(self.dec1(T.concat_channels([T.upsample_nearest(d2), e1])))
        return self.classifier(d1)


def seg_forward(params: SegNetTiny, x: Tensor) -> tuple[Tensor, Tensor]:
    logits = params.logits(x)
    return logits, T.softmax_channels(logits)


class DenoiserTiny(Module):
    """Head conv, dilated conv-relu body, tail conv predicting the noise.

    ``n_inputs`` images are stacked at the head (1 for the first block, 2 for
    later blocks). With ``cond_channels`` set, an SFT site sits before each
    body layer and before the tail.
    """

    def __init__(self, rng: np.random.Generator, *, n_inputs: int = 1, width: int = 32,
                 dilations: Sequence[int] = (1, 2, 4, 4, 2, 1), image_channels: int = 3,
                 cond_channels: int | None = None, sft_width: int = 32, residual: bool = True,
                 dtype=np.float64):
        self.head = Conv(image_channels * n_inputs, width, 3, rng, dtype=dtype)
        self.body = [Conv(width, width, 3, rng, dilation=d, dtype=dtype) for d in dilations]
        self.tail = Conv(width, image_channels, 3, rng, gain=RESIDUAL_TAIL_GAIN if residual else 1.0, dtype=dtype)
        self.sft = (
            SftParams(cond_channels, [width] * (len(dilations) + 1), sft_width, rng, dtype=dtype)
            if cond_channels
            else None
        )
        self.n_inputs = n_inputs
        self.image_channels = image_channels
        self.residual = residual

    @property
    def conditioned(self) -> bool:
        return self.sft is not None

    def __call__(self, images: Sequence[Tensor], condition: Tensor | None = None) -> Tensor:
        if len(images) != self.n_inputs:
            raise ConfigurationError(f"denoiser expects {self.n_inputs} image inputs, got {len(images)}")
        ref = images[0].shape
        for img in images:
            if img.shape != ref:
                raise ConfigurationError(f"denoiser inputs misaligned: {img.shape} vs {ref}")
        if self.conditioned:
            if condition is None:
                raise ConfigurationError("conditioned denoiser needs a condition map")
            if condition.shape[0] != ref[0] or condition.shape[2:] != ref[2:]:
                raise ConfigurationError(f"condition {condition.shape} misaligned with image {ref}")
            if condition.shape[1] != self.sft.cond_channels:
                raise ConfigurationError(
                    f"condition has {condition.shape[1]} channels, SFT expects {self.sft.cond_channels}"
                )
            cond = self.sft.condition_features(condition)

        h = T.relu(self.head(T.concat_channels(list(images))))
        for site, conv in enumerate(self.body):
            if self.conditioned:
                h = sft_apply(h, *self.sft.modulation(site, cond))
            h = T.relu(conv(h))
        if self.conditioned:
            h = sft_apply(h, *self.sft.modulation(len(self.body), cond))
        out = self.tail(h)
        return T.sub(images[0], out) if self.residual else out


def denoise_plain(params: DenoiserTiny, x: Tensor) -> Tensor:
    return params([x])


def denoise_conditioned(params: DenoiserTiny, image_inputs: Sequence[Tensor], condition: Tensor) -> Tensor:
    return params(image_inputs, condition)


# --------------------------------------------------------------------------
# alternative conditions


def image_condition(image: Tensor | np.ndarray, n_classes: int) -> Tensor:
    """Image channels cycled to ``n_classes`` channels (the image-as-condition control)."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    idx = np.arange(n_classes) % data.shape[1]
    return Tensor(np.ascontiguousarray(data[:, idx]))


def onehot_condition(labels: np.ndarray, n_classes: int, dtype=np.float64) -> Tensor:
    """One-hot ground truth as a [B,N,H,W] map; ignored pixels are all-zero."""
    labels = np.asarray(labels)
    out = (labels[:, None] == np.arange(n_classes)[None, :, None, None]).astype(dtype)
    return Tensor(out)


# --------------------------------------------------------------------------
# segmentation-and-denoising block


class SDB(Module):
    """One block: segmenter ``seg`` (optional outside the conditioned variant) and denoiser ``den``."""

    def __init__(self, seg: SegNetTiny | None, den: DenoiserTiny, variant: str = "conditioned"):
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown block variant {variant!r}")
        if variant == "conditioned":
            if seg is None:
                raise ConfigurationError("conditioned block needs a segmentation network")
            if den.sft is None or den.sft.cond_channels != seg.n_classes:
                raise ConfigurationError("denoiser condition channels must equal the segmentation class count")
        elif variant == "plain" and den.conditioned:
            raise ConfigurationError("plain block must use an unconditioned denoiser")
        elif variant in ("img-condition", "gt-condition") and not den.conditioned:
            raise ConfigurationError(f"{variant} block needs a conditioned denoiser")
        self.seg = seg
        self.den = den
        self.variant = variant

    @property
    def n_classes(self) -> int | None:
        if self.seg is not None:
            return self.seg.n_classes
        return self.den.sft.cond_channels if self.den.sft is not None else None


def block_condition(block: SDB, x: Tensor, probs: Tensor | None, labels: np.ndarray | None) -> Tensor | None:
    if block.variant == "conditioned":
        return probs
    if block.variant == "img-condition":
        return image_condition(x, block.den.sft.cond_channels)
    if block.variant == "gt-condition":
        if labels is None:
            raise ConfigurationError("gt-condition block needs ground-truth labels")
        return onehot_condition(labels, block.den.sft.cond_channels, dtype=x.dtype)
    return None


def sdb_forward(params: SDB, x: Tensor, skip_y: Tensor | None = None,
                labels: np.ndarray | None = None) -> tuple[Tensor | None, Tensor]:
    """``(probs, denoised)`` for one block; ``skip_y`` is given exactly for non-first blocks."""
    if (skip_y is not None) != (params.den.n_inputs == 2):
        raise ConfigurationError("skip_y must be given exactly when the denoiser takes two inputs")
    probs = seg_forward(params.seg, x)[1] if params.seg is not None else None
    images = [x] if skip_y is None else [x, skip_y]
    cond = block_condition(params, x, probs, labels)
    return probs, params.den(images, cond)


def build_block(index: int, variant: str, n_classes: int, rng: np.random.Generator, *,
                seg_widths: Sequence[int] = (16, 32, 64), den_width: int = 32, sft_width: int = 32,
                dilations: Sequence[int] = (1, 2, 4, 4, 2, 1), residual: bool = True,
                with_seg: bool | None = None, dtype=np.float64) -> SDB:
    """Block ``index`` (1-based) of a cascade."""
    if with_seg is None:
        with_seg = variant != "plain"
    seg = SegNetTiny(n_classes, rng, seg_widths, dtype=dtype) if with_seg else None
    den = DenoiserTiny(
        rng, n_inputs=1 if index == 1 else 2, width=den_width, dilations=dilations,
        cond_channels=None if variant == "plain" else n_classes, sft_width=sft_width,
        residual=residual, dtype=dtype,
    )
    return SDB(seg, den, variant)
