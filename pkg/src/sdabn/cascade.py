"""Cascade of segmentation-and-denoising blocks.

Block 1 sees only the noisy image ``y``; block ``i >= 2`` segments the
previous estimate and denoises from ``(x_{i-1}, y)``. An optional trailing
segmenter evaluates the last denoised image, which is also how the
"discard the last denoiser" evaluation form is represented.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, UsageError
from .models import SDB, Module, SegNetTiny, block_condition, seg_forward
from .tensor import Tensor


@dataclass(eq=False)
class CascadeParams(Module):
    blocks: list[SDB] = field(default_factory=list)
    tail_seg: SegNetTiny | None = None

    def __post_init__(self):
        if not self.blocks and self.tail_seg is None:
            raise ConfigurationError("cascade needs at least one block")
        for i, block in enumerate(self.blocks, 1):
            want = 1 if i == 1 else 2
            if block.den.n_inputs != want:
                raise ConfigurationError(f"block {i} denoiser takes {block.den.n_inputs} images, expected {want}")
        classes = {b.n_classes for b in self.blocks if b.n_classes is not None}
        if self.tail_seg is not None:
            classes.add(self.tail_seg.n_classes)
        if len(classes) > 1:
            raise ConfigurationError(f"blocks disagree on class count: {sorted(classes)}")
        channels = {b.den.image_channels for b in self.blocks}
        if len(channels) > 1:
            raise ConfigurationError("blocks disagree on image channel count")

    @property
    def n(self) -> int:
        return len(self.blocks)

    @property
    def variants(self) -> list[str]:
        return [b.variant for b in self.blocks]


def cascade_forward(params: CascadeParams, y: Tensor, upto: int | None = None,
                    labels: np.ndarray | None = None) -> tuple[list[Tensor | None], list[Tensor]]:
    """All per-block probability maps and denoised images.

    ``upto`` truncates to the first ``upto`` blocks (the trailing segmenter
    then does not run). Blocks without a segmenter contribute ``None`` probs.
    """
    n = params.n
    if upto is None:
        upto = n
    elif not 1 <= upto <= n:
        raise UsageError(f"upto={upto} outside [1, {n}]")
    all_probs: list[Tensor | None] = []
    all_denoised: list[Tensor] = []
    x = y
    for i, block in enumerate(params.blocks[:upto]):
        probs = seg_forward(block.seg, x)[1] if block.seg is not None else None
        cond = block_condition(block, x, probs, labels)
        images = [x] if i == 0 else [x, y]
        x = block.den(images, cond)
        all_probs.append(probs)
        all_denoised.append(x)
    if upto == n and params.tail_seg is not None:
        all_probs.append(seg_forward(params.tail_seg, x)[1])
    return all_probs, all_denoised


def cascade_truncate_tail(params: CascadeParams) -> CascadeParams:
    """View without the last denoiser, ending in the last block's segmenter.

    Parameters are shared with ``params``, not copied.
    """
    if params.n < 1:
        raise UsageError("nothing to truncate")
    last = params.blocks[-1]
    if last.seg is None:
        raise UsageError("last block has no segmenter to end on")
    return CascadeParams(list(params.blocks[:-1]), tail_seg=last.seg)


def segmentation_input(params: CascadeParams, y: Tensor, i: int, labels: np.ndarray | None = None) -> Tensor:
    """Input seen by the segmenter of unit ``i``: ``y`` for unit 1, else the previous estimate."""
    if i == 1:
        return y
    _, denoised = cascade_forward(params, y, upto=i - 1, labels=labels)
    return denoised[-1]
