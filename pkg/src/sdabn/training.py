"""Optimizers, checkpoints and progressive stage-wise training.

Stages run in the order S0 (clean pretrain), S1, D1, S2, D2, ... with every
earlier stage frozen. Segmenters use momentum SGD on cross-entropy,
denoisers use Adam on MSE. A stage runs a fixed epoch budget with early
stopping on validation loss and returns its best-validation parameters;
the pre-training parameters count as a candidate, so a stage never ends
worse on validation than it started.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .cascade import CascadeParams, cascade_forward
from .errors import CheckpointMismatchError, ConfigurationError, UsageError
from .models import SDB, Module, SegNetTiny, block_condition, seg_forward
from .noise import NoiseSpec, corrupt, derive_seed
from .tensor import Tensor

log = logging.getLogger(__name__)

# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buffers: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def sgd(cls, lr: float, momentum: float = 0.9) -> "OptimizerState":
        return cls("sgd", lr, momentum=momentum)

    @classmethod
    def adam(cls, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        return cls("adam", lr, beta1=beta1, beta2=beta2, eps=eps)


def _check_grads(params: Sequence[Tensor], grads: Sequence[np.ndarray | None]) -> None:
    if len(params) != len(grads):
        raise UsageError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, g in enumerate(grads):
        if g is None:
            raise UsageError(f"parameter {i} has no gradient")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """v <- mu v + g ; p <- p - lr v"""
    _check_grads(params, grads)
    if not state.buffers:
        state.buffers = [np.zeros_like(p.data) for p in params]
    for p, g, v in zip(params, grads, state.buffers):
        v *= state.momentum
        v += g
        p.data = p.data - state.lr * v
    state.step += 1


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    _check_grads(params, grads)
    if not state.buffers:
        state.buffers = [np.zeros_like(p.data) for p in params]
        state.second = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.buffers, state.second):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def optimizer_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    grads = [p.grad for p in params]
    (sgd_step if state.kind == "sgd" else adam_step)(params, grads, state)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"SDBN"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Parameters of one trained stage plus provenance.

    Binary layout, little-endian: ``b"SDBN"``, u16 version, then length-
    prefixed (u32 byte count) UTF-8 strings for stage and config digest, u16
    block index, u64 seed, u32 metric count with (string, f64) pairs, u32
    tensor count, and per tensor: string name, u32 ndim, u32 dims, f64 data.
    """

    stage: str
    block: int
    tensors: dict[str, np.ndarray]
    config_digest: str = ""
    seed: int = 0
    metrics: dict[str, float] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
        out += [_pack_str(self.stage), _pack_str(self.config_digest)]
        out.append(struct.pack("<HQ", self.block, self.seed & (2**64 - 1)))
        out.append(struct.pack("<I", len(self.metrics)))
        for k in sorted(self.metrics):
            out += [_pack_str(k), struct.pack("<d", float(self.metrics[k]))]
        out.append(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            out.append(_pack_str(name))
            out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise CheckpointMismatchError("not a checkpoint (bad magic)")
        r = _Reader(buf, 4)
        (version,) = r.unpack("<H")
        if version != FORMAT_VERSION:
            raise CheckpointMismatchError(f"unsupported checkpoint version {version}")
        stage, digest = r.string(), r.string()
        block, seed = r.unpack("<HQ")
        metrics = {}
        for _ in range(r.unpack("<I")[0]):
            k = r.string()
            metrics[k] = r.unpack("<d")[0]
        tensors = {}
        for _ in range(r.unpack("<I")[0]):
            name = r.string()
            (ndim,) = r.unpack("<I")
            shape = r.unpack(f"<{ndim}I") if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
        return cls(stage, block, tensors, digest, seed, metrics)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        try:
            return cls.from_bytes(path.read_bytes())
        except (struct.error, ValueError) as exc:
            raise CheckpointMismatchError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc

    def load_into(self, module: Module) -> None:
        module.load_state_dict(self.tensors)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointMismatchError("truncated checkpoint")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def module_digest(module: Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def stable_digest(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()


# --------------------------------------------------------------------------
# schedules and data


@dataclass
class StageSchedule:
    epochs: int
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    patience: int = 8
    min_delta: float = 1e-4
    patch_size: int | None = None
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.5

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patience"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"schedule {name} must be positive")
        if self.lr <= 0:
            raise ConfigurationError("schedule lr must be positive")
        if self.patch_size is not None and (self.patch_size < 4 or self.patch_size % 4):
            raise ConfigurationError("patch_size must be a positive multiple of 4")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every:
            return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)
        return self.lr

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class TrainingData:
    """Clean images ``N×3×H×W`` with labels and dataset indices, split into train and validation."""

    train_images: np.ndarray
    train_labels: np.ndarray
    train_indices: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    val_indices: np.ndarray
    noise: NoiseSpec | None = None
    dtype: type = np.float64

    _TRAIN_TAG = 0x7A11
    _VAL_TAG = 0x7A12

    def noisy_train(self, epoch: int) -> np.ndarray:
        """Fresh corruption per (sample, epoch)."""
        if self.noise is None:
            return self.train_images
        spec = self.noise.with_seed(derive_seed(self.noise.seed, self._TRAIN_TAG, epoch))
        return self._corrupt(self.train_images, self.train_indices, spec)

    def noisy_val(self) -> np.ndarray:
        if self.noise is None:
            return self.val_images
        spec = self.noise.with_seed(derive_seed(self.noise.seed, self._VAL_TAG))
        return self._corrupt(self.val_images, self.val_indices, spec)

    def _corrupt(self, images, indices, spec) -> np.ndarray:
        return np.stack([corrupt(img, spec, int(i)) for img, i in zip(images, indices)]).astype(self.dtype)

    def clean_only(self) -> "TrainingData":
        return TrainingData(self.train_images, self.train_labels, self.train_indices,
                            self.val_images, self.val_labels, self.val_indices, None, self.dtype)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _crop(arrays: Sequence[np.ndarray], size: int | None, rng: np.random.Generator) -> list[np.ndarray]:
    """Same random crop per sample across aligned arrays (spatial axes are the last two)."""
    if size is None:
        return list(arrays)
    h, w = arrays[0].shape[-2:]
    if size >= h and size >= w:
        return list(arrays)
    b = arrays[0].shape[0]
    ys = rng.integers(0, h - size + 1, size=b)
    xs = rng.integers(0, w - size + 1, size=b)
    return [np.stack([a[k, ..., y : y + size, x : x + size] for k, (y, x) in enumerate(zip(ys, xs))]) for a in arrays]


# --------------------------------------------------------------------------
# prefix evaluation


def prefix_output(cascade: CascadeParams, y: np.ndarray, upto: int, labels: np.ndarray | None) -> np.ndarray:
    """Denoised estimate after ``upto`` blocks (``y`` itself when ``upto`` is 0), without a graph."""
    if upto == 0:
        return y
    with T.no_grad():
        _, den = cascade_forward(CascadeParams(cascade.blocks[:upto]), Tensor(y), labels=labels)
    return den[-1].data


def denoiser_inputs(cascade: CascadeParams, i: int, y: np.ndarray, labels: np.ndarray | None):
    """Frozen-prefix inputs of denoiser ``i``: ``(images, condition)``."""
    block = cascade.blocks[i - 1]
    x_prev = Tensor(prefix_output(cascade, y, i - 1, labels))
    with T.no_grad():
        probs = seg_forward(block.seg, x_prev)[1] if block.seg is not None else None
        cond = block_condition(block, x_prev, probs, labels)
    images = [x_prev] if i == 1 else [x_prev, Tensor(y)]
    return images, cond


def segmenter(cascade: CascadeParams, i: int) -> SegNetTiny:
    """Segmenter of unit ``i``; unit ``n + 1`` is the trailing segmenter."""
    if i == cascade.n + 1 and cascade.tail_seg is not None:
        return cascade.tail_seg
    if not 1 <= i <= cascade.n or cascade.blocks[i - 1].seg is None:
        raise UsageError(f"unit {i} has no segmenter")
    return cascade.blocks[i - 1].seg


# --------------------------------------------------------------------------
# stage loop


@dataclass
class StageResult:
    best_val: float
    initial_val: float
    epochs_run: int
    history: list[float]


def _run_stage(module: Module, state: OptimizerState, schedule: StageSchedule, n_train: int,
               batch_loss: Callable[[np.ndarray, int, np.random.Generator], Tensor],
               val_loss: Callable[[], float], rng: np.random.Generator, epoch_hook=None,
               name: str = "stage") -> StageResult:
    module.set_trainable(True)
    params = module.parameters()
    initial = best = val_loss()
    best_state = module.state_dict()
    history = [initial]
    stale = 0
    epoch = 0
    for epoch in range(1, schedule.epochs + 1):
        state.lr = schedule.lr_at(epoch - 1)
        if epoch_hook is not None:
            epoch_hook(epoch)
        running = []
        for batch in _batches(n_train, schedule.batch_size, rng):
            module.zero_grad()
            loss = batch_loss(batch, epoch, rng)
            T.backward(loss)
            optimizer_step(params, state)
            running.append(float(loss.data))
        current = val_loss()
        history.append(current)
        log.info("%s epoch %d train %.5f val %.5f", name, epoch, float(np.mean(running)), current)
        # min_delta is relative so one threshold suits cross-entropy and MSE scales
        if current < best * (1.0 - schedule.min_delta):
            best, best_state, stale = current, module.state_dict(), 0
        else:
            stale += 1
            if stale >= schedule.patience:
                break
    module.load_state_dict(best_state)
    module.set_trainable(False)
    return StageResult(best, initial, epoch, history)


def _eval_batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(n, start + batch_size))


def _frozen_digests(cascade: CascadeParams, exclude: Module) -> dict[str, str]:
    out = {}
    for i, block in enumerate(cascade.blocks, 1):
        for tag, m in (("S", block.seg), ("D", block.den)):
            if m is not None and m is not exclude:
                out[f"{tag}{i}"] = module_digest(m)
    if cascade.tail_seg is not None and cascade.tail_seg is not exclude:
        out["tail"] = module_digest(cascade.tail_seg)
    return out


def _verify_frozen(before: dict[str, str], cascade: CascadeParams, exclude: Module) -> None:
    after = _frozen_digests(cascade, exclude)
    changed = [k for k in before if before[k] != after.get(k)]
    if changed:
        raise UsageError(f"frozen parameters changed during training: {changed}")


def train_clean_segmentation(seg: SegNetTiny, data: TrainingData, schedule: StageSchedule, seed: int) -> Checkpoint:
    """Pretrain a segmenter on clean images (initializes S1)."""
    data = data.clean_only()
    rng = np.random.default_rng(seed)
    dt = data.dtype

    def batch_loss(batch, epoch, rng):
        x, lab = _crop([data.train_images[batch].astype(dt), data.train_labels[batch]], schedule.patch_size, rng)
        return T.cross_entropy_loss(seg.logits(Tensor(x)), lab)

    def val_loss():
        return _seg_val(seg, data.val_images.astype(dt), data.val_labels, schedule.batch_size)

    state = OptimizerState.sgd(schedule.lr, schedule.momentum)
    res = _run_stage(seg, state, schedule, len(data.train_images), batch_loss, val_loss, rng, name="S0")
    return Checkpoint("S", 0, seg.state_dict(), seed=seed, metrics=_result_metrics(res))


def _seg_val(seg: SegNetTiny, x: np.ndarray, labels: np.ndarray, bs: int) -> float:
    total, count = 0.0, 0
    with T.no_grad():
        for idx in _eval_batches(len(x), bs):
            lab = labels[idx]
            valid = int((lab != T.IGNORE_LABEL).sum())
            total += float(T.cross_entropy_loss(seg.logits(Tensor(x[idx])), lab).data) * valid
            count += valid
    return total / max(count, 1)


def _result_metrics(res: StageResult) -> dict[str, float]:
    return {"best_val_loss": res.best_val, "initial_val_loss": res.initial_val, "epochs_run": float(res.epochs_run)}


def train_segmentation_stage(i: int, cascade: CascadeParams, data: TrainingData, schedule: StageSchedule,
                             seed: int, init: dict[str, np.ndarray] | None = None) -> Checkpoint:
    """Train segmenter ``i`` on the frozen prefix output, everything else frozen.

    ``init`` holds the starting parameters: the clean-pretrained model for
    ``i == 1``, segmenter ``i - 1`` otherwise. When omitted for ``i >= 2`` the
    previous unit's segmenter is copied.
    """
    seg = segmenter(cascade, i)
    if init is None:
        if i == 1:
            raise UsageError("segmentation stage 1 needs the clean-pretrained parameters")
        init = segmenter(cascade, i - 1).state_dict()
    seg.load_state_dict(init)
    cascade.set_trainable(False)
    frozen = _frozen_digests(cascade, seg)
    rng = np.random.default_rng(seed)
    dt = data.dtype
    tr_labels = data.train_labels
    cache: dict[str, np.ndarray] = {}

    def epoch_hook(epoch):
        cache["y"] = data.noisy_train(epoch)

    def batch_loss(batch, epoch, rng):
        y, lab = _crop([cache["y"][batch], tr_labels[batch]], schedule.patch_size, rng)
        x = prefix_output(cascade, y, i - 1, lab)
        return T.cross_entropy_loss(seg.logits(Tensor(x)), lab)

    val_y = data.noisy_val()
    val_x = np.concatenate([
        prefix_output(cascade, val_y[idx], i - 1, data.val_labels[idx]) for idx in _eval_batches(len(val_y), schedule.batch_size)
    ])

    def val_loss():
        return _seg_val(seg, val_x, data.val_labels, schedule.batch_size)

    state = OptimizerState.sgd(schedule.lr, schedule.momentum)
    res = _run_stage(seg, state, schedule, len(data.train_images), batch_loss, val_loss, rng, epoch_hook, name=f"S{i}")
    _verify_frozen(frozen, cascade, seg)
    return Checkpoint("S", i, seg.state_dict(), seed=seed, metrics=_result_metrics(res))


def train_denoising_stage(i: int, cascade: CascadeParams, data: TrainingData, schedule: StageSchedule,
                          seed: int) -> Checkpoint:
    """Train denoiser ``i`` with MSE against clean images; prefix and segmenter ``i`` frozen."""
    if data.noise is None:
        raise UsageError("denoising stage needs a noise spec")
    block = cascade.blocks[i - 1]
    den = block.den
    cascade.set_trainable(False)
    frozen = _frozen_digests(cascade, den)
    rng = np.random.default_rng(seed)
    dt = data.dtype
    cache: dict[str, np.ndarray] = {}

    def epoch_hook(epoch):
        cache["y"] = data.noisy_train(epoch)

    def batch_loss(batch, epoch, rng):
        y, x, lab = _crop([cache["y"][batch], data.train_images[batch].astype(dt), data.train_labels[batch]],
                          schedule.patch_size, rng)
        images, cond = denoiser_inputs(cascade, i, y, lab)
        return T.mse_loss(den(images, cond), Tensor(x))

    val_y = data.noisy_val()
    val_x = data.val_images.astype(dt)
    val_inputs = [denoiser_inputs(cascade, i, val_y[idx], data.val_labels[idx])
                  for idx in _eval_batches(len(val_y), schedule.batch_size)]

    def val_loss():
        total = 0.0
        with T.no_grad():
            for idx, (images, cond) in zip(_eval_batches(len(val_y), schedule.batch_size), val_inputs):
                total += float(T.mse_loss(den(images, cond), Tensor(val_x[idx])).data) * len(idx)
        return total / len(val_y)

    state = OptimizerState.adam(schedule.lr)
    res = _run_stage(den, state, schedule, len(data.train_images), batch_loss, val_loss, rng, epoch_hook, name=f"D{i}")
    _verify_frozen(frozen, cascade, den)
    return Checkpoint("D", i, den.state_dict(), seed=seed, metrics=_result_metrics(res))


def train_joint(cascade: CascadeParams, data: TrainingData, schedule: StageSchedule, seed: int) -> Checkpoint:
    """Train the whole cascade end to end with cross-entropy on its final segmenter only."""
    if cascade.tail_seg is None:
        raise ConfigurationError("joint training needs a trailing segmenter")
    rng = np.random.default_rng(seed)
    cache: dict[str, np.ndarray] = {}
    dt = data.dtype

    def epoch_hook(epoch):
        cache["y"] = data.noisy_train(epoch)

    def forward_logits(y: np.ndarray, lab: np.ndarray) -> Tensor:
        _, den = cascade_forward(CascadeParams(cascade.blocks), Tensor(y), labels=lab)
        return cascade.tail_seg.logits(den[-1])

    def batch_loss(batch, epoch, rng):
        y, lab = _crop([cache["y"][batch], data.train_labels[batch]], schedule.patch_size, rng)
        return T.cross_entropy_loss(forward_logits(y, lab), lab)

    val_y = data.noisy_val()

    def val_loss():
        total, count = 0.0, 0
        with T.no_grad():
            for idx in _eval_batches(len(val_y), schedule.batch_size):
                lab = data.val_labels[idx]
                valid = int((lab != T.IGNORE_LABEL).sum())
                total += float(T.cross_entropy_loss(forward_logits(val_y[idx], lab), lab).data) * valid
                count += valid
        return total / max(count, 1)

    state = OptimizerState.adam(schedule.lr)
    res = _run_stage(cascade, state, schedule, len(data.train_images), batch_loss, val_loss, rng, epoch_hook, name="joint")
    return Checkpoint("J", cascade.n + 1, cascade.state_dict(), seed=seed, metrics=_result_metrics(res))
