"""Synthetic labelled shapes dataset, PNG I/O and manifests.

Each sample is a textured background with one to three non-overlapping
textured shapes. Every class owns a fixed sinusoidal texture (frequency and
orientation below) so a small receptive field can tell classes apart even
though shape colours are random.

Directory layout::

    <root>/clean/<index>.png     8-bit RGB
    <root>/labels/<index>.png    8-bit grayscale class ids (255 = ignore)
    <root>/manifest.txt          all samples
    <root>/train.txt, test.txt   split manifests

Manifest schema (UTF-8 text, one record per line)::

    # sdabn-manifest v1
    # split: <name>
    # seed: <generator seed>
    # classes: <N>
    # class_names: <comma separated>
    <index>\t<clean path>\t<label path>

Paths are relative to the manifest's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigurationError, DataError, UsageError
from .noise import derive_seed

IGNORE_LABEL = 255
SHAPE_KINDS = ("circle", "rectangle", "triangle", "diamond", "cross")
MAX_CLASSES = len(SHAPE_KINDS) + 1

# per class: (spatial frequency in cycles/pixel, orientation in radians); class 0 is background
TEXTURES = (
    (0.06, 0.0),
    (0.25, 0.0),
    (0.25, np.pi / 2),
    (0.18, np.pi / 4),
    (0.35, 3 * np.pi / 4),
    (0.12, np.pi / 3),
)
TEXTURE_AMPLITUDE = 0.22


def class_names(n_classes: int) -> list[str]:
    return ["background", *SHAPE_KINDS[: n_classes - 1]]


def _texture(cls: int, yy: np.ndarray, xx: np.ndarray, phase: float) -> np.ndarray:
    freq, theta = TEXTURES[cls]
    return np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


def _shape_mask(kind: str, yy, xx, cy: float, cx: float, r: float, rot: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    # rotate into the shape frame
    u = dx * np.cos(rot) + dy * np.sin(rot)
    v = -dx * np.sin(rot) + dy * np.cos(rot)
    if kind == "rectangle":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.7 * r)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= r
    if kind == "cross":
        arm = 0.35 * r
        return ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))
    if kind == "triangle":
        # equilateral; circumradius enlarged so its area is comparable to the other kinds
        r = 1.35 * r
        inside = v <= r / 2
        for ang in (2 * np.pi / 3, 4 * np.pi / 3):
            vv = -u * np.sin(ang) + v * np.cos(ang)
            inside &= vv <= r / 2
        return inside
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def render_sample(index: int, size: int, n_classes: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image HxWx3 in [0,1], labels HxW uint8)`` for one sample index."""
    if not 2 <= n_classes <= MAX_CLASSES:
        raise ConfigurationError(f"n_classes must be in [2, {MAX_CLASSES}], got {n_classes}")
    rng = np.random.default_rng(derive_seed(seed, index))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    c0, c1 = rng.uniform(0.3, 0.7, size=(2, 3))
    ang = rng.uniform(0, 2 * np.pi)
    ramp = ((xx * np.cos(ang) + yy * np.sin(ang)) / size + 1) / 2
    base = c0 + (c1 - c0) * ramp[..., None]
    tex = _texture(0, yy, xx, rng.uniform(0, 2 * np.pi))
    image = base + 0.5 * TEXTURE_AMPLITUDE * tex[..., None]
    labels = np.zeros((size, size), dtype=np.uint8)

    wanted = int(rng.integers(1, 4))
    placed: list[tuple[float, float, float]] = []
    for _ in range(60):
        if len(placed) == wanted:
            break
        r = rng.uniform(0.17, 0.28) * size
        cy, cx = rng.uniform(r * 0.7, size - r * 0.7, size=2)
        if any(np.hypot(cy - py, cx - px) < r + pr + 2 for py, px, pr in placed):
            continue
        cls = int(rng.integers(1, n_classes))
        mask = _shape_mask(SHAPE_KINDS[cls - 1], yy, xx, cy, cx, r, rng.uniform(0, np.pi))
        if mask.sum() < 12:
            continue
        color = rng.uniform(0.25, 0.75, size=3)
        shade = color + TEXTURE_AMPLITUDE * _texture(cls, yy, xx, rng.uniform(0, 2 * np.pi))[..., None]
        image = np.where(mask[..., None], shade, image)
        labels[mask] = cls
        placed.append((cy, cx, r))
    image = np.clip(image, 0.0, 1.0)
    return quantize(image), labels


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so images round-trip through PNG exactly."""
    return encode_bytes(img).astype(np.float64) / 255.0


def encode_bytes(img: np.ndarray) -> np.ndarray:
    # round half up
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


# --------------------------------------------------------------------------
# PNG I/O


def save_image(img: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    arr = encode_bytes(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ConfigurationError(f"save_image expects HxWx3, got {arr.shape}")
    try:
        PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            if im.mode != "RGB":
                raise DataError(f"{path}: expected 8-bit RGB PNG, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except DataError:
        raise
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from exc
    return arr.astype(np.float64) / 255.0


def save_labels(labels: np.ndarray, path: str | Path) -> None:
    PILImage.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(Path(path), format="PNG")


def load_labels(path: str | Path, n_classes: int | None = None) -> np.ndarray:
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            if im.mode != "L":
                raise DataError(f"{path}: expected 8-bit grayscale PNG, got mode {im.mode}")
            arr = np.array(im, dtype=np.uint8)
    except DataError:
        raise
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable label map ({exc})") from exc
    if n_classes is not None:
        bad = (arr >= n_classes) & (arr != IGNORE_LABEL)
        if bad.any():
            raise DataError(f"{path}: label {int(arr[bad][0])} outside [0, {n_classes})")
    return arr


def save_color_labels(labels: np.ndarray, path: str | Path) -> None:
    """Colour-coded segmentation dump using :data:`PALETTE`."""
    lab = np.asarray(labels, dtype=np.intp)
    PILImage.fromarray(PALETTE[np.minimum(lab, len(PALETTE) - 1)], mode="RGB").save(Path(path), format="PNG")


# background, circle, rectangle, triangle, diamond, cross, ..., ignore
PALETTE = np.zeros((256, 3), dtype=np.uint8)
PALETTE[:6] = [(0, 0, 0), (230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180)]
PALETTE[IGNORE_LABEL] = (255, 255, 255)


# --------------------------------------------------------------------------
# manifests


@dataclass
class DatasetManifest:
    split: str
    root: Path
    seed: int
    n_classes: int
    class_names: list[str]
    entries: list[tuple[int, str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def indices(self) -> list[int]:
        return [e[0] for e in self.entries]

    def paths(self, i: int) -> tuple[Path, Path]:
        _, img, lab = self.entries[i]
        return self.root / img, self.root / lab

    def subset(self, split: str, indices) -> "DatasetManifest":
        keep = set(int(i) for i in indices)
        return DatasetManifest(
            split, self.root, self.seed, self.n_classes, list(self.class_names),
            [e for e in self.entries if e[0] in keep],
        )

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        lines = [
            "# sdabn-manifest v1",
            f"# split: {self.split}",
            f"# seed: {self.seed}",
            f"# classes: {self.n_classes}",
            f"# class_names: {','.join(self.class_names)}",
        ]
        lines += [f"{idx}\t{img}\t{lab}" for idx, img, lab in self.entries]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"{path}: cannot read manifest ({exc})") from exc
        header: dict[str, str] = {}
        entries = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                if ":" in line:
                    k, v = line[1:].split(":", 1)
                    header[k.strip()] = v.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{n}: expected 3 tab-separated fields")
            entries.append((int(parts[0]), parts[1], parts[2]))
        try:
            return cls(
                header["split"], path.parent, int(header["seed"]), int(header["classes"]),
                header["class_names"].split(","), entries,
            )
        except KeyError as exc:
            raise DataError(f"{path}: missing header field {exc}") from None


def generate_dataset(count: int, size: int, n_classes: int, seed: int, out_dir: str | Path) -> DatasetManifest:
    if count < 1:
        raise ConfigurationError("count must be at least 1")
    if size % 4 or size < 8:
        raise ConfigurationError(f"size must be a multiple of 4 and >= 8, got {size}")
    out = Path(out_dir)
    try:
        (out / "clean").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    manifest = DatasetManifest("all", out, seed, n_classes, class_names(n_classes))
    for idx in range(count):
        img, lab = render_sample(idx, size, n_classes, seed)
        rel_img, rel_lab = f"clean/{idx:05d}.png", f"labels/{idx:05d}.png"
        save_image(img, out / rel_img)
        save_labels(lab, out / rel_lab)
        manifest.entries.append((idx, rel_img, rel_lab))
    manifest.write(out / "manifest.txt")
    return manifest


def split_dataset(manifest: DatasetManifest, train_fraction: float, seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    if not 0 < train_fraction < 1:
        raise UsageError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(manifest)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise UsageError(f"split of {n} samples at {train_fraction} leaves one side empty")
    order = np.random.default_rng(derive_seed(seed, 0x5b17)).permutation(manifest.indices)
    train = manifest.subset("train", order[:n_train])
    test = manifest.subset("test", order[n_train:])
    return train, test


def load_arrays(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack a manifest into ``(images N×3×H×W, labels N×H×W, indices N)``."""
    imgs, labs = [], []
    for i in range(len(manifest)):
        ip, lp = manifest.paths(i)
        imgs.append(load_image(ip).transpose(2, 0, 1))
        labs.append(load_labels(lp, manifest.n_classes))
    return np.stack(imgs), np.stack(labs), np.asarray(manifest.indices, dtype=np.int64)
