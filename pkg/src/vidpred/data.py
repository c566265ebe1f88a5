"""Video sequence datasets: directory loading, synthetic sprites, window sampling."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .predictor import FrameSequence

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class TransformSpec:
    """Rescale the shorter side to ``target_size`` (bilinear), then crop a square.

    One crop rectangle is drawn per window and shared by every frame in it.
    Without ``random_crop`` the crop is centred.
    """

    target_size: int | None = None
    random_crop: bool = False
    seed: int = 0


class _LazySequence:
    """Ordered image files decoded on access."""

    def __init__(self, paths: list[Path], channels: int):
        self.paths = paths
        self.channels = channels

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, idx) -> np.ndarray:
        paths = self.paths[idx]
        if isinstance(paths, Path):
            return read_image(paths, self.channels)
        return np.stack([read_image(p, self.channels) for p in paths])


def read_image(path: Path, channels: int = 3) -> np.ndarray:
    """Decode an image file to a ``C x H x W`` float32 array in [0, 1]."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB" if channels == 3 else "L")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def write_image(path, frame) -> None:
    """Write a ``C x H x W`` array in [0, 1] as an 8-bit PNG."""
    arr = np.asarray(frame.detach().cpu() if torch.is_tensor(frame) else frame)
    arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0))
    img.save(path)


@dataclass
class SequenceDataset:
    """Sequences are ``T x C x H x W`` arrays or lazily decoded image lists."""

    sequences: list
    window_length: int
    transform: TransformSpec = field(default_factory=TransformSpec)
    names: list[str] | None = None

    def __post_init__(self):
        if self.window_length < 1:
            raise ValueError("window_length must be positive")
        for i, seq in enumerate(self.sequences):
            if len(seq) < self.window_length:
                raise ValueError(
                    f"sequence {i} has {len(seq)} frames, fewer than window_length {self.window_length}"
                )
        if self.names is None:
            self.names = [f"seq{i:04d}" for i in range(len(self.sequences))]

    def __len__(self) -> int:
        return len(self.sequences)

    def num_windows(self) -> int:
        return sum(len(s) - self.window_length + 1 for s in self.sequences)

    def window_starts(self) -> list[tuple[int, int]]:
        return [(i, t) for i, s in enumerate(self.sequences)
                for t in range(len(s) - self.window_length + 1)]

    def with_window_length(self, window_length: int) -> "SequenceDataset":
        return SequenceDataset(self.sequences, window_length, self.transform, self.names)


def load_directory_dataset(root, window_length: int, transform: TransformSpec | None = None,
                           channels: int = 3) -> SequenceDataset:
    """Load ``root/<sequence>/<index>.<ext>`` frames ordered by numeric index.

    Sequences shorter than ``window_length`` are skipped with a warning.
    Image sizes must agree within a sequence.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    seq_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    sequences, names = [], []
    for seq_dir in seq_dirs:
        files = [p for p in seq_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES]
        numbered = []
        for p in files:
            m = re.search(r"(\d+)$", p.stem)
            if m is None:
                raise ValueError(f"frame file without numeric index: {p}")
            numbered.append((int(m.group(1)), p))
        paths = [p for _, p in sorted(numbered)]
        if len(paths) < window_length:
            log.warning("skipping %s: %d frames < window length %d", seq_dir, len(paths), window_length)
            continue
        sizes = set()
        for p in paths:
            try:
                with Image.open(p) as img:
                    sizes.add(img.size)
            except OSError as exc:
                raise OSError(f"cannot read image {p}: {exc}") from exc
        if len(sizes) > 1:
            raise ValueError(f"sequence {seq_dir} mixes image sizes {sorted(sizes)}")
        sequences.append(_LazySequence(paths, channels))
        names.append(seq_dir.name)
    if not sequences:
        raise ValueError(f"no usable sequences under {root}")
    return SequenceDataset(sequences, window_length, transform or TransformSpec(), names)


def write_directory_dataset(dataset: SequenceDataset, root) -> Path:
    """Write every sequence as zero-padded PNG frames under ``root``."""
    root = Path(root)
    for name, seq in zip(dataset.names, dataset.sequences):
        seq_dir = root / name
        seq_dir.mkdir(parents=True, exist_ok=True)
        for t in range(len(seq)):
            write_image(seq_dir / f"{t:05d}.png", seq[t])
    return root


# -- synthetic sprites ---------------------------------------------------

@dataclass
class Sprite:
    shape: str  # "square", "circle" or "diamond"
    color: tuple[float, ...]
    radius: float
    position: tuple[float, float]  # (x, y) centre in pixels
    velocity: tuple[float, float]  # pixels per frame


def _mask(shape: str, xs, ys, cx, cy, r):
    dx, dy = xs - cx, ys - cy
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown sprite shape {shape!r}")


def render_sprites(sprites: list[Sprite], length: int, size: int, channels: int = 3,
                   background: float = 0.0, bounce: bool = True) -> np.ndarray:
    """Render constant-velocity sprites, reflecting off the image border.

    Later sprites are drawn on top. Returns ``length x C x size x size``.
    """
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    frames = np.full((length, channels, size, size), background, dtype=np.float32)
    state = [[*s.position, *s.velocity] for s in sprites]
    for t in range(length):
        for sprite, st in zip(sprites, state):
            m = _mask(sprite.shape, xs, ys, st[0], st[1], sprite.radius)
            for c in range(channels):
                frames[t, c][m] = sprite.color[c % len(sprite.color)]
        for sprite, st in zip(sprites, state):
            for axis in (0, 1):
                st[axis] += st[axis + 2]
                lo, hi = sprite.radius, size - 1 - sprite.radius
                if bounce and st[axis] < lo:
                    st[axis], st[axis + 2] = 2 * lo - st[axis], -st[axis + 2]
                elif bounce and st[axis] > hi:
                    st[axis], st[axis + 2] = 2 * hi - st[axis], -st[axis + 2]
    return frames


@dataclass(frozen=True)
class SyntheticSpec:
    num_sequences: int = 8
    length: int = 20
    size: int = 32
    num_sprites: int = 2
    max_speed: float = 2.0
    min_radius: float = 3.0
    max_radius: float = 6.0
    channels: int = 3
    seed: int = 0
    shapes: tuple[str, ...] = ("square", "circle", "diamond")

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.size < 16:
            raise ValueError(f"synthetic size must be >= 16, got {self.size}")
        if self.num_sequences < 1 or self.length < 1 or self.num_sprites < 0:
            raise ValueError("num_sequences and length must be positive, num_sprites nonnegative")
        if not 0 < self.min_radius <= self.max_radius or 2 * self.max_radius + 2 >= self.size:
            raise ValueError("sprite radii must satisfy 0 < min <= max and fit inside the frame")
        if self.max_speed < 0:
            raise ValueError("max_speed must be nonnegative")


def random_sprites(spec: SyntheticSpec, rng: np.random.Generator) -> list[Sprite]:
    sprites = []
    for _ in range(spec.num_sprites):
        r = rng.uniform(spec.min_radius, spec.max_radius)
        pos = tuple(rng.uniform(r, spec.size - 1 - r, size=2))
        angle = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(0.5 * spec.max_speed, spec.max_speed)
        color = tuple(rng.uniform(0.3, 1.0, size=spec.channels))
        sprites.append(Sprite(str(rng.choice(spec.shapes)), color, r, pos,
                              (speed * math.cos(angle), speed * math.sin(angle))))
    return sprites


def make_synthetic_dataset(spec: SyntheticSpec, window_length: int | None = None,
                           transform: TransformSpec | None = None) -> SequenceDataset:
    """Bouncing geometric sprites; identical output for identical ``spec``."""
    window_length = spec.length if window_length is None else window_length
    if spec.length < window_length:
        raise ValueError(f"length {spec.length} shorter than window_length {window_length}")
    rng = np.random.default_rng(spec.seed)
    sequences = [
        render_sprites(random_sprites(spec, rng), spec.length, spec.size, spec.channels)
        for _ in range(spec.num_sequences)
    ]
    return SequenceDataset(sequences, window_length, transform or TransformSpec())


# -- windows ---------------------------------------------------------------

def crop_rectangle(height: int, width: int, transform: TransformSpec,
                   key: tuple[int, ...]) -> tuple[int, int, int, int]:
    """Crop box ``(top, left, out_h, out_w)`` in the rescaled frame.

    The random
    offset is drawn from a generator keyed on ``(seed, *key)`` so each window
    gets its own reproducible stream.
    """
    size = transform.target_size
    if size is None:
        return 0, 0, height, width
    if transform.random_crop:
        rng = np.random.default_rng([transform.seed, *key])
        top = int(rng.integers(0, height - size + 1))
        left = int(rng.integers(0, width - size + 1))
    else:
        top, left = (height - size) // 2, (width - size) // 2
    return top, left, size, size


def _rescaled_shape(h: int, w: int, target: int | None) -> tuple[int, int]:
    if target is None:
        return h, w
    scale = target / min(h, w)
    return max(target, round(h * scale)), max(target, round(w * scale))


def sample_window(dataset: SequenceDataset, seq_index: int, start: int,
                  epoch: int = 0, return_rect: bool = False):
    """Contiguous ``window_length`` frames, rescaled and jointly cropped."""
    if not 0 <= seq_index < len(dataset):
        raise IndexError(f"sequence index {seq_index} out of range [0, {len(dataset)})")
    seq = dataset.sequences[seq_index]
    if not 0 <= start <= len(seq) - dataset.window_length:
        raise IndexError(
            f"start {start} out of range for sequence of {len(seq)} frames and window {dataset.window_length}"
        )
    frames = torch.from_numpy(np.ascontiguousarray(seq[start:start + dataset.window_length]))
    h, w = frames.shape[-2:]
    tf = dataset.transform
    rh, rw = _rescaled_shape(h, w, tf.target_size)
    if (rh, rw) != (h, w):
        frames = F.interpolate(frames, size=(rh, rw), mode="bilinear", align_corners=False)
        frames = frames.clamp(0.0, 1.0)
    rect = crop_rectangle(rh, rw, tf, (seq_index, start, epoch))
    top, left, oh, ow = rect
    frames = frames[..., top:top + oh, left:left + ow].contiguous()
    out = FrameSequence(frames)
    return (out, rect) if return_rect else out
