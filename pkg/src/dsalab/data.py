"""Synthetic images with a controllable spurious cue.

Each image carries two cues:

* the target cue ``y``: a light cross (y=1) or a filled square (y=0) drawn
  centred in one randomly chosen patch other than the spurious ones;
* the sensitive cue ``s``: the top-left patch(es) tinted red (s=1) or blue (s=0);
* distractors: whole patches tinted red or blue independently of ``s`` at
  other positions, so that the cue is defined by position and not by colour.

In the training split ``s == y`` for a fraction ``rho`` of the examples; the
test split is balanced over the four (y, s) cells. Cell membership is assigned
exactly (stratified), not by per-example coin flips, and every example is
rendered from its own generator keyed by (seed, split, index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import formats

TRAIN, TEST = 0, 1

BACKGROUND = 0.3
NOISE_SIGMA = 0.1
# dim enough that the colour corner is the easier cue to learn
SHAPE_VALUE = 0.7
TINT_ON, TINT_OFF = 0.8, 0.2


@dataclass(frozen=True)
class SyntheticExample:
    image: np.ndarray
    y: int
    s: int
    spurious_patch_indices: tuple[int, ...]
    real_patch_indices: tuple[int, ...]


@dataclass
class Dataset:
    """Column-oriented example store; images are kept as f32 (the on-disk precision)."""

    images: np.ndarray
    y: np.ndarray
    s: np.ndarray
    spurious: list[tuple[int, ...]]
    real: list[tuple[int, ...]]

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> SyntheticExample:
        return SyntheticExample(self.images[i], int(self.y[i]), int(self.s[i]),
                                self.spurious[i], self.real[i])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.images.shape == other.images.shape
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.y, other.y) and np.array_equal(self.s, other.s)
                and self.spurious == other.spurious and self.real == other.real)

    @property
    def image_hw(self) -> tuple[int, int]:
        return tuple(self.images.shape[2:])

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.y[idx], self.s[idx],
                       [self.spurious[i] for i in idx], [self.real[i] for i in idx])

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(np.asarray(images, dtype=np.float32), self.y.copy(), self.s.copy(),
                       list(self.spurious), list(self.real))

    @classmethod
    def empty(cls, channels: int = 3, image_hw=(32, 32)) -> "Dataset":
        return cls(np.zeros((0, channels) + tuple(image_hw), dtype=np.float32),
                   np.zeros(0, np.int64), np.zeros(0, np.int64), [], [])


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 2000
    n_test: int = 1000
    rho: float = 0.95
    seed: int = 0
    image_hw: tuple[int, int] = (32, 32)
    channels: int = 3
    patch_size: int = 8
    spurious_patches: int = 1
    distractors: int = 1

    def __post_init__(self):
        if not 0.5 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0.5, 1], got {self.rho}")
        if self.channels != 3:
            raise ValueError("the colour cue needs 3 channels")
        h, w = self.image_hw
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image {h}x{w} not divisible by patch_size {self.patch_size}")
        if self.distractors < 0:
            raise ValueError("distractors must be >= 0")
        if not 1 <= self.spurious_patches < (h // self.patch_size) * (w // self.patch_size):
            raise ValueError("spurious_patches must leave room for the target cue")
        for shape in (CROSS, SQUARE):
            if max(shape.shape) > self.patch_size:
                raise ValueError(f"a {shape.shape[0]}x{shape.shape[1]} shape does not fit in a "
                                 f"{self.patch_size}x{self.patch_size} patch")


def example_rng(seed: int, split: int, index: int) -> np.random.Generator:
    # Philox is counter-based: the key fixes the stream, independent of call order
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), (split << 32) | index]))


def _cell_counts(n: int, agree_frac: float) -> dict[tuple[int, int], int]:
    """Exact (y, s) cell sizes: ``round(agree_frac * n)`` examples with s == y, y balanced."""
    n_agree = int(round(agree_frac * n))
    n_conf = n - n_agree
    counts = {
        (0, 0): n_agree // 2, (1, 1): n_agree - n_agree // 2,
        (0, 1): n_conf - n_conf // 2, (1, 0): n_conf // 2,
    }
    return counts


def _labels(n: int, agree_frac: float, seed: int, split: int) -> tuple[np.ndarray, np.ndarray]:
    cells = _cell_counts(n, agree_frac)
    y = np.concatenate([np.full(c, cy) for (cy, cs), c in cells.items()]).astype(np.int64)
    s = np.concatenate([np.full(c, cs) for (cy, cs), c in cells.items()]).astype(np.int64)
    perm = example_rng(seed, split, 0xFFFFFFFF).permutation(n)
    return y[perm], s[perm]


# thin 7x7 cross (13 px) vs filled 6x6 square (36 px)
CROSS = np.zeros((7, 7), dtype=bool)
CROSS[3, :] = True
CROSS[:, 3] = True
SQUARE = np.ones((6, 6), dtype=bool)


def spurious_indices(spec: DatasetSpec) -> tuple[int, ...]:
    return tuple(range(spec.spurious_patches))


def render(spec: DatasetSpec, y: int, s: int, rng: np.random.Generator) -> SyntheticExample:
    c = spec.channels
    h, w = spec.image_hw
    p = spec.patch_size
    gh, gw = h // p, w // p
    img = np.full((c, h, w), BACKGROUND)
    spur = spurious_indices(spec)
    for j in spur:
        r0, c0 = (j // gw) * p, (j % gw) * p
        tint = (TINT_ON, TINT_OFF, TINT_OFF) if s == 1 else (TINT_OFF, TINT_OFF, TINT_ON)
        img[:, r0:r0 + p, c0:c0 + p] = np.asarray(tint)[:, None, None]
    # the shape sits centred in one random free patch; sub-patch jitter makes
    # the cue far harder for a small ViT trained from scratch to pick up
    shape = CROSS if y == 1 else SQUARE
    sh, sw = shape.shape
    free = [j for j in range(gh * gw) if j not in spur]
    target = int(free[rng.integers(len(free))])
    r0 = (target // gw) * p + (p - sh + 1) // 2
    c0 = (target % gw) * p + (p - sw + 1) // 2
    img[:, r0:r0 + sh, c0:c0 + sw][:, shape] = SHAPE_VALUE
    real = [target]
    # whole patches tinted like the cue but at random other positions, independent of s
    free = [j for j in free if j != target]
    for j in rng.permutation(free)[:spec.distractors]:
        tint = (TINT_ON, TINT_OFF, TINT_OFF) if rng.integers(0, 2) else (TINT_OFF, TINT_OFF, TINT_ON)
        r0, c0 = (j // gw) * p, (j % gw) * p
        img[:, r0:r0 + p, c0:c0 + p] = np.asarray(tint)[:, None, None]
    img = np.clip(img + rng.normal(0.0, NOISE_SIGMA, img.shape), 0.0, 1.0)
    return SyntheticExample(img.astype(np.float32), int(y), int(s), spur, tuple(real))


def _build(spec: DatasetSpec, n: int, agree_frac: float, split: int) -> Dataset:
    if n == 0:
        return Dataset.empty(spec.channels, spec.image_hw)
    y, s = _labels(n, agree_frac, spec.seed, split)
    examples = [render(spec, y[i], s[i], example_rng(spec.seed, split, i)) for i in range(n)]
    return Dataset(np.stack([e.image for e in examples]), y, s,
                   [e.spurious_patch_indices for e in examples],
                   [e.real_patch_indices for e in examples])


def generate(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Build the (train, test) splits described by ``spec``; test is always balanced."""
    return _build(spec, spec.n_train, spec.rho, TRAIN), _build(spec, spec.n_test, 0.5, TEST)


def write_dataset(path, data: Dataset) -> None:
    formats.write_bytes(path, formats.encode_dataset(data.images, data.y, data.s, data.spurious, data.real))


def read_dataset(path) -> Dataset:
    images, y, s, spurious, real = formats.decode_dataset(formats.read_bytes(path), what=str(path))
    return Dataset(images, y, s, spurious, real)


def corner_oracle(data: Dataset, patch_size: int = 8) -> np.ndarray:
    """Predict ``s`` from the mean red-minus-blue of the top-left patch."""
    corner = data.images[:, :, :patch_size, :patch_size].astype(np.float64)
    return (corner[:, 0].mean(axis=(1, 2)) > corner[:, 2].mean(axis=(1, 2))).astype(np.int64)


def stratified_split(data: Dataset, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (keep, held_out) with ``frac`` of every (y, s) cell held out."""
    rng = np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), 0x56414C]))
    held = []
    for cy in (0, 1):
        for cs in (0, 1):
            cell = np.flatnonzero((data.y == cy) & (data.s == cs))
            k = int(round(frac * len(cell)))
            held.extend(rng.permutation(cell)[:k].tolist())
    held = np.sort(np.asarray(held, dtype=np.int64))
    keep = np.setdiff1d(np.arange(len(data)), held)
    return keep, held
