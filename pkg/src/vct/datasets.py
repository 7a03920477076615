"""Procedural ground-truth-factor datasets.

``MiniShapes`` renders a single anti-aliased shape on a flat background from six
discrete factors. ``MiniScene`` renders 0-4 objects with per-pixel instance ids
for decomposition scoring. Both are pure functions of their labels / seeds, so
every batch can be replayed exactly from ``(seed, epoch, step)``.
"""
from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SHAPES = ("square", "circle", "triangle")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class FactorSpec:
    """Ordered ``(name, cardinality)`` pairs describing a factor grid."""

    factors: tuple[tuple[str, int], ...] = (
        ("shape", 3),
        ("object_hue", 8),
        ("scale", 4),
        ("pos_x", 8),
        ("pos_y", 8),
        ("background_hue", 4),
    )

    def __post_init__(self):
        for name, card in self.factors:
            if card < 2:
                raise ValueError(f"factor {name!r} needs cardinality >= 2, got {card}")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.factors]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([c for _, c in self.factors], dtype=np.int64)

    @property
    def num_factors(self) -> int:
        return len(self.factors)

    @property
    def num_combinations(self) -> int:
        return int(np.prod(self.sizes))

    def index_of(self, name: str) -> int:
        return self.names.index(name)

    def validate(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels)
        if labels.shape[-1] != self.num_factors:
            raise ValueError(f"expected {self.num_factors} factor values, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("factor labels must be integers")
        if np.any(labels < 0) or np.any(labels >= self.sizes):
            raise ValueError(f"factor labels out of range for cardinalities {self.sizes.tolist()}")
        return labels.astype(np.int64)

    def labels_from_index(self, index: np.ndarray) -> np.ndarray:
        """Mixed-radix decode of flat combination indices (last factor fastest)."""
        return np.stack(np.unravel_index(np.asarray(index), tuple(self.sizes)), axis=-1).astype(np.int64)

    def index_from_labels(self, labels: np.ndarray) -> np.ndarray:
        labels = self.validate(labels)
        return np.ravel_multi_index(tuple(labels.T), tuple(self.sizes))


def hue_rgb(hue: float, saturation: float = 0.9, value: float = 0.95) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, saturation, value), dtype=np.float64)


def object_color(index: int, count: int) -> np.ndarray:
    return hue_rgb(index / count)


def background_color(index: int, count: int) -> np.ndarray:
    # Offset by half an object-hue step and desaturated so the background can
    # never coincide with any object colour.
    return hue_rgb(index / count + 1.0 / 16.0, saturation=0.35, value=0.55)


def _inside(shape: str, px: np.ndarray, py: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    dx, dy = px - cx, py - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        half = r * 0.85
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if shape == "triangle":
        # Upward-pointing equilateral triangle with circumradius 1.15 r
        # (image y grows downward).
        R = r * 1.15
        verts = [(0.0, -R), (-R * np.sqrt(3) / 2, R / 2), (R * np.sqrt(3) / 2, R / 2)]
        inside = np.ones_like(dx, dtype=bool)
        for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
            cross = (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0)
            inside &= cross <= 0
        return inside
    raise ValueError(f"unknown shape {shape!r}")


@lru_cache(maxsize=4096)
def coverage(shape: str, cx: float, cy: float, radius: float, size: int) -> np.ndarray:
    """Fractional pixel coverage of a shape, by 4x4 supersampling.

    Coordinates are in units of the canvas side (0..1). The returned array is
    read-only and cached.
    """
    offsets = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    grid = (np.arange(size)[:, None] + offsets[None, :]).reshape(-1) / size
    py, px = np.meshgrid(grid, grid, indexing="ij")
    hits = _inside(shape, px, py, cx, cy, radius)
    cov = hits.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    cov.setflags(write=False)
    return cov


class MiniShapes:
    """Single-object dataset over the full cartesian product of six factors."""

    scales = (0.10, 0.135, 0.17, 0.205)

    def __init__(self, image_size: int = 64, spec: FactorSpec | None = None):
        self.image_size = image_size
        self.spec = spec or FactorSpec()
        if self.spec.names != FactorSpec().names:
            raise ValueError("MiniShapes renders the default six-factor layout only")
        sizes = self.spec.sizes
        self._positions_x = np.linspace(0.27, 0.73, sizes[3])
        self._positions_y = np.linspace(0.27, 0.73, sizes[4])
        self._scales = np.linspace(self.scales[0], self.scales[-1], sizes[2])

    def __len__(self) -> int:
        return self.spec.num_combinations

    @property
    def num_factors(self) -> int:
        return self.spec.num_factors

    def object_coverage(self, labels: Sequence[int]) -> np.ndarray:
        shape, _, scale, px, py, _ = (int(v) for v in labels)
        return coverage(
            SHAPES[shape % len(SHAPES)],
            float(self._positions_x[px]),
            float(self._positions_y[py]),
            float(self._scales[scale]),
            self.image_size,
        )

    def render(self, labels: Sequence[int]) -> np.ndarray:
        """Render one image as float32 ``(H, W, 3)`` in [0, 1]."""
        labels = self.spec.validate(np.asarray(labels))
        sizes = self.spec.sizes
        alpha = self.object_coverage(labels)[..., None]
        fg = object_color(int(labels[1]), int(sizes[1]))
        bg = background_color(int(labels[5]), int(sizes[5]))
        img = alpha * fg + (1.0 - alpha) * bg
        return img.astype(np.float32)

    def render_batch(self, labels: np.ndarray) -> np.ndarray:
        labels = self.spec.validate(np.atleast_2d(labels))
        return np.stack([self.render(row) for row in labels])

    def render_index(self, index: np.ndarray) -> np.ndarray:
        return self.render_batch(self.spec.labels_from_index(index))

    def sample_labels(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.stack([rng.integers(0, c, size=size) for c in self.spec.sizes], axis=1)

    def sample_fixed_factor_batch(
        self, factor: int, rng: np.random.Generator, size: int, render: bool = True
    ) -> tuple[np.ndarray | None, np.ndarray]:
        """Sample ``size`` images whose factor ``factor`` shares one random value."""
        labels = sample_fixed_factor_labels(self.spec, factor, rng, size)
        images = self.render_batch(labels) if render else None
        return images, labels


def sample_fixed_factor_labels(spec: FactorSpec, factor: int, rng: np.random.Generator, size: int) -> np.ndarray:
    if not 0 <= factor < spec.num_factors:
        raise ValueError(f"factor index {factor} out of range [0, {spec.num_factors})")
    labels = np.stack([rng.integers(0, c, size=size) for c in spec.sizes], axis=1)
    labels[:, factor] = rng.integers(0, spec.sizes[factor])
    return labels


@dataclass
class SceneObject:
    shape: int
    hue: int
    x: float
    y: float


@dataclass
class SceneSpec:
    """A multi-object scene; objects are drawn in list order (later on top)."""

    objects: list[SceneObject] = field(default_factory=list)
    background_hue: int = 0

    def validate(self, hues: int, backgrounds: int) -> None:
        if len(self.objects) > 4:
            raise ValueError("at most 4 objects per scene")
        if not 0 <= self.background_hue < backgrounds:
            raise ValueError(f"background hue {self.background_hue} out of range")
        for obj in self.objects:
            if not 0 <= obj.shape < len(SHAPES):
                raise ValueError(f"shape index {obj.shape} out of range")
            if not 0 <= obj.hue < hues:
                raise ValueError(f"object hue {obj.hue} out of range")
            if not (0.0 <= obj.x <= 1.0 and 0.0 <= obj.y <= 1.0):
                raise ValueError("object centre must lie inside the canvas")


class MiniScene:
    """Multi-object scenes with instance masks (0 = background)."""

    def __init__(
        self,
        image_size: int = 64,
        min_objects: int = 1,
        max_objects: int = 3,
        radius: float = 0.14,
        hues: int = 8,
        backgrounds: int = 4,
    ):
        if not 0 <= min_objects <= max_objects <= 4:
            raise ValueError("object counts must satisfy 0 <= min <= max <= 4")
        self.image_size = image_size
        self.min_objects = min_objects
        self.max_objects = max_objects
        self.radius = radius
        self.hues = hues
        self.backgrounds = backgrounds

    def render(self, spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
        spec.validate(self.hues, self.backgrounds)
        size = self.image_size
        bg = background_color(spec.background_hue, self.backgrounds)
        img = np.broadcast_to(bg, (size, size, 3)).astype(np.float64)
        mask = np.zeros((size, size), dtype=np.uint8)
        for k, obj in enumerate(spec.objects, start=1):
            alpha = coverage(SHAPES[obj.shape], float(obj.x), float(obj.y), self.radius, size)
            img = alpha[..., None] * object_color(obj.hue, self.hues) + (1.0 - alpha[..., None]) * img
            mask[alpha >= 0.5] = k
        return img.astype(np.float32), mask

    def sample_spec(self, rng: np.random.Generator) -> SceneSpec:
        k = int(rng.integers(self.min_objects, self.max_objects + 1))
        lo, hi = self.radius + 0.02, 1.0 - self.radius - 0.02
        # Snap centres to a 1/64 lattice so scenes are exactly reproducible.
        objects = [
            SceneObject(
                shape=int(rng.integers(0, len(SHAPES))),
                hue=int(rng.integers(0, self.hues)),
                x=float(np.round(rng.uniform(lo, hi) * 64) / 64),
                y=float(np.round(rng.uniform(lo, hi) * 64) / 64),
            )
            for _ in range(k)
        ]
        return SceneSpec(objects=objects, background_hue=int(rng.integers(0, self.backgrounds)))

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray, list[SceneSpec]]:
        specs = [self.sample_spec(rng) for _ in range(size)]
        rendered = [self.render(s) for s in specs]
        images = np.stack([r[0] for r in rendered])
        masks = np.stack([r[1] for r in rendered])
        return images, masks, specs


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded shuffle of ``range(n)`` for one epoch (Fisher-Yates via numpy)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def shapes_batch_indices(n: int, seed: int, batch_size: int, step: int) -> np.ndarray:
    """Indices of global step ``step``; incomplete trailing batches are dropped."""
    steps_per_epoch = n // batch_size
    if steps_per_epoch == 0:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
    epoch, offset = divmod(step, steps_per_epoch)
    perm = epoch_permutation(n, seed, epoch)
    return perm[offset * batch_size:(offset + 1) * batch_size]


def dataset_iter(dataset, seed: int, batch_size: int, start_step: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless deterministic batch stream, replayable from any step.

    Yields ``(images, labels)``; for ``MiniScene`` the labels are instance masks.
    """
    step = start_step
    while True:
        yield batch_at(dataset, seed, batch_size, step)
        step += 1


def batch_at(dataset, seed: int, batch_size: int, step: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, MiniShapes):
        idx = shapes_batch_indices(len(dataset), seed, batch_size, step)
        labels = dataset.spec.labels_from_index(idx)
        return dataset.render_batch(labels), labels
    if isinstance(dataset, MiniScene):
        images, masks, _ = dataset.sample(np.random.default_rng([seed, 0, step]), batch_size)
        return images, masks
    raise TypeError(f"unsupported dataset {type(dataset).__name__}")


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def image_digest(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()


def export_dataset(
    dataset,
    out_dir: str | Path,
    seed: int = 0,
    count: int | None = None,
    extra: dict[str, str] | None = None,
) -> Path:
    """Write ``manifest.txt``, ``images.bin`` (8-bit HWC records) and ``labels.txt``.

    MiniShapes exports combinations in seeded shuffled order; MiniScene exports
    ``count`` sampled scenes and writes instance masks to ``masks.bin``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = dataset.image_size
    lines = [f"{k} = {v}" for k, v in (extra or {}).items()]
    lines += [f"image_size = {size}", "channels = 3", f"seed = {seed}", "byte_order = little", "layout = HWC uint8"]
    if isinstance(dataset, MiniShapes):
        n = len(dataset) if count is None else min(count, len(dataset))
        order = epoch_permutation(len(dataset), seed, 0)[:n]
        labels = dataset.spec.labels_from_index(order)
        lines += ["kind = minishapes", f"count = {n}"]
        lines += [f"factor = {name} {card}" for name, card in dataset.spec.factors]
        with open(out / "images.bin", "wb") as fh:
            for start in range(0, n, 512):
                fh.write(to_uint8(dataset.render_batch(labels[start:start + 512])).tobytes())
        with open(out / "labels.txt", "w") as fh:
            for row in labels:
                fh.write(" ".join(str(int(v)) for v in row) + "\n")
    elif isinstance(dataset, MiniScene):
        n = 1000 if count is None else count
        images, masks, specs = dataset.sample(np.random.default_rng([seed, 0, 0]), n)
        lines += ["kind = miniscene", f"count = {n}", f"objects = {dataset.min_objects}..{dataset.max_objects}"]
        (out / "images.bin").write_bytes(to_uint8(images).tobytes())
        (out / "masks.bin").write_bytes(masks.astype(np.uint8).tobytes())
        with open(out / "labels.txt", "w") as fh:
            for s in specs:
                fh.write(" ".join([str(s.background_hue), str(len(s.objects))]
                                  + [f"{o.shape} {o.hue} {o.x:.6f} {o.y:.6f}" for o in s.objects]) + "\n")
    else:
        raise TypeError(f"unsupported dataset {type(dataset).__name__}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


def load_exported_images(out_dir: str | Path) -> np.ndarray:
    out = Path(out_dir)
    manifest = dict(
        line.split(" = ", 1) for line in (out / "manifest.txt").read_text().splitlines() if " = " in line
    )
    size, n = int(manifest["image_size"]), int(manifest["count"])
    raw = np.frombuffer((out / "images.bin").read_bytes(), dtype=np.uint8)
    return raw.reshape(n, size, size, 3)
