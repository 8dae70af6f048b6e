"""Resize, deterministic augmentation, grid chunking and per-channel normalisation.

Order of operations: resize -> augment -> chunk -> normalize. Every function is
pure; the noise for an augmented copy depends only on (drawing_type,
source_path, repeat_index), never on call order or batch composition.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from chunkpd import kernels
from chunkpd.dataset import DRAWING_TYPES, DrawingSample
from chunkpd.errors import EmptyImage, SizeMismatch, UnknownDrawingType

TILE_SIDE = 224
ALLOWED_GRIDS = (1, 2, 3)
WHITE = 1.0


@dataclass(frozen=True)
class ChunkGrid:
    n: int = 2

    def __post_init__(self):
        if self.n not in ALLOWED_GRIDS:
            raise ValueError(f"grid side must be one of {ALLOWED_GRIDS}, got {self.n}")

    @property
    def canvas_side(self) -> int:
        return TILE_SIDE * self.n

    def positions(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.n) for c in range(self.n)]


@dataclass(frozen=True)
class AugmentationSpec:
    """Repeat counts per drawing type and the noise level for meander/spiral.

    Circles get ``repeats['circle']`` rotated copies at 360*k/r degrees;
    meanders and spirals get noisy copies.
    """

    repeats: dict = field(default_factory=lambda: {"circle": 4, "meander": 2, "spiral": 2})
    noise_sigma: float = 0.003

    def __post_init__(self):
        missing = set(DRAWING_TYPES) - set(self.repeats)
        if missing:
            raise ValueError(f"repeats missing drawing types {sorted(missing)}")
        for k, v in self.repeats.items():
            if int(v) != v or v < 1:
                raise ValueError(f"repeats[{k!r}] must be a positive integer, got {v}")
        if not (self.noise_sigma >= 0):
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def rotation_angles(self) -> list[float]:
        r = self.repeats["circle"]
        return [360.0 * k / r for k in range(r)]

    def fingerprint(self) -> str:
        blob = json.dumps({"repeats": dict(sorted(self.repeats.items())), "noise_sigma": self.noise_sigma})
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Tile:
    parent_sample_id: str
    repeat_index: int
    grid_pos: tuple[int, int]
    pixels: np.ndarray
    normalized: bool = False
    augmented: bool = False


def resize(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize to side x side (half-pixel centres, edge clamped)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise EmptyImage(f"expected a non-empty H x W x C image, got shape {image.shape}")
    if side < 1:
        raise ValueError(f"side must be positive, got {side}")
    if image.shape[0] == side and image.shape[1] == side:
        return np.array(image, dtype=np.float32)
    return kernels.bilinear_resize(image, side, side)


def rotate(image: np.ndarray, angle_deg: float, fill: float = WHITE) -> np.ndarray:
    """Rotate counter-clockwise (as displayed) about the image centre.

    Multiples of 90 degrees on square images are exact pixel permutations.
    """
    a = angle_deg % 360.0
    if a % 90.0 == 0.0 and image.shape[0] == image.shape[1]:
        return np.ascontiguousarray(np.rot90(image, int(a // 90)), dtype=np.float32)
    t = math.radians(a)
    return kernels.rotate_bilinear(image, math.cos(t), math.sin(t), fill)


def noise_seed(drawing_type: str, source_path: str, repeat_index: int) -> int:
    """First 8 bytes (big-endian) of SHA-256 over 'drawing_type|source_path|repeat_index'."""
    key = f"{drawing_type}|{source_path}|{int(repeat_index)}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def noise_field(drawing_type: str, source_path: str, repeat_index: int, shape: tuple, sigma: float) -> np.ndarray:
    # Philox is counter-based: the stream is a function of the key alone
    gen = np.random.Generator(np.random.Philox(key=noise_seed(drawing_type, source_path, repeat_index)))
    return gen.standard_normal(shape) * sigma


def augment(image: np.ndarray, drawing_type: str, source_path: str, spec: AugmentationSpec) -> list[tuple[int, np.ndarray]]:
    if drawing_type not in DRAWING_TYPES:
        raise UnknownDrawingType(f"unknown drawing type {drawing_type!r}")
    image = np.asarray(image, dtype=np.float32)
    out = []
    if drawing_type == "circle":
        for k, angle in enumerate(spec.rotation_angles()):
            out.append((k, rotate(image, angle, WHITE)))
        return out
    for k in range(spec.repeats[drawing_type]):
        noisy = image + noise_field(drawing_type, source_path, k, image.shape, spec.noise_sigma)
        out.append((k, np.clip(noisy, 0.0, 1.0).astype(np.float32)))
    return out


def chunk(image: np.ndarray, grid: ChunkGrid, parent_sample_id: str = "", repeat_index: int = 0, augmented: bool = False) -> list[Tile]:
    side = grid.canvas_side
    if image.shape[0] != side or image.shape[1] != side:
        raise SizeMismatch(f"canvas is {image.shape[:2]}, grid {grid.n}x{grid.n} needs {side}x{side}")
    return [
        Tile(
            parent_sample_id,
            repeat_index,
            (r, c),
            image[r * TILE_SIDE : (r + 1) * TILE_SIDE, c * TILE_SIDE : (c + 1) * TILE_SIDE].copy(),
            augmented=augmented,
        )
        for r, c in grid.positions()
    ]


def stitch(tiles: list[Tile], grid: ChunkGrid) -> np.ndarray:
    """Inverse of chunk() for row-major tiles."""
    rows = [np.concatenate([t.pixels for t in tiles[r * grid.n : (r + 1) * grid.n]], axis=1) for r in range(grid.n)]
    return np.concatenate(rows, axis=0)


def normalize_channels(pixels: np.ndarray) -> np.ndarray:
    """Divide each channel by its own maximum; all-zero channels are left alone."""
    px = np.asarray(pixels, dtype=np.float32)
    peak = px.reshape(-1, px.shape[-1]).max(axis=0)
    scale = np.where(peak > 0, peak, np.float32(1.0)).astype(np.float32)
    return np.clip(px / scale, 0.0, 1.0).astype(np.float32)


def normalize(tile: Tile) -> Tile:
    if tile.normalized:
        return tile
    return replace(tile, pixels=normalize_channels(tile.pixels), normalized=True)


def canvas(sample: DrawingSample, grid: ChunkGrid, image: np.ndarray | None = None) -> np.ndarray:
    """The resized, normalised whole drawing (input to the drawing-type classifier)."""
    img = sample.load_image() if image is None else image
    return normalize_channels(resize(img, grid.canvas_side))


def run_pipeline(
    sample: DrawingSample,
    grid: ChunkGrid,
    spec: AugmentationSpec,
    augment_enabled: bool,
    image: np.ndarray | None = None,
) -> list[Tile]:
    """Tiles for one sample: n^2 per repeat, r_d repeats when augmenting."""
    img = sample.load_image() if image is None else image
    resized = resize(img, grid.canvas_side)
    if augment_enabled:
        copies = augment(resized, sample.drawing_type, sample.source_path, spec)
    else:
        copies = [(0, resized)]
    tiles = []
    for k, copy in copies:
        tiles.extend(normalize(t) for t in chunk(copy, grid, sample.sample_id, k, augmented=augment_enabled))
    return tiles


def tile_key(sample: DrawingSample, grid: ChunkGrid, spec: AugmentationSpec | None, repeat_index: int, grid_pos: tuple[int, int]) -> str:
    """Cache key for one tile; ``spec=None`` means the un-augmented tile."""
    aug = spec.fingerprint() if spec is not None else "plain"
    raw = f"{sample.sample_id}|{sample.source_path}|g{grid.n}|{aug}|r{repeat_index}|{grid_pos[0]},{grid_pos[1]}"
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()[:32]


class TileCache:
    """On-disk tile store: one .npy per tile plus a line-oriented index.

    Tiles live under ``<root>/<grid>-<spec fingerprint>/`` so a change in the
    augmentation spec or grid never reuses stale files.
    """

    INDEX = "index.jsonl"

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _dir(self, grid: ChunkGrid, spec: AugmentationSpec | None) -> Path:
        return self.root / f"g{grid.n}-{spec.fingerprint() if spec is not None else 'plain'}"

    def get_or_build(self, sample: DrawingSample, grid: ChunkGrid, spec: AugmentationSpec, augment_enabled: bool) -> list[Tile]:
        eff = spec if augment_enabled else None
        d = self._dir(grid, eff)
        n_rep = spec.repeats[sample.drawing_type] if augment_enabled else 1
        keys = [(k, pos, tile_key(sample, grid, eff, k, pos)) for k in range(n_rep) for pos in grid.positions()]
        if all((d / f"{key}.npy").exists() for _, _, key in keys):
            return [
                Tile(sample.sample_id, k, pos, np.load(d / f"{key}.npy"), normalized=True, augmented=augment_enabled)
                for k, pos, key in keys
            ]
        tiles = run_pipeline(sample, grid, spec, augment_enabled)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / self.INDEX, "a", encoding="utf-8") as idx:
            for t, (_, _, key) in zip(tiles, keys):
                np.save(d / f"{key}.npy", t.pixels)
                rec = {"key": key, "sample_id": t.parent_sample_id, "repeat_index": t.repeat_index, "grid_pos": list(t.grid_pos), "spec": asdict(spec) if eff else None}
                idx.write(json.dumps(rec, sort_keys=True) + "\n")
        return tiles
