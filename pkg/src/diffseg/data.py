"""Deterministic synthetic segmentation tasks with ambiguous boundaries.

Each sample is 1-3 random ellipses on a textured background. The mask keeps
the crisp geometry; the image gets a boundary blur proportional to the
``ambiguity`` knob, plus smooth value-noise texture and pixel noise, so the
apparent object outline is softer than the label. Images are quantized to
8 bits at generation time so a write/load round trip is exact.

On-disk layout (all formats byte-stable):

    root/
      manifest.json
      train/images/00000.pgm  train/masks/00000.pgm  ...
      test/images/00000.pgm   test/masks/00000.pgm   ...

PGM files are binary (P5), maxval 255; masks use 0/255.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

FOREGROUND_FRACTION_BOUNDS = (0.02, 0.6)

_BASE_INTENSITY = 0.3
_FOREGROUND_OFFSET = 0.4
_TEXTURE_AMPLITUDE = 0.06
_PIXEL_NOISE_STD = 0.015
_MAX_BLUR_SIGMA = 2.5


@dataclass
class SegmentationSample:
    image: np.ndarray  # float32 [1, H, W] in [0, 1]
    mask: np.ndarray  # float32 [1, H, W] in {0, 1}
    seed: int
    ambiguity: float


@dataclass
class DatasetManifest:
    root: str
    size: int
    ambiguity: float
    base_seed: int
    n_train: int
    n_test: int
    train_seeds: list[int]
    test_seeds: list[int]
    content_hash: str
    config_hash: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _ellipse_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    mask = np.zeros((size, size), dtype=bool)
    n_blobs = rng.integers(1, 4)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
        ay, ax = rng.uniform(0.10 * size, 0.28 * size, size=2)
        theta = rng.uniform(0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        u = (yy - cy) * ct + (xx - cx) * st
        v = -(yy - cy) * st + (xx - cx) * ct
        mask |= (u / ay) ** 2 + (v / ax) ** 2 <= 1.0
    return mask


def _texture(size: int, rng: np.random.Generator) -> np.ndarray:
    # smooth value noise: white noise low-passed to a blob scale ~size/8
    raw = rng.normal(size=(size, size))
    smooth = ndimage.gaussian_filter(raw, sigma=size / 16.0, mode="reflect")
    peak = np.abs(smooth).max()
    if peak > 0:
        smooth = smooth / peak
    return _TEXTURE_AMPLITUDE * smooth


def generate_sample(seed: int, size: int = 64, ambiguity: float = 0.3) -> SegmentationSample:
    """Render one image/mask pair, deterministic in ``seed``.

    The foreground fraction is kept inside FOREGROUND_FRACTION_BOUNDS by
    redrawing the geometry (the RNG stream makes the redraws reproducible).
    """
    if not 0.0 <= ambiguity <= 1.0:
        raise ValueError(f"ambiguity must be in [0, 1], got {ambiguity}")
    rng = np.random.default_rng(seed)
    lo, hi = FOREGROUND_FRACTION_BOUNDS
    while True:
        mask = _ellipse_mask(size, rng)
        frac = mask.mean()
        if lo <= frac <= hi:
            break

    fg = mask.astype(float)
    sigma = ambiguity * _MAX_BLUR_SIGMA
    if sigma > 0:
        fg = ndimage.gaussian_filter(fg, sigma=sigma, mode="reflect")
    image = _BASE_INTENSITY + _FOREGROUND_OFFSET * fg + _texture(size, rng)
    image = image + rng.normal(scale=_PIXEL_NOISE_STD, size=(size, size))
    image = np.clip(image, 0.0, 1.0)
    # quantize to the on-disk precision so write -> load is exact
    image = np.round(image * 255.0) / 255.0

    return SegmentationSample(
        image=image[None].astype(np.float32),
        mask=mask[None].astype(np.float32),
        seed=seed,
        ambiguity=ambiguity,
    )


# ---------------------------------------------------------------------------
# PGM IO
# ---------------------------------------------------------------------------

def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Write a [H, W] uint8 array as binary PGM."""
    arr = np.asarray(values, dtype=np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"raster file missing: {path}")
    data = path.read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    arr = np.frombuffer(data[pos : pos + h * w], dtype=np.uint8)
    if arr.size != h * w:
        raise ValueError(f"{path}: truncated pixel data")
    return arr.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# dataset generation and loading
# ---------------------------------------------------------------------------

def _sample_paths(root: Path, split: str, index: int) -> tuple[Path, Path]:
    name = f"{index:05d}.pgm"
    return root / split / "images" / name, root / split / "masks" / name


def generate_dataset(
    n_train: int,
    n_test: int,
    seed: int,
    root: str | Path,
    size: int = 64,
    ambiguity: float = 0.3,
    force: bool = False,
    config_hash: str = "",
) -> DatasetManifest:
    """Write a train/test split plus manifest; splits use disjoint seeds."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"target directory {root} is not empty (use force)")
        shutil.rmtree(root)

    train_seeds = [seed + i for i in range(n_train)]
    test_seeds = [seed + n_train + i for i in range(n_test)]

    hasher = hashlib.sha256()
    for split, seeds in (("train", train_seeds), ("test", test_seeds)):
        (root / split / "images").mkdir(parents=True, exist_ok=True)
        (root / split / "masks").mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(seeds):
            sample = generate_sample(s, size=size, ambiguity=ambiguity)
            img_path, mask_path = _sample_paths(root, split, i)
            write_pgm(img_path, np.round(sample.image[0] * 255.0).astype(np.uint8))
            write_pgm(mask_path, (sample.mask[0] * 255.0).astype(np.uint8))
            hasher.update(img_path.read_bytes())
            hasher.update(mask_path.read_bytes())

    manifest = DatasetManifest(
        root=str(root),
        size=size,
        ambiguity=ambiguity,
        base_seed=seed,
        n_train=n_train,
        n_test=n_test,
        train_seeds=train_seeds,
        test_seeds=test_seeds,
        content_hash=hasher.hexdigest(),
        config_hash=config_hash,
    )
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return manifest


def load_manifest(root: str | Path) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest missing: {path}")
    return DatasetManifest(**json.loads(path.read_text()))


def _resize_plane(plane: np.ndarray, target: int, order: int) -> np.ndarray:
    factor = target / plane.shape[0]
    out = ndimage.zoom(plane, zoom=factor, order=order, mode="nearest", grid_mode=True)
    return out[:target, :target]


def load_batch(
    manifest: DatasetManifest,
    indices,
    split: str = "train",
    resize_to: int | None = None,
) -> list[SegmentationSample]:
    """Load samples by index; optional resize (bilinear image, nearest mask)."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be train|test, got {split!r}")
    n = manifest.n_train if split == "train" else manifest.n_test
    seeds = manifest.train_seeds if split == "train" else manifest.test_seeds
    root = Path(manifest.root)
    out = []
    for idx in indices:
        if not 0 <= idx < n:
            raise IndexError(f"index {idx} out of range for {split} split of size {n}")
        img_path, mask_path = _sample_paths(root, split, idx)
        image = read_pgm(img_path).astype(np.float32) / 255.0
        mask = (read_pgm(mask_path) > 127).astype(np.float32)
        if resize_to is not None and resize_to != image.shape[0]:
            image = _resize_plane(image, resize_to, order=1).astype(np.float32)
            mask = _resize_plane(mask, resize_to, order=0).astype(np.float32)
        out.append(
            SegmentationSample(
                image=image[None], mask=mask[None], seed=seeds[idx], ambiguity=manifest.ambiguity
            )
        )
    return out


def load_split_arrays(manifest: DatasetManifest, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Whole split as stacked arrays [N, 1, H, W] (images, masks)."""
    n = manifest.n_train if split == "train" else manifest.n_test
    samples = load_batch(manifest, range(n), split=split)
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks
