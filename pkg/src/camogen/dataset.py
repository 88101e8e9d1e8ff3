"""Dataset synthesis and loading.

Synthetic samples pair a smooth value-noise background with an object
(ellipse, polygon or blob) filled from the same noise field sampled at an
offset, so foreground and background textures are correlated the way real
camouflage is. Object areas are drawn log-uniformly so the small-object
regime stays populated. On disk a sample is ``<name>.png`` (8-bit RGB) plus
``<name>_mask.png`` (8-bit gray, >127 = foreground).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .errors import InputError
from .imageops import bilinear_resize, from_uint8, nearest_resize, to_uint8
from .rng import Rng


@dataclass
class SampleRecord:
    name: str
    image_path: str
    mask_path: str
    split: str = "train"


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    height: int
    width: int

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class ImageSample:
    """One training/eval sample in source and model resolutions.

    mask_m uses the 0=object / 1=background convention; fg_ratio is the
    foreground fraction measured at source resolution.
    """

    name: str
    source_image: np.ndarray  # (Hs, Ws, 3) float32 in [0,1]
    source_fg: np.ndarray     # (Hs, Ws) uint8, 1 = object
    image: np.ndarray         # (H, W, 3) float32, model resolution
    mask_m: np.ndarray        # (H, W) uint8, 0 = object
    fg_ratio: float


# -- synthesis -------------------------------------------------------------


def _value_noise(rng: Rng, h: int, w: int, cells: int) -> np.ndarray:
    """Smoothstep-interpolated random grid values in [0,1]."""
    grid = rng.uniform(0.0, 1.0, (cells + 1, cells + 1), dtype=np.float64)
    ys = np.linspace(0, cells, h, endpoint=False) + 0.5 * cells / h
    xs = np.linspace(0, cells, w, endpoint=False) + 0.5 * cells / w
    y0 = np.minimum(ys.astype(np.int64), cells - 1)
    x0 = np.minimum(xs.astype(np.int64), cells - 1)
    fy = ys - y0
    fx = xs - x0
    fy = fy * fy * (3 - 2 * fy)
    fx = fx * fx * (3 - 2 * fx)
    fy = fy[:, None]
    fx = fx[None, :]
    a = grid[y0[:, None], x0[None, :]]
    b = grid[y0[:, None], x0[None, :] + 1]
    c = grid[y0[:, None] + 1, x0[None, :]]
    d = grid[y0[:, None] + 1, x0[None, :] + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def _noise_field(rng: Rng, h: int, w: int) -> np.ndarray:
    """Two-octave value noise, normalized to [0,1]."""
    n = 0.65 * _value_noise(rng.split("oct1"), h, w, 4)
    n = n + 0.35 * _value_noise(rng.split("oct2"), h, w, 9)
    n -= n.min()
    peak = n.max()
    return n / peak if peak > 0 else n


def _paletted(noise: np.ndarray, c0: np.ndarray, c1: np.ndarray) -> np.ndarray:
    return (c0[None, None, :] + (c1 - c0)[None, None, :] * noise[:, :, None]).astype(np.float32)


def _object_mask(rng: Rng, h: int, w: int, target_area: float) -> np.ndarray:
    """Rasterize an ellipse, polygon or blob of roughly the requested pixel area."""
    kind = ("ellipse", "polygon", "blob")[rng.integers(0, 3)]
    cy = float(rng.uniform(0.3 * h, 0.7 * h))
    cx = float(rng.uniform(0.3 * w, 0.7 * w))
    aspect = float(rng.uniform(0.6, 1.6))
    ry = np.sqrt(target_area * aspect / np.pi)
    rx = target_area / (np.pi * ry)

    if kind == "polygon":
        k = int(rng.integers(4, 8))
        angles = np.sort(rng.uniform(0, 2 * np.pi, (k,), dtype=np.float64))
        radii = rng.uniform(0.7, 1.3, (k,), dtype=np.float64)
        pts = [(cx + rx * r * np.cos(a) * 1.25, cy + ry * r * np.sin(a) * 1.25)
               for a, r in zip(angles, radii)]
        img = Image.new("L", (w, h), 0)
        ImageDraw.Draw(img).polygon(pts, fill=1)
        return np.asarray(img, dtype=np.uint8)

    yy, xx = np.mgrid[0:h, 0:w]
    field = ((yy - cy) / max(ry, 0.5)) ** 2 + ((xx - cx) / max(rx, 0.5)) ** 2
    if kind == "blob":
        wobble = _value_noise(rng.split("wobble"), h, w, 5) - 0.5
        field = field + 0.8 * wobble
    return (field <= 1.0).astype(np.uint8)


def synth_sample(rng: Rng, h: int, w: int,
                 area_range: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair; the object area fraction is log-uniform in
    area_range and the mask is guaranteed nonempty."""
    noise = _noise_field(rng.split("bg"), h, w)
    c0 = rng.uniform(0.05, 0.95, (3,), dtype=np.float64)
    c1 = rng.uniform(0.05, 0.95, (3,), dtype=np.float64)
    image = _paletted(noise, c0, c1)

    lo, hi = np.log(area_range[0]), np.log(area_range[1])
    for attempt in range(8):
        arng = rng.split(f"obj{attempt}")
        frac = float(np.exp(arng.uniform(lo, hi)))
        mask = _object_mask(arng, h, w, frac * h * w)
        if mask.sum() >= 1:
            break
    else:
        raise InputError("failed to rasterize a nonempty object mask")

    dy = int(rng.integers(h // 4, 3 * h // 4))
    dx = int(rng.integers(w // 4, 3 * w // 4))
    shifted = np.roll(np.roll(noise, dy, axis=0), dx, axis=1)
    jitter = rng.uniform(-0.08, 0.08, (3,), dtype=np.float64)
    obj_tex = _paletted(shifted, np.clip(c0 + jitter, 0, 1), np.clip(c1 - jitter, 0, 1))
    m3 = mask.astype(np.float32)[:, :, None]
    return (image * (1 - m3) + obj_tex * m3).astype(np.float32), mask


def synth_dataset(seed: int, n_images: int, height: int, width: int, out_dir: str,
                  area_range: tuple[float, float] = (1.0 / 256.0, 0.25),
                  split: str = "train") -> DatasetManifest:
    """Write n deterministic PNG pairs and return their manifest."""
    if n_images < 1:
        raise InputError(f"need at least one image, got {n_images}")
    os.makedirs(out_dir, exist_ok=True)
    root = Rng(seed, "synth")
    records = []
    for i in range(n_images):
        image, mask = synth_sample(root.split(f"sample{i}"), height, width, area_range)
        name = f"sample_{i:04d}"
        image_path = os.path.join(out_dir, f"{name}.png")
        mask_path = os.path.join(out_dir, f"{name}_mask.png")
        Image.fromarray(to_uint8(image), "RGB").save(image_path)
        Image.fromarray(mask * np.uint8(255), "L").save(mask_path)
        records.append(SampleRecord(name=name, image_path=image_path,
                                    mask_path=mask_path, split=split))
    return DatasetManifest(records=records, height=height, width=width)


# -- loading ------------------------------------------------------------------


def load_dataset(directory: str) -> DatasetManifest:
    """Scan a directory of <name>.png / <name>_mask.png pairs."""
    if not os.path.isdir(directory):
        raise InputError(f"dataset directory not found: {directory}")
    files = sorted(f for f in os.listdir(directory) if f.endswith(".png"))
    masks = {f for f in files if f.endswith("_mask.png")}
    images = [f for f in files if f not in masks]
    if not images:
        if masks:
            raise InputError(f"orphan mask file: {sorted(masks)[0]}")
        raise InputError(f"no samples in {directory}")
    records = []
    dims = None
    for f in images:
        name = f[:-4]
        mask_file = f"{name}_mask.png"
        if mask_file not in masks:
            raise InputError(f"missing mask for {f}")
        masks.discard(mask_file)
        image_path = os.path.join(directory, f)
        mask_path = os.path.join(directory, mask_file)
        with Image.open(image_path) as im:
            if im.mode not in ("RGB", "L"):
                raise InputError(f"{f}: expected 8-bit PNG, got mode {im.mode}")
            size = im.size
        with Image.open(mask_path) as mm:
            if mm.mode != "L":
                raise InputError(f"{mask_file}: expected 8-bit gray PNG, got mode {mm.mode}")
            if mm.size != size:
                raise InputError(
                    f"{mask_file}: mask dims {mm.size} differ from image dims {size}"
                )
        records.append(SampleRecord(name=name, image_path=image_path, mask_path=mask_path))
        dims = size
    if masks:
        raise InputError(f"orphan mask file: {sorted(masks)[0]}")
    return DatasetManifest(records=records, height=dims[1], width=dims[0])


def load_sample(record: SampleRecord, model_size: int) -> ImageSample:
    """Load a pair, binarize the mask at >127, resize to the model input."""
    with Image.open(record.image_path) as im:
        src = from_uint8(np.asarray(im.convert("RGB")))
    with Image.open(record.mask_path) as mm:
        raw = np.asarray(mm)
    fg = (raw > 127).astype(np.uint8)
    if fg.sum() == 0:
        raise InputError(f"{record.mask_path}: mask selects zero foreground pixels")
    image = bilinear_resize(src, model_size, model_size)
    fg_model = nearest_resize(fg, model_size, model_size)
    if fg_model.sum() == 0:
        # guarantee the object survives aggressive downsizing
        ys, xs = np.nonzero(fg)
        fg_model[min(int(ys.mean() * model_size / fg.shape[0]), model_size - 1),
                 min(int(xs.mean() * model_size / fg.shape[1]), model_size - 1)] = 1
    return ImageSample(
        name=record.name,
        source_image=src,
        source_fg=fg,
        image=image,
        mask_m=(1 - fg_model).astype(np.uint8),
        fg_ratio=float(fg.sum()) / float(fg.size),
    )


def load_samples(manifest: DatasetManifest, model_size: int) -> list[ImageSample]:
    return [load_sample(r, model_size) for r in manifest.records]
