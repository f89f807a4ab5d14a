"""Samples, dataset directories and raster I/O.

A dataset directory holds ``images/``, ``gt/`` and optionally ``mask/`` with
files matched by basename (extension ignored). Values are scaled to [0, 1].
"""
from __future__ import annotations

import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from vgn.errors import FormatError

IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".gif", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm"}


@dataclass(eq=False)
class Sample:
    image: np.ndarray             # (H, W, C) in [0, 1]
    gt: np.ndarray                # (H, W) uint8 in {0, 1}
    mask: np.ndarray | None = None  # (H, W) bool field of view
    id: str = ""
    centerlines: list = field(default_factory=list)   # (K, 2) int arrays, synthetic only

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        self.gt = (np.asarray(self.gt) > 0.5).astype(np.uint8)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
        shapes = {self.image.shape[:2], self.gt.shape}
        if self.mask is not None:
            shapes.add(self.mask.shape)
        if len(shapes) != 1:
            raise ValueError(f"sample {self.id!r}: image/gt/mask extents differ: {shapes}")

    @property
    def shape(self):
        return self.gt.shape

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        same_mask = (self.mask is None and other.mask is None) or (
            self.mask is not None and other.mask is not None
            and np.array_equal(self.mask, other.mask))
        return (self.id == other.id and same_mask
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.gt, other.gt)
                and len(self.centerlines) == len(other.centerlines)
                and all(np.array_equal(a, b) for a, b in zip(self.centerlines, other.centerlines)))


# -- raster helpers -----------------------------------------------------------

def read_raster(path):
    """Read an image file as float64 in [0, 1], shape (H, W) or (H, W, C)."""
    try:
        with Image.open(path) as im:
            if im.mode == "P":
                im = im.convert("L")
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read raster {path}: {exc}") from None
    if arr.dtype == bool:
        return arr.astype(np.float64)
    if arr.dtype == np.uint8:
        return arr / 255.0
    if arr.dtype in (np.uint16, np.int32, np.int64) or np.issubdtype(arr.dtype, np.integer):
        # 16-bit PNGs may decode as int32 depending on the Pillow version
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64)


def write_prob_png(path, prob):
    """Write a [0, 1] map as a 16-bit grayscale PNG (value = round(p * 65535))."""
    p = np.asarray(prob, dtype=np.float64)
    if p.ndim == 3:
        p = p[:, :, 0]
    q = np.round(np.clip(p, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_prob_png(path):
    return read_raster(path)


def write_mask_png(path, mask):
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


# -- dataset directories ------------------------------------------------------

def _index(folder):
    files = {}
    for p in sorted(folder.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            files.setdefault(p.stem, p)
    return files


def load_dataset(root, split=None):
    """Load ``root[/split]/{images,gt,mask}`` into samples sorted by basename."""
    base = Path(root) / split if split else Path(root)
    img_dir = base / "images"
    if not img_dir.is_dir():
        return []
    images = _index(img_dir)
    gts = _index(base / "gt") if (base / "gt").is_dir() else {}
    masks = _index(base / "mask") if (base / "mask").is_dir() else None
    samples = []
    for stem in sorted(images):
        if stem not in gts:
            raise FileNotFoundError(f"no ground truth for image {stem!r} in {base / 'gt'}")
        image = read_raster(images[stem])
        gt = read_raster(gts[stem])
        if gt.ndim == 3:
            gt = gt[:, :, 0]
        mask = None
        if masks is not None:
            if stem not in masks:
                raise FileNotFoundError(f"no mask for image {stem!r} in {base / 'mask'}")
            mask = read_raster(masks[stem])
            mask = (mask[:, :, 0] if mask.ndim == 3 else mask) > 0.5
        if image.shape[:2] != gt.shape or (mask is not None and mask.shape != gt.shape):
            raise ValueError(f"size mismatch for {stem!r}: image {image.shape[:2]}, gt {gt.shape}"
                             + ("" if mask is None else f", mask {mask.shape}"))
        samples.append(Sample(image, gt, mask, stem))
    return samples


def write_dataset(samples, root):
    """Emit samples in the dataset directory layout (16-bit images)."""
    root = Path(root)
    for sub in ("images", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if any(s.mask is not None for s in samples):
        (root / "mask").mkdir(exist_ok=True)
    for s in samples:
        if s.image.shape[2] == 1:
            write_prob_png(root / "images" / f"{s.id}.png", s.image[:, :, 0])
        else:
            rgb = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(rgb).save(root / "images" / f"{s.id}.png")
        write_mask_png(root / "gt" / f"{s.id}.png", s.gt)
        if s.mask is not None:
            write_mask_png(root / "mask" / f"{s.id}.png", s.mask)


# -- exact sample serialisation ------------------------------------------------

def save_sample(sample, path):
    arrays = {"image": sample.image, "gt": sample.gt, "id": np.array(sample.id)}
    if sample.mask is not None:
        arrays["mask"] = sample.mask
    for k, cl in enumerate(sample.centerlines):
        arrays[f"centerline_{k}"] = np.asarray(cl, dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_sample(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            keys = set(z.files)
            if not {"image", "gt", "id"} <= keys:
                raise FormatError(f"{path}: missing arrays {sorted({'image', 'gt', 'id'} - keys)}")
            n_cl = sum(k.startswith("centerline_") for k in keys)
            return Sample(z["image"], z["gt"], z["mask"] if "mask" in keys else None,
                          str(z["id"]), [z[f"centerline_{k}"] for k in range(n_cl)])
    except FormatError:
        raise
    except (OSError, ValueError, EOFError, KeyError, zipfile.BadZipFile) as exc:
        size = Path(path).stat().st_size if Path(path).exists() else None
        raise FormatError(f"corrupt sample file {path}: {exc}", size) from None
