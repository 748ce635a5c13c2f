"""Dataset ingestion and egress.

Formats
-------
cifar10-binary
    Fixed 3073-byte records: one label byte (0-9) followed by the red,
    green and blue 32x32 planes, 1024 bytes each, row-major.
image-directory
    One sub-directory per label (named by the integer label) holding
    8-bit RGB image files.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import List

import numpy as np

from .align import LabeledImages
from .errors import DatasetFormatError

CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
FORMATS = ("cifar10-binary", "image-directory")
IMAGE_SUFFIXES = (".png", ".bmp", ".ppm", ".tif", ".tiff", ".jpg", ".jpeg")


def load_dataset(path, format: str = "cifar10-binary") -> LabeledImages:
    path = Path(path)
    if format == "cifar10-binary":
        if path.is_dir():
            files = sorted(p for p in path.iterdir() if p.suffix == ".bin")
            if not files:
                raise DatasetFormatError(f"{path}: no .bin files found")
            parts = [_load_cifar_file(p) for p in files]
            return LabeledImages(
                np.concatenate([p.images for p in parts]),
                np.concatenate([p.labels for p in parts]),
            )
        return _load_cifar_file(path)
    if format == "image-directory":
        return _load_image_directory(path)
    raise DatasetFormatError(f"unknown dataset format {format!r}; expected one of {FORMATS}")


def _load_cifar_file(path: Path) -> LabeledImages:
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise DatasetFormatError(f"{path}: cannot read ({err.strerror})") from err
    n, rest = divmod(len(raw), CIFAR_RECORD)
    if rest:
        raise DatasetFormatError(
            f"{path}: truncated record at offset {n * CIFAR_RECORD} "
            f"({rest} of {CIFAR_RECORD} bytes)"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if len(bad):
        raise DatasetFormatError(
            f"{path}: label {labels[bad[0]]} > 9 at offset {bad[0] * CIFAR_RECORD}"
        )
    planes = records[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = np.ascontiguousarray(planes.transpose(0, 2, 3, 1))
    return LabeledImages(images, labels)


def _load_image_directory(path: Path) -> LabeledImages:
    from PIL import Image

    if not path.is_dir():
        raise DatasetFormatError(f"{path}: not a directory")
    label_dirs = sorted((p for p in path.iterdir() if p.is_dir()), key=lambda p: p.name)
    images: List[np.ndarray] = []
    labels: List[int] = []
    for d in label_dirs:
        try:
            label = int(d.name)
        except ValueError:
            raise DatasetFormatError(f"{d}: label directories must be named by integer") from None
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(f) as im:
                    images.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
            except OSError as err:
                raise DatasetFormatError(f"{f}: cannot read image ({err})") from err
            labels.append(label)
    if not images:
        raise DatasetFormatError(f"{path}: no images found")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetFormatError(f"{path}: images have differing shapes {sorted(shapes)}")
    return LabeledImages(np.stack(images), np.array(labels, dtype=np.int64))


def save_dataset(data: LabeledImages, path, format: str = "cifar10-binary") -> None:
    path = Path(path)
    try:
        if format == "cifar10-binary":
            _save_cifar_file(data, path)
        elif format == "image-directory":
            _save_image_directory(data, path)
        else:
            raise DatasetFormatError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    except PermissionError as err:
        raise PermissionError(err.errno, f"cannot write dataset: {err.strerror}", str(path)) from err


def _save_cifar_file(data: LabeledImages, path: Path) -> None:
    n = len(data)
    if n and data.images.shape[1:] != (CIFAR_SIDE, CIFAR_SIDE, 3):
        raise DatasetFormatError(
            f"cifar10-binary stores 32x32x3 images, got {data.images.shape[1:]}"
        )
    if n and (data.labels.min() < 0 or data.labels.max() > 9):
        raise DatasetFormatError("cifar10-binary labels must be in [0, 9]")
    records = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    if n:
        records[:, 0] = data.labels
        records[:, 1:] = data.images.transpose(0, 3, 1, 2).reshape(n, -1)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(records.tobytes())
    os.replace(tmp, path)


def _save_image_directory(data: LabeledImages, path: Path) -> None:
    from PIL import Image

    path.mkdir(parents=True, exist_ok=True)
    for k, (img, label) in enumerate(zip(data.images, data.labels)):
        d = path / str(int(label))
        d.mkdir(exist_ok=True)
        Image.fromarray(np.ascontiguousarray(img)).save(d / f"{int(data.indices[k]):06d}.png")
