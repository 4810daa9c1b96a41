"""Image files, labels CSV and the seeded synthetic dataset.

Images are stored as binary PPM (``P6``): an ASCII header
``P6\\n<width> <height>\\n255\\n`` followed by ``height*width*3`` bytes, RGB,
row-major. Anything else Pillow can open is accepted on read.
"""
from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    pass


IMAGE_SUFFIXES = (".ppm", ".png", ".jpg", ".jpeg", ".bmp")


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as 8-bit PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataFormatError(f"expected (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def _read_ppm(raw: bytes, path) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise DataFormatError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DataFormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    """Return a (3, H, W) float64 image in [0, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc.strerror}") from None
    if raw[:2] == b"P6":
        return _read_ppm(raw, path)
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover
        raise DataFormatError(f"{path}: not a PPM file and Pillow is unavailable") from None
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    return arr.transpose(2, 0, 1)


def list_images(directory) -> list[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataFormatError(f"{directory}: not a directory")
    return sorted(p.name for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_images(directory, names=None) -> tuple[list[str], np.ndarray]:
    names = list_images(directory) if names is None else list(names)
    if not names:
        raise DataFormatError(f"{directory}: no images found")
    images = [read_image(Path(directory) / n) for n in names]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataFormatError(f"{directory}: images have mixed shapes {sorted(shapes)}")
    return names, np.stack(images)


def read_labels(path) -> dict[str, set[str]]:
    """Labels CSV ``filename,class`` with one row per (image, class) pair."""
    labels: dict[str, set[str]] = defaultdict(set)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["filename", "class"]:
            raise DataFormatError(f"{path}: expected header 'filename,class'")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            labels[row[0].strip()].add(row[1].strip())
    return dict(labels)


def write_labels(path, labels: dict[str, set[str]] | list[tuple[str, str]]) -> None:
    rows = labels if isinstance(labels, list) else [
        (name, c) for name in sorted(labels) for c in sorted(labels[name])
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "class"])
        writer.writerows(rows)


def class_names(n_classes: int) -> list[str]:
    return [f"class{c}" for c in range(n_classes)]


def synthetic_images(seed: int, n: int, classes: int, size: int = 32,
                     noise: float = 0.03) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditional oriented gratings with a class tint, random phase and pixel noise.

    Returns (images (n, 3, size, size) in [0, 1], class index per image).
    Classes are balanced (round-robin) and then shuffled.
    """
    if not n >= classes >= 2:
        raise ValueError("need n >= classes >= 2")
    rng = np.random.default_rng(seed)
    ys = rng.permutation(np.arange(n) % classes)
    yy, xx = np.mgrid[0:size, 0:size] / size
    tints = np.stack([
        0.6 + 0.4 * np.cos(2 * math.pi * (c / classes + np.array([0.0, 1 / 3, 2 / 3])))
        for c in range(classes)
    ])
    images = np.empty((n, 3, size, size))
    for i, c in enumerate(ys):
        theta = math.pi * c / classes + rng.normal(0.0, 0.08)
        freq = 2.0 + 1.5 * c + rng.normal(0.0, 0.15)
        phase = rng.uniform(0.0, 2 * math.pi)
        contrast = rng.uniform(0.25, 0.45)
        wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
        img = 0.5 + contrast * wave[None] * tints[c][:, None, None]
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    # Round to the 8-bit grid so in-memory and on-disk images agree exactly.
    return np.rint(images * 255.0) / 255.0, ys


def generate_synthetic(seed: int, n: int, classes: int, out_dir, size: int = 32,
                       noise: float = 0.03) -> list[str]:
    images, ys = synthetic_images(seed, n, classes, size, noise)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"{out}: not writable")
    except OSError as exc:
        raise DataFormatError(str(exc)) from None
    names = class_names(classes)
    width = max(5, len(str(n - 1)))
    files = []
    rows = []
    for i, (img, c) in enumerate(zip(images, ys)):
        fname = f"img_{i:0{width}d}.ppm"
        try:
            write_ppm(out / fname, img)
        except OSError as exc:
            raise DataFormatError(f"{out / fname}: {exc.strerror}") from None
        files.append(fname)
        rows.append((fname, names[c]))
    write_labels(out / "labels.csv", rows)
    return files
