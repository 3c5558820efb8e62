"""On-disk layout of photometric datasets and attribute maps.

A dataset directory holds ``manifest.json`` and one PNG per light:

    {"format": 1, "images": [{"file": "light_00.png", "kind": "directional",
      "direction": [x, y, z], "intensity": 1.0}, ...], ...}

Normals are 16-bit RGB PNGs storing round((n * 0.5 + 0.5) * 65535);
segmentation masks are 8-bit greyscale thresholded at 128.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
import png

from .photometry import Light, LightRig, PhotometricStack

MANIFEST = "manifest.json"


def write_png(path, image: np.ndarray, bitdepth: int = 16) -> None:
    """Write a (c, h, w) array in [0, 1] with c in {1, 3}."""
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if c not in (1, 3):
        raise ValueError(f"PNG output needs 1 or 3 channels, got {c}")
    top = (1 << bitdepth) - 1
    q = np.round(np.clip(image.astype(np.float64), 0.0, 1.0) * top).astype(np.uint16 if bitdepth > 8 else np.uint8)
    write_png_raw(path, q, bitdepth)


def write_png_raw(path, q: np.ndarray, bitdepth: int) -> None:
    c, h, w = q.shape
    rows = q.transpose(1, 2, 0).reshape(h, w * c)
    writer = png.Writer(width=w, height=h, greyscale=(c == 1), bitdepth=bitdepth, compression=6)
    with open(path, "wb") as f:
        writer.write(f, rows.tolist() if bitdepth not in (8, 16) else rows)


def read_png_raw(path) -> tuple[np.ndarray, int]:
    """(c, h, w) integer array and its bit depth; alpha is dropped."""
    w, h, rows, info = png.Reader(filename=str(path)).asDirect()
    planes = info["planes"]
    data = np.vstack([np.asarray(r, dtype=np.uint16) for r in rows]).reshape(h, w, planes)
    if info.get("alpha"):
        data = data[..., :-1]
    return data.transpose(2, 0, 1), info["bitdepth"]


def read_png(path) -> np.ndarray:
    """(c, h, w) float32 in [0, 1]."""
    q, depth = read_png_raw(path)
    return (q.astype(np.float64) / ((1 << depth) - 1)).astype(np.float32)


def encode_normals(normals: np.ndarray) -> np.ndarray:
    return np.round((np.clip(normals.astype(np.float64), -1, 1) * 0.5 + 0.5) * 65535).astype(np.uint16)


def decode_normals(q: np.ndarray) -> np.ndarray:
    n = q.astype(np.float64) / 65535 * 2.0 - 1.0
    return (n / np.maximum(np.linalg.norm(n, axis=0, keepdims=True), 1e-12)).astype(np.float32)


def write_normals(path, normals: np.ndarray) -> None:
    write_png_raw(path, encode_normals(normals), 16)


def read_normals(path) -> np.ndarray:
    q, depth = read_png_raw(path)
    if q.shape[0] != 3:
        raise ValueError(f"{path}: normal maps need 3 channels, found {q.shape[0]}")
    if depth != 16:
        q = q.astype(np.float64) * (65535 / ((1 << depth) - 1))
    return decode_normals(q)


def write_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[0]
    write_png_raw(path, np.where(m >= 0.5, 255, 0).astype(np.uint8)[None], 8)


def read_mask(path) -> np.ndarray:
    """(1, h, w) float32 in {0, 1}; colour masks use their first channel."""
    q, depth = read_png_raw(path)
    scaled = q[:1].astype(np.float64) * (255 / ((1 << depth) - 1))
    return (scaled >= 128).astype(np.float32)


def write_manifest(directory, stack: PhotometricStack, files: list[str], extra: Optional[dict] = None) -> None:
    entries = [
        {"file": f, "kind": l.kind, "direction": [float(v) for v in l.direction], "intensity": float(l.intensity)}
        for f, l in zip(files, stack.rig)
    ]
    doc = {"format": 1, "size": list(stack.size), "images": entries}
    if extra:
        doc.update(extra)
    Path(directory, MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(directory) -> dict:
    path = Path(directory, MANIFEST)
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_stack(directory) -> PhotometricStack:
    doc = read_manifest(directory)
    images, lights = [], []
    for e in doc["images"]:
        img = read_png(Path(directory, e["file"]))
        if img.shape[0] != 3:
            raise ValueError(f"{e['file']}: expected an RGB image, got {img.shape[0]} channels")
        images.append(img)
        lights.append(Light(tuple(float(v) for v in e["direction"]), e["kind"], float(e.get("intensity", 1.0))))
    return PhotometricStack(images, LightRig(lights))
