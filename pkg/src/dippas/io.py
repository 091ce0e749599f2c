"""Image loading/saving and dataset manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .formats import atomic_write_bytes, read_dpim

RAW_SUFFIX = ".dpimg"


def center_crop(image: np.ndarray, crop_size: int) -> np.ndarray:
    """Crop ``crop_size x crop_size`` starting at ``floor((dim - crop) / 2)``."""
    h, w = image.shape[:2]
    if h < crop_size or w < crop_size:
        raise ValueError(f"image {h}x{w} is smaller than the {crop_size}px crop")
    top = (h - crop_size) // 2
    left = (w - crop_size) // 2
    return image[top:top + crop_size, left:left + crop_size]


def read_image(path) -> np.ndarray:
    """Decode PNG/JPEG (8 or 16 bit) or a DPIM dump into an RGB float image in [0, 1]."""
    path = Path(path)
    if path.suffix == RAW_SUFFIX:
        return np.clip(read_dpim(path).astype(np.float64), 0.0, 1.0)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = cv2.imdecode(np.fromfile(path, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"cannot decode image {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ValueError(f"unsupported pixel type {raw.dtype} in {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[..., :3]
        raw = raw[..., ::-1]  # BGR -> RGB
    else:
        raw = raw[..., None]
    return raw.astype(np.float64) / scale


def load_and_prepare(path, crop_size: int = 512) -> np.ndarray:
    """Read an image, normalize it to [0, 1] and center-crop it."""
    return np.ascontiguousarray(center_crop(read_image(path), crop_size))


def quantize(image: np.ndarray, bits: int = 8) -> np.ndarray:
    levels = 2 ** bits - 1
    dtype = np.uint8 if bits == 8 else np.uint16
    return np.round(np.clip(image, 0.0, 1.0) * levels).astype(dtype)


def write_png(path, image: np.ndarray, bits: int = 8):
    """Lossless PNG at 8 or 16 bits per channel, written atomically."""
    q = quantize(image, bits)
    if q.ndim == 3 and q.shape[2] == 3:
        q = q[..., ::-1]
    elif q.ndim == 3:
        q = q[..., 0]
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(q))
    if not ok:
        raise ValueError(f"PNG encoding failed for {path}")
    atomic_write_bytes(path, buf.tobytes())


@dataclass
class DeviceEntry:
    id: str
    flats: list = field(default_factory=list)
    images: list = field(default_factory=list)


@dataclass
class DatasetManifest:
    """JSON manifest listing flat-field and natural image paths per device.

    Relative paths are resolved against the manifest's directory::

        {"devices": [{"id": "cam0", "flats": ["flats/0.png"], "images": ["img/a.png"]}]}
    """

    devices: list

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        root = path.parent
        entries = []
        for dev in data.get("devices", []):
            entries.append(DeviceEntry(
                id=str(dev["id"]),
                flats=[str(root / p) for p in dev.get("flats", [])],
                images=[str(root / p) for p in dev.get("images", [])],
            ))
        manifest = cls(entries)
        manifest.validate()
        return manifest

    def validate(self):
        ids = [d.id for d in self.devices]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ValueError(f"duplicate device ids in manifest: {dupes}")
        missing = [p for d in self.devices for p in d.flats + d.images if not Path(p).exists()]
        if missing:
            raise FileNotFoundError("manifest references missing files: " + ", ".join(missing))

    def device(self, device_id: str) -> DeviceEntry:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise KeyError(f"unknown device {device_id!r}; known: {[d.id for d in self.devices]}")

    def to_json(self, root=None) -> str:
        def rel(p):
            return str(Path(p).relative_to(root)) if root is not None else str(p)
        return json.dumps({"devices": [
            {"id": d.id, "flats": [rel(p) for p in d.flats], "images": [rel(p) for p in d.images]}
            for d in self.devices]}, indent=2)
