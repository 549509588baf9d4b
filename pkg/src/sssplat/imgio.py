"""Image and raw-buffer file io: 8-bit PNG (sRGB) and planar float32 dumps.

All in-memory images are linear-light float64 in [0,1]; PNG io converts
through the sRGB EOTF. The .f32 format is: one ASCII header line
"f32 <W> <H> <C>\n" followed by C planes of little-endian float32, row-major.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import CorruptImage


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    x = np.clip(linear, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    x = np.clip(encoded, 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_png(path, img: np.ndarray, linear: bool = True):
    """Write (H,W) or (H,W,3) in [0,1]; linear images are sRGB-encoded."""
    arr = np.asarray(img, dtype=np.float64)
    enc = srgb_encode(arr) if linear else np.clip(arr, 0.0, 1.0)
    b = np.round(enc * 255.0).astype(np.uint8)
    mode = "L" if b.ndim == 2 else "RGB"
    Image.fromarray(b, mode=mode).save(str(path))


def load_png(path, linear: bool = True) -> np.ndarray:
    """Read a PNG to float64 [0,1]; decodes sRGB when linear=True."""
    try:
        with Image.open(str(path)) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise CorruptImage(f"missing image file: {path}")
    except OSError as exc:
        raise CorruptImage(f"unreadable image file {path}: {exc}")
    return srgb_decode(arr) if linear else arr


def write_f32(path, arr: np.ndarray):
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    h, w, c = a.shape
    with open(str(path), "wb") as fh:
        fh.write(f"f32 {w} {h} {c}\n".encode("ascii"))
        planar = np.transpose(a, (2, 0, 1)).astype("<f4")
        fh.write(planar.tobytes())


def read_f32(path) -> np.ndarray:
    with open(str(path), "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 4 or header[0] != "f32":
            raise CorruptImage(f"{path}: bad f32 header")
        w, h, c = int(header[1]), int(header[2]), int(header[3])
        data = np.frombuffer(fh.read(4 * w * h * c), dtype="<f4")
        if data.size != w * h * c:
            raise CorruptImage(f"{path}: truncated f32 payload")
    planar = data.reshape(c, h, w).astype(np.float64)
    arr = np.transpose(planar, (1, 2, 0))
    return arr[:, :, 0] if c == 1 else arr


def luma(rgb: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an (H,W,3) image."""
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
