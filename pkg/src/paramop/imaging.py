"""PNG I/O: 8-bit RGB files mapped to float images in [0, 1] by /255."""

from __future__ import annotations

import numpy as np
from PIL import Image as PILImage


def read_png(path: str) -> np.ndarray:
    with PILImage.open(path) as im:
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


def write_png(path: str, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")


def encode_png_bytes(img: np.ndarray) -> bytes:
    import io

    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(data, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png_bytes(payload: bytes) -> np.ndarray:
    import io

    with PILImage.open(io.BytesIO(payload)) as im:
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0
