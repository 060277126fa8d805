"""Image, depth-map and tensor file formats.

PNG files carry the final composited color in RGB and the coverage mask in
A (straight, not premultiplied). Depth maps are raw float32 with a 16-byte
header: magic ``TSDP``, uint32 width, uint32 height, uint32 version.
"""

from __future__ import annotations

import base64
import io
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgument

DEPTH_MAGIC = b"TSDP"
DEPTH_VERSION = 1
TENSOR_MAGIC = b"TSF1"


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_png(color: np.ndarray, alpha: np.ndarray | None = None) -> bytes:
    rgb = _to_u8(color)
    if alpha is None:
        img = Image.fromarray(rgb, mode="RGB")
    else:
        img = Image.fromarray(np.concatenate([rgb, _to_u8(alpha)[..., None]], axis=-1), mode="RGBA")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> tuple[np.ndarray, np.ndarray | None]:
    img = Image.open(io.BytesIO(data))
    img.load()
    arr = np.asarray(img.convert("RGBA") if img.mode in ("RGBA", "LA", "P") else img.convert("RGB"))
    arr = arr.astype(np.float64) / 255.0
    if arr.shape[-1] == 4:
        return arr[..., :3], arr[..., 3]
    return arr, None


def write_png(path, color: np.ndarray, alpha: np.ndarray | None = None) -> None:
    Path(path).write_bytes(encode_png(color, alpha))


def read_png(path) -> tuple[np.ndarray, np.ndarray | None]:
    return decode_png(Path(path).read_bytes())


def read_mask(path) -> np.ndarray:
    """Single-channel mask in [0, 1]; uses A if present, else luminance."""
    img = Image.open(path)
    img.load()
    if img.mode in ("RGBA", "LA"):
        return np.asarray(img.getchannel("A"), dtype=np.float64) / 255.0
    return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def write_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise InvalidArgument(f"depth map must be 2-D, got shape {depth.shape}")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<III", w, h, DEPTH_VERSION))
        fh.write(depth.tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != DEPTH_MAGIC:
        raise InvalidArgument(f"{path}: not a depth file (bad magic)")
    w, h, _ = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 4 * w * h:
        raise InvalidArgument(f"{path}: expected {w}x{h} floats, got {(len(raw) - 16) // 4}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w).astype(np.float64)


def encode_tensor(x: np.ndarray) -> str:
    """base64 of: magic, uint32 ndim, ndim x uint32 dims, float32 LE data."""
    x = np.ascontiguousarray(x, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<I", x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    return base64.b64encode(head + x.tobytes()).decode("ascii")


def decode_tensor(s: str) -> np.ndarray:
    raw = base64.b64decode(s)
    if raw[:4] != TENSOR_MAGIC:
        raise InvalidArgument("tensor payload: bad magic")
    (ndim,) = struct.unpack("<I", raw[4:8])
    shape = struct.unpack(f"<{ndim}I", raw[8 : 8 + 4 * ndim])
    data = raw[8 + 4 * ndim :]
    if len(data) != 4 * int(np.prod(shape)):
        raise InvalidArgument(f"tensor payload: {len(data)} bytes do not match shape {shape}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def b64_png(color: np.ndarray) -> str:
    return base64.b64encode(encode_png(color)).decode("ascii")


def unb64_png(s: str) -> np.ndarray:
    return decode_png(base64.b64decode(s))[0]
