"""PFM and KITTI 16-bit PNG encodings for disparity and flow maps."""

from __future__ import annotations

import re
from pathlib import Path

import cv2
import numpy as np


class CodecError(ValueError):
    pass


# ---------------------------------------------------------------- PFM


def pfm_encode(data: np.ndarray) -> bytes:
    """Encode an (H, W) map as ``Pf`` or an (H, W, 3) map as ``PF``, little-endian."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        magic = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"PF"
    else:
        raise CodecError(f"PFM holds (H, W) or (H, W, 3) maps, got {data.shape}")
    h, w = data.shape[:2]
    header = magic + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    return header + np.ascontiguousarray(data[::-1], dtype="<f4").tobytes()


_HEADER = re.compile(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")


def pfm_decode(blob: bytes) -> np.ndarray:
    if blob[:2] not in (b"Pf", b"PF"):
        raise CodecError("PFM: bad magic at byte 0")
    m = _HEADER.match(blob)
    if m is None:
        raise CodecError(f"PFM: malformed dimension/scale lines after byte 2 (found {blob[2:24]!r})")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    if w <= 0 or h <= 0:
        raise CodecError(f"PFM: invalid dimensions {w}x{h} at byte {m.start(2)}")
    dtype = "<f4" if scale < 0 else ">f4"
    offset = m.end()
    count = w * h * channels
    if len(blob) - offset < 4 * count:
        raise CodecError(f"PFM: payload truncated at byte {len(blob)}, need {offset + 4 * count}")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    Path(path).write_bytes(pfm_encode(data))


def read_pfm(path: str | Path) -> np.ndarray:
    return pfm_decode(Path(path).read_bytes())


# ---------------------------------------------------------------- KITTI flow


def flow_png_encode(flow: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """(2, H, W) flow -> (H, W, 3) uint16 image in (u, v, valid) channel order."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise CodecError(f"flow must be (2, H, W), got {flow.shape}")
    valid = np.ones(flow.shape[1:], bool) if valid is None else np.asarray(valid, bool)
    bad = valid & ((np.abs(flow) >= 512).any(axis=0) | ~np.isfinite(flow).all(axis=0))
    if bad.any():
        ys, xs = np.nonzero(bad)
        listing = ", ".join(f"({y},{x})" for y, x in zip(ys[:10], xs[:10]))
        raise CodecError(f"flow magnitude >= 512 at {bad.sum()} pixel(s): {listing}")
    out = np.zeros(flow.shape[1:] + (3,), dtype=np.uint16)
    enc = np.where(valid, np.round(np.nan_to_num(flow) * 64.0 + 2**15), 2**15)
    out[..., 0] = enc[0]
    out[..., 1] = enc[1]
    out[..., 2] = valid
    return out


def flow_png_decode(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint16:
        raise CodecError(f"KITTI flow image must be (H, W, 3) uint16, got {img.shape} {img.dtype}")
    flow = (img[..., :2].astype(np.float64) - 2**15) / 64.0
    valid = img[..., 2] > 0
    flow[~valid] = 0.0
    return flow.transpose(2, 0, 1), valid


def disp_png_encode(disp: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    disp = np.asarray(disp, dtype=np.float64)
    valid = np.ones(disp.shape, bool) if valid is None else np.asarray(valid, bool)
    # values below half a quantization step would collapse onto the invalid marker
    over = valid & ~((disp >= 1 / 512) & (disp < 256))
    if over.any():
        ys, xs = np.nonzero(over)
        listing = ", ".join(f"({y},{x})" for y, x in zip(ys[:10], xs[:10]))
        raise CodecError(f"disparity outside [1/512, 256) at {over.sum()} pixel(s): {listing}")
    stored = np.where(valid, np.round(np.nan_to_num(disp) * 256.0), 0)
    return stored.astype(np.uint16)


def disp_png_decode(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint16:
        raise CodecError(f"KITTI disparity image must be (H, W) uint16, got {img.shape} {img.dtype}")
    return img.astype(np.float64) / 256.0, img > 0


def _imwrite(path: str | Path, img: np.ndarray) -> None:
    if not cv2.imwrite(str(path), img):
        raise CodecError(f"could not write {path}")


def _imread(path: str | Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise CodecError(f"could not read image {path}")
    return img


def write_flow_png(path, flow, valid=None) -> None:
    _imwrite(path, np.ascontiguousarray(flow_png_encode(flow, valid)[..., ::-1]))  # OpenCV stores BGR


def read_flow_png(path):
    img = _imread(path)
    if img.ndim != 3:
        raise CodecError(f"{path}: KITTI flow PNG must have 3 channels")
    return flow_png_decode(np.ascontiguousarray(img[..., ::-1]))


def write_disp_png(path, disp, valid=None) -> None:
    _imwrite(path, disp_png_encode(disp, valid))


def read_disp_png(path):
    return disp_png_decode(_imread(path))


def write_image(path, image: np.ndarray) -> None:
    """(3, H, W) float image in [0, 1] -> 8-bit RGB PNG."""
    img = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    _imwrite(path, np.ascontiguousarray(img[..., ::-1]))


def read_image(path) -> np.ndarray:
    img = _imread(path)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = img[..., :3][..., ::-1]
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return (img.astype(np.float32) / scale).transpose(2, 0, 1).copy()
