"""Image I/O (binary PPM) and the two small convolutional image encoders.

``global_encode`` yields one vector per image (the MAG input); ``region_encode``
runs depthwise-separable blocks and pools a grid of regions (the cross-attention
keys/values).  All conv ops take (B, C, H, W) or unbatched (C, H, W) input.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import DimensionError, Tensor, make_op, relu, reshape, transpose

IMAGE_SIZE = 32


class ImageIOError(OSError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageRaster:
    data: np.ndarray  # (height, width, 3) uint8

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def to_chw(self) -> np.ndarray:
        """Float (3, H, W) in [0, 1]."""
        return np.ascontiguousarray(self.data.transpose(2, 0, 1), dtype=np.float32) / np.float32(255.0)


def encode_ppm(img: ImageRaster) -> bytes:
    h, w = img.data.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.data.astype(np.uint8).tobytes()


def write_ppm(img: ImageRaster, path: str | Path) -> None:
    Path(path).write_bytes(encode_ppm(img))


def decode_ppm(raw: bytes) -> ImageRaster:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ImageFormatError(f"unsupported PPM magic {fields[0]!r}; only binary P6 is read")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ImageFormatError("non-numeric PPM header field") from exc
    if w <= 0 or h <= 0 or maxval != 255:
        raise ImageFormatError(f"bad PPM geometry {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = raw[pos:pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise ImageFormatError(f"truncated PPM payload: {len(payload)} of {w * h * 3} bytes")
    return ImageRaster(np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy())


def resize_nearest(img: ImageRaster, size: int) -> ImageRaster:
    h, w = img.data.shape[:2]
    if h == size and w == size:
        return img
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return ImageRaster(img.data[rows][:, cols].copy())


def load_image(path: str | Path, size: int = IMAGE_SIZE) -> ImageRaster:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return resize_nearest(decode_ppm(raw), size)


# ---------------------------------------------------------------------------
# convolution ops


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (B,C,H,W), got {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def _shifts(k: int = 3):
    return [(i, j) for i in range(k) for j in range(k)]


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.  ``w`` is (O, C, 3, 3)."""
    x, squeeze = _batched(x)
    B, C, H, W = x.shape
    O = w.shape[0]
    if w.shape != (O, C, 3, 3) or b.shape != (O,):
        raise DimensionError(f"conv2d: weight {w.shape} / bias {b.shape} vs {C} input channels")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.stack([xp[:, :, i:i + H, j:j + W] for i, j in _shifts()], axis=2)  # B,C,9,H,W
    cols = cols.reshape(B, C * 9, H * W)
    wm = w.data.reshape(O, C * 9)
    out = (wm @ cols).reshape(B, O, H, W) + b.data[:, None, None]

    def bw(g):
        g2 = g.reshape(B, O, H * W)
        gw = np.einsum("boz,bkz->ok", g2, cols).reshape(w.shape)
        gcols = (wm.T @ g2).reshape(B, C, 9, H, W)
        gxp = np.zeros(xp.shape, dtype=np.result_type(g, wm))
        for s, (i, j) in enumerate(_shifts()):
            gxp[:, :, i:i + H, j:j + W] += gcols[:, :, s]
        return gxp[:, :, 1:-1, 1:-1], gw, g.sum(axis=(0, 2, 3))

    return _unbatch(make_op(out, (x, w, b), bw), squeeze)


def depthwise_conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 3x3 convolution (no channel mixing).  ``w`` is (C, 3, 3)."""
    x, squeeze = _batched(x)
    B, C, H, W = x.shape
    if w.shape != (C, 3, 3):
        raise DimensionError(f"depthwise_conv2d: kernel {w.shape} vs {C} channels")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wd = w.data
    out = np.zeros((B, C, H, W), dtype=np.result_type(xp, wd))
    for i, j in _shifts():
        out += xp[:, :, i:i + H, j:j + W] * wd[:, i, j][None, :, None, None]

    def bw(g):
        gw = np.empty(wd.shape, dtype=np.result_type(g, xp))
        gxp = np.zeros(xp.shape, dtype=np.result_type(g, wd))
        for i, j in _shifts():
            gw[:, i, j] = (g * xp[:, :, i:i + H, j:j + W]).sum(axis=(0, 2, 3))
            gxp[:, :, i:i + H, j:j + W] += g * wd[:, i, j][None, :, None, None]
        return gxp[:, :, 1:-1, 1:-1], gw

    return _unbatch(make_op(out, (x, w), bw), squeeze)


def pointwise_conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 convolution mixing channels.  ``w`` is (O, C)."""
    x, squeeze = _batched(x)
    B, C, H, W = x.shape
    O = w.shape[0]
    if w.shape != (O, C) or b.shape != (O,):
        raise DimensionError(f"pointwise_conv2d: weight {w.shape} vs {C} input channels")
    xm = x.data.reshape(B, C, H * W)
    wd = w.data
    out = (wd @ xm).reshape(B, O, H, W) + b.data[:, None, None]

    def bw(g):
        g2 = g.reshape(B, O, H * W)
        return ((wd.T @ g2).reshape(B, C, H, W), np.einsum("boz,bcz->oc", g2, xm), g.sum(axis=(0, 2, 3)))

    return _unbatch(make_op(out, (x, w, b), bw), squeeze)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; H and W must be multiples of k."""
    x, squeeze = _batched(x)
    B, C, H, W = x.shape
    if H % k or W % k:
        raise DimensionError(f"avg_pool2d: {H}x{W} not divisible by {k}")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def bw(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / np.float32(k * k)
        return (gx.astype(g.dtype, copy=False),)

    return _unbatch(make_op(out, (x,), bw), squeeze)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    x, squeeze = _batched(x)
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))
    y = make_op(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / np.float32(H * W), x.shape),))
    return reshape(y, (C,)) if squeeze else y


# ---------------------------------------------------------------------------
# encoders


def pixels(images) -> Tensor:
    """Stack rasters (or one raster) into a normalised float tensor."""
    if isinstance(images, ImageRaster):
        return Tensor._wrap(images.to_chw())
    return Tensor._wrap(np.stack([im.to_chw() for im in images]))


def global_encode(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """conv3x3 -> relu -> avgpool2 -> conv3x3 -> relu -> global avg pool -> linear.

    ``x`` is normalised pixels (3, S, S) or (B, 3, S, S); returns (d_v,) or (B, d_v).
    """
    h = relu(conv2d(x, p["conv1.w"], p["conv1.b"]))
    h = avg_pool2d(h, 2)
    h = relu(conv2d(h, p["conv2.w"], p["conv2.b"]))
    h = global_avg_pool(h)
    if h.ndim == 1:
        h = reshape(h, (1, h.shape[0]))
        return reshape(h @ p["proj.w"] + p["proj.b"], (p["proj.w"].shape[1],))
    return h @ p["proj.w"] + p["proj.b"]


def depthwise_separable_block(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Depthwise 3x3 (per channel) -> pointwise 1x1 (C -> C') -> relu."""
    C = x.shape[-3]
    if p["dw"].shape[0] != C:
        raise DimensionError(f"depthwise_separable_block: {C} input channels, kernel expects {p['dw'].shape[0]}")
    return relu(pointwise_conv2d(depthwise_conv2d(x, p["dw"]), p["pw.w"], p["pw.b"]))


def region_encode(x: Tensor, p: Mapping[str, Tensor], grid: int = 4) -> Tensor:
    """Two separable blocks, then average-pool each cell of a ``grid`` x ``grid``
    partition.  Returns (R, x) or (B, R, x) with R = grid**2, row-major cells."""
    h = depthwise_separable_block(x, {"dw": p["block1.dw"], "pw.w": p["block1.pw.w"], "pw.b": p["block1.pw.b"]})
    h = depthwise_separable_block(h, {"dw": p["block2.dw"], "pw.w": p["block2.pw.w"], "pw.b": p["block2.pw.b"]})
    size = h.shape[-1]
    if size % grid:
        raise DimensionError(f"region grid {grid} does not divide feature map size {size}")
    h = avg_pool2d(h, size // grid)
    if h.ndim == 3:
        C = h.shape[0]
        return transpose(reshape(h, (C, grid * grid)))
    B, C = h.shape[:2]
    return transpose(reshape(h, (B, C, grid * grid)))
