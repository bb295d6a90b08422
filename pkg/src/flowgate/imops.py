"""Small raster helpers: grayscale, bilinear resize, bilinear sampling, rotation."""

from __future__ import annotations

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(frame: np.ndarray) -> np.ndarray:
    """8-bit RGB ``(H, W, 3)`` to float64 luma in [0, 1]."""
    frame = np.asarray(frame)
    if frame.ndim == 2:
        return frame.astype(np.float64) / 255.0
    return (frame[..., :3].astype(np.float64) @ LUMA) / 255.0


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float | None = None) -> np.ndarray:
    """Sample ``img`` (H, W[, C...]) at real coordinates.

    With ``fill=None`` coordinates are clamped to the image; otherwise samples
    falling outside ``[0, H-1] x [0, W-1]`` take the value ``fill``.
    """
    H, W = img.shape[:2]
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    if fill is None:
        yc = np.clip(ys, 0, H - 1)
        xc = np.clip(xs, 0, W - 1)
    else:
        yc, xc = ys, xs
    y0 = np.floor(yc)
    x0 = np.floor(xc)
    wy = yc - y0
    wx = xc - x0
    y0 = y0.astype(np.intp)
    x0 = x0.astype(np.intp)
    y1 = y0 + 1
    x1 = x0 + 1
    if fill is not None:
        inside = (ys >= 0) & (ys <= H - 1) & (xs >= 0) & (xs <= W - 1)
    y0c, y1c = np.clip(y0, 0, H - 1), np.clip(y1, 0, H - 1)
    x0c, x1c = np.clip(x0, 0, W - 1), np.clip(x1, 0, W - 1)
    extra = img.ndim - 2
    shape = wy.shape + (1,) * extra
    wdtype = img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64
    wy = wy.reshape(shape).astype(wdtype)
    wx = wx.reshape(shape).astype(wdtype)
    top = img[y0c, x0c] * (1 - wx) + img[y0c, x1c] * wx
    bot = img[y1c, x0c] * (1 - wx) + img[y1c, x1c] * wx
    out = top * (1 - wy) + bot * wy
    if fill is not None:
        out = np.where(inside.reshape(shape), out, fill)
    return out


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with pixel-centre alignment; returns float64."""
    H, W = img.shape[:2]
    if (H, W) == (out_h, out_w):
        return np.asarray(img, dtype=np.float64)
    ys = (np.arange(out_h) + 0.5) * (H / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (W / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(np.asarray(img, dtype=np.float64), yy, xx)


def rotation_grid(H: int, W: int, angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates realising a rotation by ``angle_deg`` about the centre.

    Angles are measured in the image frame (x right, y down), so a positive
    angle maps the +x direction towards +y.
    """
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
    # inverse map: source = R(-theta) @ dest
    src_x = c * xx + s * yy + cx
    src_y = -s * xx + c * yy + cy
    return src_y, src_x


def rotate(img: np.ndarray, angle_deg: float, fill: float = 0.0) -> np.ndarray:
    """Rotate an ``(H, W, ...)`` raster about its centre, bilinear, constant fill."""
    ys, xs = rotation_grid(img.shape[0], img.shape[1], angle_deg)
    return bilinear_sample(img, ys, xs, fill=fill)
