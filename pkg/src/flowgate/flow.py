"""Dense optical flow by polynomial expansion (Farnebäck).

Each neighbourhood is approximated by a quadratic ``x'Ax + b'x + c`` fitted by
Gaussian-weighted least squares. If the second frame is the first translated
by ``d`` then ``A`` is shared and ``b2 = b1 - 2 A d``, so ``d`` follows from a
2x2 solve. Refinement runs coarse to fine over a pyramid; at each iteration
the second frame's expansion is sampled at ``x + d`` and the per-pixel
constraints are pooled over a window before solving.

Conventions: ``u`` is column displacement (right positive), ``v`` is row
displacement (down positive), and ``prev(x) ~ next(x + (u, v))``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .imops import bilinear_sample, resize_bilinear

log = logging.getLogger(__name__)

# Determinant regulariser for the pooled 2x2 systems: 1e-3 for window sums of
# 0..255 intensities, rescaled below to window means of [0, 1] intensities.
_DET_EPS = 1e-3 / 255.0**4


@dataclass(frozen=True)
class FarnebackParams:
    pyramid_scale: float = 0.5
    levels: int = 3
    window_size: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1

    def __post_init__(self):
        if not 0 < self.pyramid_scale < 1:
            raise ValueError("pyramid_scale must lie in (0, 1)")
        if self.levels < 1 or self.iterations < 1:
            raise ValueError("levels and iterations must be >= 1")
        if self.window_size % 2 == 0 or self.poly_n % 2 == 0:
            raise ValueError("window_size and poly_n must be odd")
        if self.poly_sigma <= 0:
            raise ValueError("poly_sigma must be positive")
        if self.window_size < self.poly_n:
            raise ValueError("window_size must be >= poly_n")


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"u {self.u.shape} and v {self.v.shape} must be matching planes")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def as_array(self) -> np.ndarray:
        """``(H, W, 2)`` array with ``[..., 0] = u``."""
        return np.stack([self.u, self.v], axis=-1)

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))


class PolyExpansion(NamedTuple):
    """Per-pixel quadratic ``x'Ax + b'x + c`` with ``A = [[a11, a12], [a12, a22]]``.

    The first coordinate is the column (x), the second the row (y).
    """

    a11: np.ndarray
    a22: np.ndarray
    a12: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    c: np.ndarray


def _poly_kernels(poly_n: int, sigma: float):
    r = (poly_n - 1) // 2
    k = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-k**2 / (2 * sigma**2))
    g /= g.sum()
    return k, g


def polynomial_expansion(gray: np.ndarray, poly_n: int = 5, poly_sigma: float = 1.1) -> PolyExpansion:
    """Weighted least-squares quadratic fit around every pixel.

    The window has radius ``(poly_n - 1) // 2`` with Gaussian applicability of
    width ``poly_sigma``; borders are reflected. Because the applicability is
    the same everywhere the normal matrix is constant, so the fit reduces to
    six separable correlations followed by one 6x6 solve.
    """
    if poly_sigma <= 0:
        raise ValueError("poly_sigma must be positive")
    if poly_n < 1 or poly_n % 2 == 0:
        raise ValueError("poly_n must be a positive odd integer")
    img = np.asarray(gray, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"polynomial_expansion needs a single-channel image, got {img.shape}")
    k, g = _poly_kernels(poly_n, poly_sigma)
    # basis order: 1, x, y, x^2, y^2, xy  (x = column, y = row)
    powers = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]
    filt = {p: g * k**p for p in range(3)}

    def corr(px, py):
        rows = ndimage.correlate1d(img, filt[py], axis=0, mode="reflect")
        return ndimage.correlate1d(rows, filt[px], axis=1, mode="reflect")

    rhs = np.stack([corr(px, py) for px, py in powers], axis=-1)

    ww = np.outer(g, g)
    yy, xx = np.meshgrid(k, k, indexing="ij")
    basis = np.stack([np.ones_like(xx), xx, yy, xx**2, yy**2, xx * yy], axis=-1)
    G = np.einsum("ij,ija,ijb->ab", ww, basis, basis)
    coef = rhs @ np.linalg.inv(G).T
    c, b1, b2, a11, a22, axy = np.moveaxis(coef, -1, 0)
    return PolyExpansion(a11, a22, axy / 2.0, b1, b2, c)


def _gaussian_pyramid(img: np.ndarray, scale: float, levels: int) -> list[np.ndarray]:
    H, W = img.shape
    pyr = [img]
    for k in range(1, levels):
        s = scale**k
        sigma = (1.0 / s - 1.0) * 0.5
        smooth = ndimage.gaussian_filter(img, sigma, mode="reflect")
        h, w = max(1, int(round(H * s))), max(1, int(round(W * s)))
        pyr.append(resize_bilinear(smooth, h, w))
    return pyr


def _constraints(R0: PolyExpansion, R1: PolyExpansion, u: np.ndarray, v: np.ndarray):
    """Averaged ``A`` and right-hand side ``A d - (b2(x+d) - b1) / 2`` per pixel."""
    H, W = u.shape
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    stacked = np.stack([R1.a11, R1.a22, R1.a12, R1.b1, R1.b2], axis=-1)
    w = bilinear_sample(stacked, yy + v, xx + u)
    a11 = 0.5 * (R0.a11 + w[..., 0])
    a22 = 0.5 * (R0.a22 + w[..., 1])
    a12 = 0.5 * (R0.a12 + w[..., 2])
    db1 = -0.5 * (w[..., 3] - R0.b1) + a11 * u + a12 * v
    db2 = -0.5 * (w[..., 4] - R0.b2) + a12 * u + a22 * v
    return a11, a22, a12, db1, db2


def _solve(a11, a22, a12, db1, db2, window: int):
    box = lambda z: ndimage.uniform_filter(z, size=window, mode="reflect")
    g11 = box(a11 * a11 + a12 * a12)
    g22 = box(a12 * a12 + a22 * a22)
    g12 = box(a12 * (a11 + a22))
    h1 = box(a11 * db1 + a12 * db2)
    h2 = box(a12 * db1 + a22 * db2)
    det = g11 * g22 - g12 * g12
    det = np.maximum(det, 0.0) + _DET_EPS / float(window) ** 4
    u = (g22 * h1 - g12 * h2) / det
    v = (g11 * h2 - g12 * h1) / det
    return u, v


def farneback_flow(prev: np.ndarray, nxt: np.ndarray, params: FarnebackParams | None = None) -> FlowField:
    """Dense flow from ``prev`` to ``nxt`` (single-channel, values in [0, 1])."""
    params = params or FarnebackParams()
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.ndim != 2 or nxt.ndim != 2:
        raise ValueError(f"farneback_flow needs single-channel images, got {prev.shape} and {nxt.shape}")
    if prev.shape != nxt.shape:
        raise ValueError(f"frame sizes differ: {prev.shape} vs {nxt.shape}")
    H, W = prev.shape
    levels = params.levels
    while levels > 1 and min(H, W) * params.pyramid_scale ** (levels - 1) < params.poly_n:
        levels -= 1
    if levels != params.levels:
        log.info("image %dx%d too small for %d pyramid levels; using %d", W, H, params.levels, levels)

    pyr0 = _gaussian_pyramid(prev, params.pyramid_scale, levels)
    pyr1 = _gaussian_pyramid(nxt, params.pyramid_scale, levels)
    u = v = None
    for lvl in range(levels - 1, -1, -1):
        I0, I1 = pyr0[lvl], pyr1[lvl]
        h, w = I0.shape
        if u is None:
            u = np.zeros((h, w))
            v = np.zeros((h, w))
        else:
            ph, pw = u.shape
            u = resize_bilinear(u, h, w) * (w / pw)
            v = resize_bilinear(v, h, w) * (h / ph)
        R0 = polynomial_expansion(I0, params.poly_n, params.poly_sigma)
        R1 = polynomial_expansion(I1, params.poly_n, params.poly_sigma)
        for _ in range(params.iterations):
            u, v = _solve(*_constraints(R0, R1, u, v), params.window_size)
    return FlowField(u, v)


def flow_magnitude(flow: FlowField) -> np.ndarray:
    return np.hypot(flow.u, flow.v)


# -- debug raster -----------------------------------------------------------------

FLO_MAGIC = b"FLO1"


def write_flo(flow: FlowField, path) -> None:
    """16-byte header (magic, u32 width, u32 height, u32 zero) then u and v planes as float32 LE."""
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC + struct.pack("<III", flow.width, flow.height, 0))
        fh.write(np.ascontiguousarray(flow.u, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(flow.v, dtype="<f4").tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FLO_MAGIC:
        raise ValueError(f"{path}: not a FLO1 raster")
    width, height, _ = struct.unpack_from("<III", blob, 4)
    n = width * height
    planes = np.frombuffer(blob, dtype="<f4", count=2 * n, offset=16)
    return FlowField(planes[:n].reshape(height, width).astype(np.float32),
                     planes[n:].reshape(height, width).astype(np.float32))
