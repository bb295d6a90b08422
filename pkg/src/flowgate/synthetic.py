"""Synthetic images and clips with known motion, for oracles and fixtures."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .preprocess import VideoClip


def smooth_texture(height: int, width: int, shift=(0.0, 0.0), seed: int = 0, n_blobs: int = 60,
                   sigma_range=(5.0, 10.0)) -> np.ndarray:
    """Sum of random Gaussian bumps in [0.1, 0.9], translated by ``shift = (dx, dy)``.

    The texture is analytic, so a shifted copy is exact rather than resampled.
    """
    rng = np.random.default_rng(seed)
    cy = rng.uniform(-10, height + 10, n_blobs)
    cx = rng.uniform(-10, width + 10, n_blobs)
    s = rng.uniform(*sigma_range, n_blobs)
    amp = rng.uniform(-1, 1, n_blobs)
    dx, dy = shift
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    img = np.zeros((height, width))
    for i in range(n_blobs):
        img += amp[i] * np.exp(-((xx - dx - cx[i]) ** 2 + (yy - dy - cy[i]) ** 2) / (2 * s[i] ** 2))
    ref = np.zeros((height, width))
    for i in range(n_blobs):
        ref += amp[i] * np.exp(-((xx - cx[i]) ** 2 + (yy - cy[i]) ** 2) / (2 * s[i] ** 2))
    lo, hi = ref.min(), ref.max()
    return np.clip((img - lo) / (hi - lo + 1e-12) * 0.8 + 0.1, 0.0, 1.0)


def gaussian_blob(height: int, width: int, center, sigma: float = 8.0, amplitude: float = 0.8,
                  background: float = 0.1) -> np.ndarray:
    cy, cx = center
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return background + amplitude * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))


def gray_to_rgb8(img: np.ndarray) -> np.ndarray:
    return np.repeat(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)[..., None], 3, axis=-1)


def moving_square_clip(n_frames: int, height: int, width: int, side: int = 12, start=(20, 10),
                       step=(2, 0), label: str = "Violent", source_id: str = "synthetic") -> VideoClip:
    """Bright square on a dark background moving ``step = (dx, dy)`` px per frame."""
    frames = []
    top, left = start
    for k in range(n_frames):
        f = np.full((height, width, 3), 20, dtype=np.uint8)
        x0 = int(left + k * step[0])
        y0 = int(top + k * step[1])
        f[max(0, y0):max(0, y0 + side), max(0, x0):max(0, x0 + side)] = (230, 200, 60)
        frames.append(f)
    return VideoClip(frames, label=label, source_id=source_id)


def blob_clip(n_frames: int, size: int, moving: bool, seed: int, label: str | None = None,
              source_id: str = "synthetic", speed: float = 1.0) -> VideoClip:
    """Soft coloured blob on a smooth static background.

    The blob drifts at ``speed`` px/frame along a random direction when
    ``moving`` and stays put otherwise; it never leaves the frame.
    """
    rng = np.random.default_rng(seed)
    bg = smooth_texture(size, size, seed=int(rng.integers(1 << 30)), n_blobs=12, sigma_range=(6.0, 12.0))
    bg = 0.25 + 0.3 * (bg - 0.1) / 0.8
    sigma = size / 10
    margin = 2 * sigma
    theta = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.cos(theta), np.sin(theta)]) if moving else np.zeros(2)
    span = vel * (n_frames - 1)
    lo = np.maximum(margin, margin - span)
    hi = np.minimum(size - margin, size - margin - span)
    if np.any(lo > hi):
        raise ValueError("blob trajectory does not fit the frame; lower speed or frame count")
    pos0 = rng.uniform(lo, hi)
    colour = rng.uniform(0.6, 1.0, 3)
    frames = []
    for k in range(n_frames):
        x, y = pos0 + k * vel
        blob = gaussian_blob(size, size, (y, x), sigma=sigma, amplitude=1.0, background=0.0)
        rgb = bg[..., None] * (1 - blob[..., None]) + colour * blob[..., None]
        frames.append(np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8))
    label = label or ("Violent" if moving else "NonViolent")
    return VideoClip(frames, label=label, source_id=source_id)


def write_blob_dataset(root, n_per_label: int = 4, n_frames: int = 24, size: int = 48, seed: int = 0,
                       flip_labels: bool = False) -> Path:
    """Write a ``root/{Violent,NonViolent}/<source>__<clip>`` tree of blob clips.

    With ``flip_labels`` the static clips are filed as Violent and vice versa.
    """
    from .datakit import save_clip

    root = Path(root)
    k = 0
    for moving in (True, False):
        for i in range(n_per_label):
            label = "Violent" if moving != flip_labels else "NonViolent"
            clip = blob_clip(n_frames, size, moving, seed=seed * 1000 + k, label=label)
            save_clip(clip, root / label / f"src{k:03d}__clip{i:02d}")
            k += 1
    return root
