"""Clip-to-sample pipeline: flow, motion-intensity crop, temporal sampling, augmentation."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .flow import FarnebackParams, FlowField, farneback_flow
from .imops import resize_bilinear, rotation_grid, bilinear_sample, to_gray

TARGET_FRAMES = 64
CROP_SIDE = 224
FLOW_BOUND = 20.0
BRIGHTNESS_RANGE = (0.8, 1.2)
ROTATION_RANGE_DEG = (-10.0, 10.0)

LABELS = ("NonViolent", "Violent")  # class index = position


def label_index(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label not in (0, 1):
            raise ValueError(f"label index must be 0 or 1, got {label}")
        return int(label)
    try:
        return LABELS.index(label)
    except ValueError:
        raise ValueError(f"unknown label {label!r}; expected one of {LABELS}") from None


@dataclass
class VideoClip:
    frames: list
    label: str = "NonViolent"
    source_id: str = ""
    fps: float = 30.0

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("a clip needs at least two frames")
        shape = np.shape(self.frames[0])
        if len(shape) != 3 or shape[2] != 3:
            raise ValueError(f"frames must be HxWx3, got {shape}")
        if any(np.shape(f) != shape for f in self.frames):
            raise ValueError("all frames of a clip must share dimensions")

    def __len__(self):
        return len(self.frames)


@dataclass
class IntensityMap:
    plane: np.ndarray
    n_fields: int


@dataclass(frozen=True)
class CropWindow:
    top: int
    left: int
    side: int = CROP_SIDE


@dataclass
class ClipSample:
    data: np.ndarray  # (T, side, side, 5) float32
    label: int
    augmentation: dict = field(default_factory=dict)
    crop: CropWindow | None = None


def motion_intensity_map(flows) -> IntensityMap:
    """Per-pixel sum of flow-vector norms."""
    flows = list(flows)
    if not flows:
        raise ValueError("motion_intensity_map needs at least one flow field")
    shape = flows[0].u.shape
    plane = np.zeros(shape, dtype=np.float64)
    for f in flows:
        if f.u.shape != shape:
            raise ValueError(f"flow fields differ in size: {f.u.shape} vs {shape}")
        plane += np.hypot(f.u, f.v)
    return IntensityMap(plane, len(flows))


def select_crop_window(intensity, side: int = CROP_SIDE) -> CropWindow:
    """In-bounds ``side x side`` window with the most total intensity.

    Window sums come from an integral image; ``argmax`` on the row-major
    score grid breaks ties towards the smallest top, then smallest left.
    """
    plane = intensity.plane if isinstance(intensity, IntensityMap) else np.asarray(intensity)
    H, W = plane.shape
    if H < side or W < side:
        raise ValueError(f"intensity map {H}x{W} is smaller than the {side}px crop")
    S = np.zeros((H + 1, W + 1), dtype=np.float64)
    S[1:, 1:] = np.cumsum(np.cumsum(plane, axis=0), axis=1)
    sums = S[side:, side:] - S[:-side, side:] - S[side:, :-side] + S[:-side, :-side]
    top, left = np.unravel_index(int(np.argmax(sums)), sums.shape)
    return CropWindow(int(top), int(left), side)


def sample_frames(n_frames: int, target: int = TARGET_FRAMES) -> list[int]:
    """Uniformly spaced indices ``round(k (n-1) / (target-1))``, halves rounded up."""
    if n_frames < 2:
        raise ValueError(f"need at least two frames to sample, got {n_frames}")
    if target < 1:
        raise ValueError("target length must be positive")
    if target == 1:
        return [0]
    step = (n_frames - 1) / (target - 1)
    return [min(n_frames - 1, int(math.floor(k * step + 0.5))) for k in range(target)]


def resize_for_crop(frame: np.ndarray, side: int = CROP_SIDE) -> np.ndarray:
    """Upscale (aspect preserved) so the short side is at least ``side``."""
    H, W = frame.shape[:2]
    if min(H, W) >= side:
        return frame
    s = side / min(H, W)
    h, w = max(side, int(math.ceil(H * s - 1e-9))), max(side, int(math.ceil(W * s - 1e-9)))
    out = resize_bilinear(frame.astype(np.float64), h, w)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def clip_flows(frames, params: FarnebackParams | None = None) -> list[FlowField]:
    """Flow between consecutive frames; the last field is repeated to match the frame count."""
    grays = [to_gray(f) for f in frames]
    flows = []
    for a, b, ga, gb in zip(frames[:-1], frames[1:], grays[:-1], grays[1:]):
        if a is b or np.array_equal(a, b):
            flows.append(FlowField.zeros(*ga.shape))
        else:
            flows.append(farneback_flow(ga, gb, params))
    flows.append(flows[-1])
    return flows


def assemble_sample(clip: VideoClip, target: int = TARGET_FRAMES, side: int = CROP_SIDE,
                    params: FarnebackParams | None = None, flow_bound: float = FLOW_BOUND) -> ClipSample:
    """Build the ``(target, side, side, 5)`` network input for ``clip``.

    Frames are upscaled if needed, sampled uniformly, paired into flow
    fields, and cropped with one static window chosen from the summed flow
    magnitudes. RGB maps to [0, 1]; flow is clamped to ``+-flow_bound`` and
    scaled to [-1, 1].
    """
    idx = sample_frames(len(clip.frames), target)
    frames = [resize_for_crop(np.asarray(clip.frames[i]), side) for i in idx]
    flows = clip_flows(frames, params)
    window = select_crop_window(motion_intensity_map(flows), side)
    t, l = window.top, window.left
    out = np.empty((target, side, side, 5), dtype=np.float32)
    for k, (frame, f) in enumerate(zip(frames, flows)):
        out[k, ..., :3] = frame[t:t + side, l:l + side].astype(np.float32) / 255.0
        out[k, ..., 3] = np.clip(f.u[t:t + side, l:l + side], -flow_bound, flow_bound) / flow_bound
        out[k, ..., 4] = np.clip(f.v[t:t + side, l:l + side], -flow_bound, flow_bound) / flow_bound
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite values in assembled sample")
    return ClipSample(out, label_index(clip.label), {}, window)


def augment(sample: ClipSample, seed: int | None = None, factor: float | None = None,
            angle: float | None = None) -> ClipSample:
    """Random brightness scaling and rotation, shared by all frames.

    ``factor`` and ``angle`` override the draws from ``seed``. Flow planes are
    resampled like the image and their vectors rotated by the same angle.
    """
    rng = np.random.default_rng(seed)
    f_draw = rng.uniform(*BRIGHTNESS_RANGE)
    a_draw = rng.uniform(*ROTATION_RANGE_DEG)
    factor = f_draw if factor is None else float(factor)
    angle = a_draw if angle is None else float(angle)
    data = sample.data.copy()
    data[..., :3] = np.clip(data[..., :3] * np.float32(factor), 0.0, 1.0)
    if angle != 0.0:
        data = rotate_volume(data, angle)
    record = {"seed": seed, "factor": factor, "angle": angle}
    return ClipSample(data, sample.label, record, sample.crop)


def rotate_volume(data: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a ``(T, H, W, 5)`` volume about the frame centre, zero fill."""
    T, H, W, C = data.shape
    ys, xs = rotation_grid(H, W, angle)
    planar = np.ascontiguousarray(data.transpose(1, 2, 0, 3))
    rot = bilinear_sample(planar, ys, xs, fill=0.0).transpose(2, 0, 1, 3)
    out = np.ascontiguousarray(rot, dtype=np.float32)
    th = np.deg2rad(angle)
    c, s = np.float32(np.cos(th)), np.float32(np.sin(th))
    u, v = out[..., 3].copy(), out[..., 4].copy()
    out[..., 3] = np.clip(c * u - s * v, -1.0, 1.0)
    out[..., 4] = np.clip(s * u + c * v, -1.0, 1.0)
    return out


# -- sample cache -------------------------------------------------------------------

CLIP_MAGIC = b"CLP1"


def save_sample(sample: ClipSample, path) -> None:
    """Header (magic, u8 label, 4 x u32 dims) then float32 LE values."""
    data = np.ascontiguousarray(sample.data, dtype="<f4")
    if data.ndim != 4:
        raise ValueError(f"sample must be 4-D, got {data.shape}")
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC + struct.pack("<B4I", sample.label, *data.shape))
        fh.write(data.tobytes())


def load_sample(path) -> ClipSample:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CLIP_MAGIC:
        raise ValueError(f"{path}: not a CLP1 sample")
    label, *dims = struct.unpack_from("<B4I", blob, 4)
    n = int(np.prod(dims))
    data = np.frombuffer(blob, dtype="<f4", count=n, offset=21).reshape(dims).astype(np.float32)
    return ClipSample(data, int(label))
