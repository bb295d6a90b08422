"""Flow Gated Network and its ablation variants.

Layout (widths per stage, ``xN`` = repeats of a separable pair)::

    RGB / flow channel : [1x3x3@16, 3x1x1@16] x2, pool 1x2x2,
                         [1x3x3@32, 3x1x1@32] x2, pool 1x2x2
    fusion             : rgb * sigmoid(flow), temporal max-pool 8x1x1
    merging block      : [1x3x3@64, 3x1x1@64] x2, pool 2x2x2,
                         [1x3x3@128, 3x1x1@128] x1, pool 2x2x2
    head               : global max-pool -> FC128 -> FC128 -> FC2

The C3D variant swaps each separable pair for a single full 3x3x3 conv.
"""

from __future__ import annotations

import enum
import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .tensor import Tensor, as_tensor, elementwise_mul, take_last


class ModelVariant(str, enum.Enum):
    RGB_ONLY = "rgb-only"
    OPT_ONLY = "opt-only"
    FUSION_P3D = "fusion-p3d"
    FUSION_C3D = "fusion-c3d"

    @classmethod
    def parse(cls, value) -> "ModelVariant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"rgbonly": "rgb-only", "optonly": "opt-only", "fusionp3d": "fusion-p3d",
                   "fusionc3d": "fusion-c3d", "flowonly": "opt-only"}
        key = aliases.get(key.replace("-", ""), key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown model variant {value!r}; choose from "
                             f"{', '.join(v.value for v in cls)}") from None

    @property
    def uses_rgb(self) -> bool:
        return self is not ModelVariant.OPT_ONLY

    @property
    def uses_flow(self) -> bool:
        return self is not ModelVariant.RGB_ONLY

    @property
    def separable(self) -> bool:
        return self is not ModelVariant.FUSION_C3D


# Reference totals for each variant; used only for the comparison column
# of :func:`param_table`.
REPORTED_TOTALS = {
    ModelVariant.RGB_ONLY: 248_402,
    ModelVariant.OPT_ONLY: 248_258,
    ModelVariant.FUSION_P3D: 272_690,
    ModelVariant.FUSION_C3D: 507_154,
}

CHANNEL_STAGES = ((16, 2), (32, 2))
MERGE_STAGES = ((64, 2), (128, 1))
CHANNEL_POOL = (1, 2, 2)
MERGE_POOL = (2, 2, 2)
HEAD_WIDTH = 128
N_CLASSES = 2
RGB_CHANNELS = slice(0, 3)
FLOW_CHANNELS = slice(3, 5)


@dataclass
class Stage:
    """Repeated conv units followed by one pooling layer."""

    units: list  # each unit is a list of Conv3d applied in order
    pool: tuple

    def convs(self):
        for unit in self.units:
            yield from unit


@dataclass
class FlowGatedModel:
    variant: ModelVariant
    rgb_channel: list | None
    flow_channel: list | None
    merging_block: list
    head: list
    input_shape: tuple = (64, 224, 224)
    fusion_pool: int = 8
    dtype: type = np.float32
    blocks: dict = field(init=False)

    def __post_init__(self):
        self.blocks = OrderedDict()
        if self.rgb_channel is not None:
            self.blocks["rgb_channel"] = _stage_params(self.rgb_channel)
        if self.flow_channel is not None:
            self.blocks["flow_channel"] = _stage_params(self.flow_channel)
        self.blocks["merging_block"] = _stage_params(self.merging_block)
        self.blocks["head"] = [p for fc in self.head for p in fc.parameters()]

    def parameters(self) -> list[Tensor]:
        return [p for params in self.blocks.values() for p in params]

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((p.name, p) for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "FlowGatedModel":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        self.dtype = dtype
        return self

    def __call__(self, batch, trace: dict | None = None) -> Tensor:
        return forward(self, batch, trace=trace)


def _stage_params(stages) -> list[Tensor]:
    return [p for st in stages for conv in st.convs() for p in conv.parameters()]


def _make_stages(prefix: str, cin: int, spec, pool, separable: bool) -> list[Stage]:
    stages = []
    for si, (width, repeats) in enumerate(spec):
        units = []
        for r in range(repeats):
            name = f"{prefix}.s{si}.u{r}"
            if separable:
                units.append([L.Conv3d((1, 3, 3), cin, width, name=f"{name}.spatial"),
                              L.Conv3d((3, 1, 1), width, width, name=f"{name}.temporal")])
            else:
                units.append([L.Conv3d((3, 3, 3), cin, width, name=f"{name}.full")])
            cin = width
        stages.append(Stage(units, tuple(pool)))
    return stages


def _init_params(model: FlowGatedModel, seed: int) -> None:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    convs = []
    for stack in (model.rgb_channel, model.flow_channel, model.merging_block):
        if stack is not None:
            convs.extend(c for st in stack for c in st.convs())
    for layer in convs + list(model.head):
        bound = np.sqrt(6.0 / layer.fan_in)
        layer.weight.data = rng.uniform(-bound, bound, layer.weight.shape).astype(model.dtype)
        layer.bias.data = np.zeros(layer.bias.shape, dtype=model.dtype)


def build_model(variant, seed: int = 0, input_shape=(64, 224, 224), fusion_pool: int = 8,
                dtype=np.float32) -> FlowGatedModel:
    """Construct and deterministically initialise a model.

    ``input_shape`` and ``fusion_pool`` only affect geometry checks and the
    fusion pooling window; the parameter set is identical for any geometry.
    """
    variant = ModelVariant.parse(variant)
    sep = variant.separable
    rgb = _make_stages("rgb", 3, CHANNEL_STAGES, CHANNEL_POOL, sep) if variant.uses_rgb else None
    flow = _make_stages("flow", 2, CHANNEL_STAGES, CHANNEL_POOL, sep) if variant.uses_flow else None
    merge = _make_stages("merge", CHANNEL_STAGES[-1][0], MERGE_STAGES, MERGE_POOL, sep)
    head = [L.Dense(MERGE_STAGES[-1][0], HEAD_WIDTH, name="head.fc0"),
            L.Dense(HEAD_WIDTH, HEAD_WIDTH, name="head.fc1"),
            L.Dense(HEAD_WIDTH, N_CLASSES, name="head.out")]
    model = FlowGatedModel(variant, rgb, flow, merge, head, tuple(input_shape), int(fusion_pool), dtype)
    _init_params(model, seed)
    return model


def _run_stages(x: Tensor, stages, final_activation=L.relu) -> Tensor:
    convs = [c for st in stages for c in st.convs()]
    last = convs[-1]
    for st in stages:
        for conv in st.convs():
            x = conv(x)
            x = final_activation(x) if conv is last else L.relu(x)
        x = L.maxpool3d(x, st.pool)
    return x


def gate_fusion(rgb_feat: Tensor, gate: Tensor, pool: int = 8) -> Tensor:
    """Temporal max-pool of ``rgb_feat * gate`` with window ``pool x 1 x 1``."""
    rgb_feat, gate = as_tensor(rgb_feat), as_tensor(gate)
    if rgb_feat.shape != gate.shape:
        raise ValueError(f"gate shape {gate.shape} does not match features {rgb_feat.shape}")
    return L.maxpool3d(elementwise_mul(rgb_feat, gate), (pool, 1, 1))


def forward(model: FlowGatedModel, batch, trace: dict | None = None) -> Tensor:
    """Logits ``(B, 2)`` for a ``(B, T, H, W, 5)`` batch of (R, G, B, u, v) volumes."""
    batch = as_tensor(batch)
    expected = tuple(model.input_shape) + (5,)
    if batch.ndim != 5 or batch.shape[1:] != expected:
        raise ValueError(f"expected input shape (B, {', '.join(map(str, expected))}), got {batch.shape}")
    if batch.dtype != model.dtype:
        batch = Tensor(batch.data.astype(model.dtype), dtype=model.dtype)
    v = model.variant
    rgb_feat = flow_feat = None
    if v.uses_rgb:
        rgb_feat = _run_stages(take_last(batch, 0, 3), model.rgb_channel, L.relu)
    if v.uses_flow:
        flow_feat = _run_stages(take_last(batch, 3, 5), model.flow_channel, L.sigmoid)
    if rgb_feat is not None and flow_feat is not None:
        fused = gate_fusion(rgb_feat, flow_feat, model.fusion_pool)
    else:
        fused = L.maxpool3d(rgb_feat if rgb_feat is not None else flow_feat, (model.fusion_pool, 1, 1))
    merged = _run_stages(fused, model.merging_block, L.relu)
    h = L.global_maxpool(merged)
    fc0, fc1, out = model.head
    h = L.relu(fc0(h))
    h = L.relu(fc1(h))
    logits = out(h)
    if trace is not None:
        if rgb_feat is not None:
            trace["rgb_channel"] = rgb_feat.data
        if flow_feat is not None:
            trace["flow_channel"] = flow_feat.data
        trace["fusion"] = fused.data
        trace["merging_block"] = merged.data
        trace["logits"] = logits.data
    return logits


def count_params(model: FlowGatedModel, block: str | None = None) -> int:
    if block is not None:
        return sum(p.size for p in model.blocks[block])
    return sum(p.size for p in model.parameters())


def param_table(model: FlowGatedModel) -> list[tuple[str, int]]:
    """Rows ``(block, count)`` followed by ``total`` and the reported total."""
    rows = [(name, sum(p.size for p in params)) for name, params in model.blocks.items()]
    total = sum(n for _, n in rows)
    rows.append(("total", total))
    rows.append(("reported_total", REPORTED_TOTALS[model.variant]))
    rows.append(("difference", total - REPORTED_TOTALS[model.variant]))
    return rows


def format_param_table(model: FlowGatedModel) -> str:
    lines = [f"variant: {model.variant.value}", f"{'block':<16}{'params':>12}"]
    for name, n in param_table(model):
        lines.append(f"{name:<16}{n:>12,}")
    return "\n".join(lines)


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"FGN1"
_VARIANT_TAGS = {v: i for i, v in enumerate(ModelVariant)}


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(model: FlowGatedModel) -> bytes:
    """Serialise parameters as little-endian float32.

    Layout: magic, u32 variant tag, u32 tensor count, then per tensor
    u32 name length, name bytes, u32 rank, u64 dims, float32 values.
    """
    buf = io.BytesIO()
    named = model.named_parameters()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", _VARIANT_TAGS[model.variant], len(named)))
    for name, t in named.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes) -> tuple[ModelVariant, "OrderedDict[str, np.ndarray]"]:
    view = memoryview(blob)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a flow-gated checkpoint (bad magic)")
    try:
        pos = 4
        tag, count = struct.unpack_from("<II", view, pos)
        pos += 8
        variants = list(ModelVariant)
        if tag >= len(variants):
            raise CheckpointError(f"unknown variant tag {tag}")
        tensors = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            tensors[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes in checkpoint")
    return variants[tag], tensors


def save_checkpoint(model: FlowGatedModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(model))


def load_state(model: FlowGatedModel, tensors) -> FlowGatedModel:
    named = model.named_parameters()
    if list(named) != list(tensors):
        missing = set(named) ^ set(tensors)
        raise CheckpointError(f"checkpoint tensors do not match the model: {sorted(missing)[:4]}")
    for name, p in named.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
        p.data = np.array(arr, dtype=model.dtype)
        p.grad = None
    return model


def load_checkpoint(path, input_shape=(64, 224, 224), fusion_pool: int = 8,
                    variant=None) -> FlowGatedModel:
    with open(path, "rb") as fh:
        stored, tensors = loads_checkpoint(fh.read())
    if variant is not None and ModelVariant.parse(variant) is not stored:
        raise CheckpointError(f"checkpoint holds variant {stored.value}, expected {ModelVariant.parse(variant).value}")
    model = build_model(stored, seed=0, input_shape=input_shape, fusion_pool=fusion_pool)
    return load_state(model, tensors)
