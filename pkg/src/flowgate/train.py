"""Training loop, evaluation and run configuration."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datakit import Manifest, load_clip
from .layers import softmax_cross_entropy
from .model import FlowGatedModel, ModelVariant, build_model, forward, load_checkpoint, save_checkpoint
from .optim import SGD
from .preprocess import ClipSample, assemble_sample, augment, label_index, load_sample, save_sample
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "step", "lr", "loss", "train_acc", "test_acc")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: ModelVariant = ModelVariant.FUSION_P3D
    base_lr: float = 0.01
    momentum: float = 0.9
    decay: float = 1e-6
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    augment: bool = False
    frames: int = 64
    side: int = 224
    fusion_pool: int = 8
    data_root: str = "."
    cache_dir: str = "cache"
    manifest_path: str = "manifest.jsonl"
    checkpoint_path: str = "model.fgn"
    metrics_path: str = "metrics.csv"

    def __post_init__(self):
        self.variant = ModelVariant.parse(self.variant)
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    @property
    def input_shape(self) -> tuple:
        return (self.frames, self.side, self.side)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(fields[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        return cls.from_mapping({**parse_config_text(Path(path).read_text(encoding="utf-8")), **(overrides or {})})

    def to_text(self) -> str:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            v = v.value if isinstance(v, ModelVariant) else v
            out.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(out) + "\n"


def parse_config_text(text: str) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def _coerce(f: dataclasses.Field, raw):
    if not isinstance(raw, str):
        return raw
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if kind == "bool":
        low = raw.lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"{f.name}: not a boolean: {raw!r}")
        return low in ("1", "true", "yes")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


# -- data --------------------------------------------------------------------------

def cache_key(clip_path: str) -> str:
    digest = hashlib.sha1(clip_path.encode("utf-8")).hexdigest()[:12]
    stem = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in clip_path)[-48:]
    return f"{stem}-{digest}.clp"


def preprocess_manifest(manifest: Manifest, data_root, cache_dir, frames: int = 64, side: int = 224,
                        overwrite: bool = False) -> dict:
    """Write one cached sample per manifest entry; returns ``{clip_path: cache file}``."""
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    out = {}
    for e in manifest.entries:
        target = cache / cache_key(e.path)
        if overwrite or not target.exists():
            clip = load_clip(Path(data_root) / e.path, e.label, e.source_id)
            save_sample(assemble_sample(clip, target=frames, side=side), target)
        out[e.path] = target
    return out


class SampleStore:
    """Loads cached samples, preprocessing missing ones on first use."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self._memo: dict[str, ClipSample] = {}

    def get(self, entry) -> ClipSample:
        if entry.path not in self._memo:
            path = Path(self.config.cache_dir) / cache_key(entry.path)
            if not path.exists():
                preprocess_manifest(Manifest([entry]), self.config.data_root, self.config.cache_dir,
                                    self.config.frames, self.config.side)
            sample = load_sample(path)
            if sample.label != label_index(entry.label):
                sample = ClipSample(sample.data, label_index(entry.label))
            self._memo[entry.path] = sample
        return self._memo[entry.path]


def _sample_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


# -- evaluation ----------------------------------------------------------------------

@dataclass
class EvalReport:
    split: str
    accuracy: float
    confusion: np.ndarray  # rows = true label, cols = predicted
    predictions: list = field(default_factory=list)  # (clip_path, true, predicted, p_violent)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def csv_rows(self) -> list:
        c = self.confusion
        return [["split", "n", "accuracy", "true_nonviolent_pred_nonviolent", "true_nonviolent_pred_violent",
                 "true_violent_pred_nonviolent", "true_violent_pred_violent"],
                [self.split, self.total, f"{self.accuracy:.6f}", int(c[0, 0]), int(c[0, 1]), int(c[1, 0]), int(c[1, 1])]]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(self.csv_rows())

    def write_predictions(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["clip", "label", "predicted", "p_violent"])
            for path_, y, p, prob in self.predictions:
                w.writerow([path_, y, p, f"{prob:.6f}"])


def predict(model: FlowGatedModel, data: np.ndarray) -> np.ndarray:
    """Class probabilities for a ``(B, T, H, W, 5)`` array."""
    from .layers import softmax

    with no_grad():
        logits = forward(model, Tensor(data, dtype=model.dtype))
    return softmax(logits.data.astype(np.float64))


def evaluate_model(model: FlowGatedModel, entries, store: SampleStore, split: str = "test") -> EvalReport:
    entries = list(entries)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    confusion = np.zeros((2, 2), dtype=np.int64)
    preds = []
    for e in entries:
        s = store.get(e)
        prob = predict(model, s.data[None])[0]
        p = int(np.argmax(prob))
        confusion[s.label, p] += 1
        preds.append((e.path, s.label, p, float(prob[1])))
    acc = float(np.trace(confusion) / confusion.sum())
    return EvalReport(split, acc, confusion, preds)


def evaluate(checkpoint, manifest: Manifest, split: str, config: TrainConfig) -> EvalReport:
    model = load_checkpoint(checkpoint, input_shape=config.input_shape, fusion_pool=config.fusion_pool,
                            variant=config.variant)
    return evaluate_model(model, manifest.subset(split), SampleStore(config), split)


# -- training ------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    step: int
    lr: float
    loss: float
    train_acc: float
    test_acc: float | None


@dataclass
class TrainResult:
    model: FlowGatedModel
    epochs: list
    step_lrs: list
    step_losses: list


def _format_row(m: EpochMetrics) -> list:
    return [m.epoch, m.step, repr(m.lr), f"{m.loss:.8f}", f"{m.train_acc:.6f}",
            "" if m.test_acc is None else f"{m.test_acc:.6f}"]


def train(config: TrainConfig, manifest: Manifest | None = None, stop_at_train_acc: float | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Seeded SGD training; writes a checkpoint and a metrics row per epoch.

    Batches are processed one clip at a time with gradients accumulated, so
    memory stays at a single clip's activations regardless of batch size.
    """
    manifest = manifest if manifest is not None else Manifest.load(config.manifest_path)
    if any(e.split == "unassigned" for e in manifest.entries):
        raise TrainingError("manifest has unassigned clips; run split first")
    train_entries = manifest.subset("train")
    test_entries = manifest.subset("test")
    if not train_entries:
        raise TrainingError("train split is empty")

    store = SampleStore(config)
    model = build_model(config.variant, seed=config.seed, input_shape=config.input_shape,
                        fusion_pool=config.fusion_pool)
    opt = SGD(model.parameters(), lr=config.base_lr, momentum=config.momentum, decay=config.decay)
    rng = np.random.default_rng(config.seed)
    history, lrs, losses = [], [], []
    metrics_path = Path(config.metrics_path) if config.metrics_path else None
    if metrics_path:
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(METRIC_COLUMNS)

    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_entries))
        epoch_losses = []
        for b0 in range(0, len(order), config.batch_size):
            batch_idx = order[b0:b0 + config.batch_size]
            opt.zero_grad()
            batch_loss = 0.0
            for i in batch_idx:
                sample = store.get(train_entries[i])
                if config.augment:
                    sample = augment(sample, seed=_sample_seed(config.seed, epoch, int(i)))
                logits = forward(model, Tensor(sample.data[None], dtype=model.dtype))
                loss, _ = softmax_cross_entropy(logits, [sample.label])
                scaled = loss * (1.0 / len(batch_idx))
                backward(scaled)
                batch_loss += float(scaled.data)
            if not np.isfinite(batch_loss):
                _dump_diagnostic(config, epoch, step, [train_entries[i].path for i in batch_idx])
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step} (batch {b0 // config.batch_size})")
            lrs.append(opt.step())
            losses.append(batch_loss)
            epoch_losses.append(batch_loss)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        train_acc = evaluate_model(model, train_entries, store, "train").accuracy
        test_acc = evaluate_model(model, test_entries, store, "test").accuracy if test_entries else None
        m = EpochMetrics(epoch, step, lrs[-1], float(np.mean(epoch_losses)), train_acc, test_acc)
        history.append(m)
        log.info("epoch %d step %d lr %.6g loss %.5f train_acc %.4f", epoch, step, m.lr, m.loss, train_acc)
        if metrics_path:
            with open(metrics_path, "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(_format_row(m))
        if config.checkpoint_path:
            Path(config.checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, config.checkpoint_path)
        if stop_at_train_acc is not None and train_acc >= stop_at_train_acc:
            break
        if max_steps is not None and step >= max_steps:
            break
    return TrainResult(model, history, lrs, losses)


def _dump_diagnostic(config: TrainConfig, epoch: int, step: int, clips: list) -> None:
    if not config.checkpoint_path:
        return
    path = Path(str(config.checkpoint_path) + ".nonfinite.json")
    path.write_text(json.dumps({"epoch": epoch, "step": step, "clips": clips}, indent=2), encoding="utf-8")
