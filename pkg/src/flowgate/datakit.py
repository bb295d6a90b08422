"""Dataset index, source-grouped train/test split and the histogram similarity audit.

Expected layout on disk::

    root/Violent/<source_id>__<clip_id>/frame_00000.png
    root/NonViolent/<source_id>__<clip_id>/frame_00000.png
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import warnings
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .preprocess import LABELS, VideoClip, sample_frames

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("train", "test", "unassigned")
HIST_BINS = 32
HIST_MAX_FRAMES = 16
_FRAME_RE = re.compile(r"^frame_\d{5}\.png$")


class SplitWarning(UserWarning):
    """A single source group holds more than the train fraction of a label."""


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    source_id: str
    split: str = "unassigned"

    def to_json(self) -> str:
        return json.dumps({"path": self.path, "label": self.label, "source_id": self.source_id,
                           "split": self.split, "version": MANIFEST_VERSION}, sort_keys=True)


@dataclass
class Manifest:
    entries: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    flagged_groups: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise ValueError(f"duplicate clip path in manifest: {e.path}")
            if not e.source_id:
                raise ValueError(f"entry {e.path} has no source_id")
            if e.label not in LABELS:
                raise ValueError(f"entry {e.path} has unknown label {e.label!r}")
            if e.split not in SPLITS:
                raise ValueError(f"entry {e.path} has unknown split {e.split!r}")
            seen.add(e.path)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def subset(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def dumps(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.entries)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Manifest":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
                raise ValueError(f"unsupported manifest version {rec.get('version')}")
            entries.append(ManifestEntry(rec["path"], rec["label"], rec["source_id"], rec.get("split", "unassigned")))
        return cls(entries)


def build_manifest(root_dir) -> Manifest:
    """Index every clip directory under ``root/{Violent,NonViolent}``.

    Directories without a ``<source>__<clip>`` name or without frames are
    recorded in ``Manifest.errors`` and skipped.
    """
    root = Path(root_dir)
    entries, errors = [], []
    for label in LABELS:
        label_dir = root / label
        if not label_dir.is_dir():
            continue
        for clip_dir in sorted(p for p in label_dir.iterdir() if p.is_dir()):
            source, sep, clip_id = clip_dir.name.partition("__")
            if not sep or not source or not clip_id:
                errors.append((str(clip_dir), "name is not <source_id>__<clip_id>"))
                continue
            if not any(_FRAME_RE.match(f.name) for f in clip_dir.iterdir()):
                errors.append((str(clip_dir), "no frame_%05d.png files"))
                continue
            entries.append(ManifestEntry(str(clip_dir.relative_to(root)), label, source))
    for path, why in errors:
        log.warning("skipping %s: %s", path, why)
    return Manifest(entries, errors)


def split_dataset(manifest: Manifest, train_fraction: float = 0.8, seed: int = 0) -> Manifest:
    """Assign whole source groups to train or test.

    Groups are visited largest first (seeded shuffle among equal sizes) and
    each goes to the partition with the greater remaining per-label need,
    measured against ``train_fraction`` of each label's clips. The result
    depends only on the set of entries and the seed, not their order.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    groups = defaultdict(list)
    for e in manifest.entries:
        if not e.source_id:
            raise ValueError(f"entry {e.path} has no source_id")
        groups[e.source_id].append(e)
    totals = {lab: sum(e.label == lab for e in manifest.entries) for lab in LABELS}
    target = {"train": {lab: train_fraction * n for lab, n in totals.items()},
              "test": {lab: (1 - train_fraction) * n for lab, n in totals.items()}}
    have = {"train": dict.fromkeys(LABELS, 0), "test": dict.fromkeys(LABELS, 0)}

    rng = np.random.default_rng(seed)
    names = sorted(groups)
    names = [names[i] for i in rng.permutation(len(names))]
    names.sort(key=lambda s: -len(groups[s]))

    flagged = []
    assignment = {}
    for src in names:
        counts = {lab: sum(e.label == lab for e in groups[src]) for lab in LABELS}
        for lab, c in counts.items():
            if totals[lab] and c > train_fraction * totals[lab]:
                flagged.append(src)
                warnings.warn(f"source {src!r} holds {c} of {totals[lab]} {lab} clips", SplitWarning, stacklevel=2)
                break
        need = {p: sum(c * (target[p][lab] - have[p][lab]) for lab, c in counts.items()) for p in have}
        part = "train" if need["train"] >= need["test"] else "test"
        assignment[src] = part
        for lab, c in counts.items():
            have[part][lab] += c
    entries = [replace(e, split=assignment[e.source_id]) for e in manifest.entries]
    return Manifest(entries, list(manifest.errors), flagged)


# -- clip loading -------------------------------------------------------------------

def frame_paths(clip_dir) -> list:
    return sorted(p for p in Path(clip_dir).iterdir() if _FRAME_RE.match(p.name))


def load_clip(clip_dir, label: str = "NonViolent", source_id: str = "") -> VideoClip:
    frames = [np.asarray(Image.open(p).convert("RGB")) for p in frame_paths(clip_dir)]
    return VideoClip(frames, label=label, source_id=source_id)


def save_clip(clip: VideoClip, clip_dir) -> None:
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        Image.fromarray(np.asarray(frame, dtype=np.uint8)).save(clip_dir / f"frame_{i:05d}.png")


# -- histogram features and audit -----------------------------------------------------

def clip_histogram(clip, bins: int = HIST_BINS, max_frames: int = HIST_MAX_FRAMES) -> np.ndarray:
    """Concatenated per-channel 8-bit histograms, each block L1-normalised.

    ``clip`` is a :class:`VideoClip` or a sequence of HxWx3 frames. Uses up
    to ``max_frames`` uniformly spaced frames. A block with no pixels (an
    empty frame) is left at zero.
    """
    frames = clip.frames if isinstance(clip, VideoClip) else list(clip)
    n = len(frames)
    if n == 0:
        raise ValueError("clip_histogram needs at least one frame")
    idx = sorted(set(sample_frames(n, min(n, max_frames)))) if n >= 2 else [0]
    pix = np.concatenate([np.asarray(frames[i], dtype=np.uint8).reshape(-1, 3) for i in idx])
    feats = []
    for ch in range(3):
        h = np.bincount(pix[:, ch].astype(np.int64) * bins // 256, minlength=bins).astype(np.float64)
        s = h.sum()
        feats.append(h / s if s > 0 else h)
    return np.concatenate(feats)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class AuditPair:
    clip_a: str
    clip_b: str
    similarity: float
    split: str
    flagged: bool


def similarity_audit(manifest: Manifest, features: dict, top_fraction: float = 0.3) -> list[AuditPair]:
    """Score every intra-partition clip pair and flag the most similar ones.

    ``features`` maps clip path to its histogram. Within each partition the
    top ``ceil(top_fraction * n_pairs)`` pairs are flagged; the returned list
    is sorted by descending similarity (ties by clip names).
    """
    if not 0 <= top_fraction <= 1:
        raise ValueError("top_fraction must lie in [0, 1]")
    by_split = defaultdict(list)
    for e in manifest.entries:
        by_split[e.split].append(e.path)
    pairs = []
    for split in sorted(by_split):
        paths = sorted(by_split[split])
        scored = []
        for i in range(len(paths)):
            for j in range(i + 1, len(paths)):
                scored.append((cosine_similarity(features[paths[i]], features[paths[j]]), paths[i], paths[j]))
        scored.sort(key=lambda r: (-r[0], r[1], r[2]))
        n_flag = math.ceil(top_fraction * len(scored))
        pairs.extend(AuditPair(a, b, s, split, k < n_flag) for k, (s, a, b) in enumerate(scored))
    pairs.sort(key=lambda p: (-p.similarity, p.clip_a, p.clip_b))
    return pairs


def write_audit_csv(pairs, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_a", "clip_b", "similarity", "flagged"])
        for p in pairs:
            w.writerow([p.clip_a, p.clip_b, f"{p.similarity:.6f}", int(p.flagged)])


def manifest_features(manifest: Manifest, root_dir) -> dict:
    root = Path(root_dir)
    return {e.path: clip_histogram(load_clip(root / e.path, e.label, e.source_id)) for e in manifest.entries}
