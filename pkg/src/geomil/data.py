"""Feature-bag file format, dataset manifests, splits, and the synthetic
hierarchical-bag generator.

Bag file layout (little-endian)::

    magic "FBAG", u32 version, u32 N, u32 D, i32 label (-1 = unlabeled),
    float32 N x D payload (row-major), u32 CRC32 of all preceding bytes

Manifests are tab-separated text lines ``path<TAB>label<TAB>split`` with
split in {train, val, test, fold0..fold4}.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .model import BagFeatures

BAG_MAGIC = b"FBAG"
BAG_VERSION = 1

VALID_SPLITS = ("train", "val", "test", "fold0", "fold1", "fold2", "fold3", "fold4")


class FormatError(ValueError):
    """Malformed or corrupted data file."""


def save_bag(path: str, bag: BagFeatures) -> None:
    """Write one bag; float32 payload, trailing CRC32, atomic rename."""
    bag.validate()
    feats = np.ascontiguousarray(np.asarray(bag.features, dtype="<f4"))
    n, d = feats.shape
    blob = BAG_MAGIC + struct.pack("<IIIi", BAG_VERSION, n, d, int(bag.label))
    blob += feats.tobytes()
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_bag(path: str) -> BagFeatures:
    """Read one bag, verifying magic, version, length, and checksum."""
    with open(path, "rb") as fh:
        data = fh.read()
    header = len(BAG_MAGIC) + 16
    if len(data) < header + 4:
        raise FormatError(f"{path}: truncated bag file")
    if data[: len(BAG_MAGIC)] != BAG_MAGIC:
        raise FormatError(f"{path}: bad magic; not a feature-bag file")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise FormatError(f"{path}: checksum mismatch; file is corrupted")
    version, n, d, label = struct.unpack("<IIIi", data[len(BAG_MAGIC) : header])
    if version != BAG_VERSION:
        raise FormatError(f"{path}: unsupported bag version {version}")
    expected = header + 4 * n * d + 4
    if len(data) != expected:
        raise FormatError(f"{path}: payload length mismatch")
    feats = np.frombuffer(data[header:-4], dtype="<f4").reshape(n, d).copy()
    stem = os.path.splitext(os.path.basename(path))[0]
    return BagFeatures(features=feats, label=int(label), bag_id=stem)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str


def write_manifest(path: str, entries: list[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.path}\t{e.label}\t{e.split}\n")


def read_manifest(path: str) -> list[ManifestEntry]:
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'path<TAB>label<TAB>split'")
            p, label_s, split = parts
            try:
                label = int(label_s)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: label {label_s!r} is not an integer")
            if label < -1:
                raise FormatError(f"{path}:{lineno}: label {label} out of range")
            if split not in VALID_SPLITS:
                raise FormatError(f"{path}:{lineno}: unknown split {split!r}")
            if p in seen:
                raise FormatError(f"{path}:{lineno}: duplicate path {p!r}")
            seen.add(p)
            entries.append(ManifestEntry(path=p, label=label, split=split))
    return entries


def load_split_bags(entries: list[ManifestEntry], splits: str = "",
                    base_dir: str = "") -> tuple[list[BagFeatures], list[int]]:
    """Load all bags whose split is in the comma-separated ``splits``.

    An empty ``splits`` string selects every entry.
    """
    wanted = {s.strip() for s in splits.split(",") if s.strip()}
    if not wanted:
        wanted = set(VALID_SPLITS)
    unknown = wanted - set(VALID_SPLITS)
    if unknown:
        raise FormatError(f"unknown splits requested: {sorted(unknown)}")
    bags, labels = [], []
    for e in entries:
        if e.split not in wanted:
            continue
        path = e.path if os.path.isabs(e.path) or not base_dir else os.path.join(base_dir, e.path)
        bag = load_bag(path)
        bags.append(bag)
        labels.append(e.label)
    if not bags:
        raise FormatError(f"no bags in splits {sorted(wanted)}")
    return bags, labels


def kfold_split(labels, folds: int = 5, seed: int = 0) -> np.ndarray:
    """Stratified fold assignment, deterministic per seed.

    Within each class the (shuffled) members are dealt into contiguous
    chunks whose sizes differ by at most one, extras going to the lowest
    fold indices.  ``labels`` may be a sequence of ints or of objects with
    a ``label`` attribute.
    """
    labels = np.asarray([getattr(l, "label", l) for l in labels], dtype=np.int64)
    n = labels.shape[0]
    if n < folds:
        raise ValueError(f"need at least {folds} bags for {folds} folds, got {n}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    for cls in np.unique(labels):
        members = np.nonzero(labels == cls)[0]
        members = members[rng.permutation(members.shape[0])]
        count = members.shape[0]
        base, rem = divmod(count, folds)
        start = 0
        for fold in range(folds):
            size = base + (1 if fold < rem else 0)
            assignment[members[start : start + size]] = fold
            start += size
    return assignment


# ---------------------------------------------------------------------------
# synthetic hierarchical bags
# ---------------------------------------------------------------------------

@dataclass
class SynthTruth:
    """Generator ground truth for oracle checks.

    ``witness_direction`` is the unit vector from the benign family mean to
    the malignant family mean; ``witness_masks[i]`` flags the instances of
    bag ``i`` drawn from malignant leaves.
    """

    leaf_means: np.ndarray
    benign_leaves: np.ndarray
    malignant_leaves: np.ndarray
    witness_direction: np.ndarray
    witness_masks: list[np.ndarray]


def synth_bags(n_bags: int, bag_size: int, dim: int, witness_rate: float,
               separation: float, hierarchy_depth: int = 2,
               seed: int = 0) -> tuple[list[BagFeatures], SynthTruth]:
    """Generate labeled bags from a balanced binary tree of cluster means.

    Level-``d`` children sit at ``parent + offset`` with ``||offset|| =
    separation * 2**(-d)``; the root is the origin.  Leaves under the first
    level-1 child are benign, the rest malignant.  Negative bags draw every
    instance from benign leaves; positive bags replace
    ``ceil(witness_rate * bag_size)`` instances with malignant-leaf draws.
    Instance noise is unit-variance Gaussian.  Labels alternate 0/1, so any
    prefix is close to balanced.
    """
    if not 0.0 < witness_rate <= 1.0:
        raise ValueError(f"witness_rate must be in (0, 1], got {witness_rate}")
    if separation <= 0.0:
        raise ValueError(f"separation must be positive, got {separation}")
    if hierarchy_depth < 1:
        raise ValueError(f"hierarchy_depth must be >= 1, got {hierarchy_depth}")
    if n_bags < 2 or bag_size < 1 or dim < 1:
        raise ValueError("need n_bags >= 2, bag_size >= 1, dim >= 1")

    rng = np.random.default_rng(seed)
    level = [np.zeros(dim)]
    for depth in range(1, hierarchy_depth + 1):
        radius = separation * 2.0 ** (-depth)
        nxt = []
        for parent in level:
            for _ in range(2):
                offset = rng.standard_normal(dim)
                offset *= radius / np.linalg.norm(offset)
                nxt.append(parent + offset)
        level = nxt
    leaf_means = np.asarray(level)
    n_leaves = leaf_means.shape[0]
    benign = np.arange(n_leaves // 2)
    malignant = np.arange(n_leaves // 2, n_leaves)
    direction = leaf_means[malignant].mean(axis=0) - leaf_means[benign].mean(axis=0)
    direction = direction / np.linalg.norm(direction)

    n_witness = int(np.ceil(witness_rate * bag_size))
    bags: list[BagFeatures] = []
    masks: list[np.ndarray] = []
    for i in range(n_bags):
        label = i % 2
        leaves = rng.choice(benign, size=bag_size)
        feats = leaf_means[leaves] + rng.standard_normal((bag_size, dim))
        mask = np.zeros(bag_size, dtype=bool)
        if label == 1:
            where = rng.choice(bag_size, size=n_witness, replace=False)
            wit_leaves = rng.choice(malignant, size=n_witness)
            feats[where] = leaf_means[wit_leaves] + rng.standard_normal((n_witness, dim))
            mask[where] = True
        bags.append(BagFeatures(features=feats.astype(np.float32), label=label,
                                bag_id=f"synth{i:04d}"))
        masks.append(mask)
    truth = SynthTruth(leaf_means=leaf_means, benign_leaves=benign,
                       malignant_leaves=malignant, witness_direction=direction,
                       witness_masks=masks)
    return bags, truth


def witness_oracle_scores(bags: list[BagFeatures], truth: SynthTruth) -> np.ndarray:
    """Max-pool oracle: each bag's top projection onto the witness direction."""
    return np.asarray([
        float(np.max(np.asarray(b.features, dtype=np.float64) @ truth.witness_direction))
        for b in bags
    ])
