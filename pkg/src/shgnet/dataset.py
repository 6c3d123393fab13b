"""Manifest handling, class weights, label views and fold partitioning."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import BINARY_LABELS, LABELS
from .errors import DataError

MANIFEST_HEADER = ("sample_id", "patient_id", "af_path", "shg_path", "label")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    patient_id: str
    af_path: str
    shg_path: str
    label: str


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered sample records plus the closed label set they draw from.

    Relative paths are resolved against ``root`` (the manifest's directory).
    """

    records: tuple[SampleRecord, ...]
    classes: tuple[str, ...] = LABELS
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [r.sample_id for r in self.records]
        dupes = sorted(k for k, v in Counter(ids).items() if v > 1)
        if dupes:
            raise DataError(f"duplicate sample_id(s): {', '.join(dupes)}")
        unknown = {r.label for r in self.records} - set(self.classes)
        if unknown:
            raise DataError(f"labels {sorted(unknown)} not in {self.classes}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(r.label for r in self.records)
        return {k: c.get(k, 0) for k in self.classes}

    @property
    def label_indices(self) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.classes)}
        return np.array([index[r.label] for r in self.records], dtype=np.int64)

    @property
    def sample_ids(self) -> list[str]:
        return [r.sample_id for r in self.records]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def subset(self, sample_ids: Iterable[str]) -> "DatasetManifest":
        wanted = set(sample_ids)
        return replace(self, records=tuple(r for r in self.records if r.sample_id in wanted))


def load_manifest(path, classes: Sequence[str] = LABELS, check_files: bool = True
                  ) -> DatasetManifest:
    """Parse and validate a manifest CSV.

    Raises:
        DataError: wrong header, unknown label (row number named), duplicate
            ids, or (with ``check_files``) plane files that do not exist.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != MANIFEST_HEADER:
            raise DataError(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            rec = SampleRecord(*row)
            if rec.label not in classes:
                raise DataError(f"{path}:{lineno}: unknown label {rec.label!r} for {rec.sample_id}")
            records.append(rec)
    manifest = DatasetManifest(tuple(records), tuple(classes), path.parent)
    if check_files:
        missing = [str(manifest.resolve(p)) for r in records for p in (r.af_path, r.shg_path)
                   if not manifest.resolve(p).is_file()]
        if missing:
            raise DataError("missing image files:\n  " + "\n  ".join(missing))
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow([r.sample_id, r.patient_id, r.af_path, r.shg_path, r.label])


def compute_class_weights(counts: Mapping[str, int]) -> dict[str, float]:
    """Inverse-frequency weights anchored so the most frequent class gets 1.0."""
    bad = [k for k, n in counts.items() if n < 1]
    if bad:
        raise DataError(f"class counts must be >= 1, got zero for {bad}")
    n_max = max(counts.values())
    return {k: n_max / n for k, n in counts.items()}


def class_weight_vector(counts: Mapping[str, int], classes: Sequence[str]) -> np.ndarray:
    weights = compute_class_weights({c: counts[c] for c in classes})
    return np.array([weights[c] for c in classes])


def to_binary_view(manifest: DatasetManifest) -> DatasetManifest:
    """Collapse normal and fibrosis into ``non_cancer``."""
    if manifest.classes != LABELS:
        raise DataError(f"binary view needs a {LABELS} manifest, got {manifest.classes}")
    records = tuple(replace(r, label="cancer" if r.label == "cancer" else "non_cancer")
                    for r in manifest.records)
    return DatasetManifest(records, BINARY_LABELS, manifest.root)


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of every sample to exactly one of ``k`` folds."""

    k: int
    seed: int
    assignments: dict[str, int]
    mode: str = "image"

    def fold_ids(self, fold: int) -> list[str]:
        return [s for s, f in self.assignments.items() if f == fold]

    def split(self, fold: int) -> tuple[list[str], list[str]]:
        """``(train_ids, val_ids)`` with fold ``fold`` held out."""
        train = [s for s, f in self.assignments.items() if f != fold]
        return train, self.fold_ids(fold)

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "k": self.k, "mode": self.mode,
                           "assignments": self.assignments}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls(k=int(d["k"]), seed=int(d["seed"]),
                   assignments={str(s): int(f) for s, f in d["assignments"].items()},
                   mode=d.get("mode", "image"))


def stratified_kfold(manifest: DatasetManifest, k: int = 5, seed: int = 0,
                     group_by_patient: bool = False) -> FoldPlan:
    """Partition samples into ``k`` folds preserving class proportions.

    Image mode: each class is shuffled with ``seed`` and dealt round-robin
    starting at fold 0, so fold sizes per class are ``floor`` or ``ceil`` of
    ``n_c / k``. Patient mode keeps each ``patient_id`` inside one fold and
    balances greedily, so per-class counts are only approximately even.
    """
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    counts = manifest.counts
    small = {c: n for c, n in counts.items() if 0 < n < k}
    if small:
        raise DataError(f"classes with fewer than k={k} samples: {small}")
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    if not group_by_patient:
        for cls in manifest.classes:
            ids = [r.sample_id for r in manifest.records if r.label == cls]
            for pos, i in enumerate(rng.permutation(len(ids))):
                assignments[ids[i]] = pos % k
    else:
        assignments = _group_folds(manifest, k, rng)
    ordered = {r.sample_id: assignments[r.sample_id] for r in manifest.records}
    return FoldPlan(k=k, seed=seed, assignments=ordered,
                    mode="patient" if group_by_patient else "image")


def _group_folds(manifest: DatasetManifest, k: int, rng: np.random.Generator) -> dict[str, int]:
    groups: dict[str, list[SampleRecord]] = {}
    for r in manifest.records:
        groups.setdefault(r.patient_id, []).append(r)
    names = list(groups)
    names = [names[i] for i in rng.permutation(len(names))]
    names.sort(key=lambda g: -len(groups[g]))
    cls_index = {c: i for i, c in enumerate(manifest.classes)}
    load = np.zeros((k, len(manifest.classes)))
    out = {}
    for g in names:
        vec = np.zeros(len(manifest.classes))
        for r in groups[g]:
            vec[cls_index[r.label]] += 1
        cost = [(float(((load[f] + vec) ** 2).sum()), load[f].sum(), f) for f in range(k)]
        fold = min(cost)[2]
        load[fold] += vec
        for r in groups[g]:
            out[r.sample_id] = fold
    return out


def holdout_split(manifest: DatasetManifest, fraction: float = 0.2, seed: int = 0
                  ) -> tuple[list[str], list[str]]:
    """Stratified single train/validation split with ``fraction`` held out per class."""
    if not 0 < fraction < 1:
        raise DataError(f"holdout fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for cls in manifest.classes:
        ids = [r.sample_id for r in manifest.records if r.label == cls]
        order = [ids[i] for i in rng.permutation(len(ids))]
        n_val = int(round(fraction * len(ids)))
        val += order[:n_val]
        train += order[n_val:]
    keep = {s: i for i, s in enumerate(manifest.sample_ids)}
    return sorted(train, key=keep.get), sorted(val, key=keep.get)


def per_fold_class_counts(plan: FoldPlan, manifest: DatasetManifest) -> np.ndarray:
    """``[k, n_classes]`` count table, handy for checking stratification."""
    table = np.zeros((plan.k, len(manifest.classes)), dtype=int)
    cls_index = {c: i for i, c in enumerate(manifest.classes)}
    for r in manifest.records:
        table[plan.assignments[r.sample_id], cls_index[r.label]] += 1
    return table


def make_manifest(labels: Sequence[str], classes: Sequence[str] = LABELS,
                  patient_ids: Optional[Sequence[str]] = None) -> DatasetManifest:
    """Build an in-memory manifest (no files) from a label list; used for planning."""
    patient_ids = patient_ids or [f"p{i}" for i in range(len(labels))]
    records = tuple(SampleRecord(f"s{i:05d}", pid, "", "", lab)
                    for i, (lab, pid) in enumerate(zip(labels, patient_ids)))
    return DatasetManifest(records, tuple(classes))
