"""Training recipe, evaluation, and the k-fold experiment driver."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import BINARY_LABELS, LABELS
from .autodiff import (
    OptimizerState,
    Tensor,
    adamw_step,
    backward,
    clip_global_norm,
    log_softmax,
    no_grad,
    one_hot,
    softmax,
    weighted_smoothed_ce,
)
from .dataset import DatasetManifest, compute_class_weights, stratified_kfold
from .errors import ConfigError, DataError, NumericError
from .imaging import AugmentParams, augment, derive_seed, load_dual, preprocess
from .metrics import EvalReport, build_report, predict
from .models import ModelConfig, ResNet, build_model, load_backbone, set_freeze
from .nn import BatchNorm2d

HISTORY_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class TrainRecipe:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 60
    label_smoothing: float = 0.1
    mixup_alpha: float = 0.2
    clip_norm: float = 1.0
    freeze: str = "full"
    seed: int = 0
    augment: AugmentParams = field(default_factory=AugmentParams)
    selection: str = "best"
    use_class_weights: bool = True
    bn_recalibrate: bool = True

    def __post_init__(self):
        if isinstance(self.augment, Mapping):
            self.augment = AugmentParams(**self.augment)
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0 or self.clip_norm <= 0 or self.weight_decay < 0:
            raise ConfigError("lr and clip_norm must be positive, weight_decay non-negative")
        if self.mixup_alpha < 0:
            raise ConfigError("mixup_alpha must be >= 0 (0 disables mixup)")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.selection not in ("best", "last"):
            raise ConfigError(f"selection must be 'best' or 'last', got {self.selection!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainRecipe":
        return cls(**dict(d))


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)  # post-clip, one per step
    best_epoch: Optional[int] = None

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for e in range(len(self)):
            val = [self.val_loss[e], self.val_acc[e]] if self.val_loss else ["", ""]
            w.writerow([e + 1] + [repr(float(v)) if v != "" else v
                                  for v in [self.train_loss[e], self.train_acc[e], *val]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


@dataclass
class ImageSet:
    """Fused uint8 RGB images held in memory, with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    sample_ids: list[str]
    classes: tuple[str, ...]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise DataError(f"images must be [N, H, W, 3], got {self.images.shape}")
        if not len(self.images) == len(self.labels) == len(self.sample_ids):
            raise DataError("images, labels and sample_ids differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, size: Optional[int] = None) -> "ImageSet":
        images = [preprocess(load_dual(manifest.resolve(r.af_path), manifest.resolve(r.shg_path),
                                       r.sample_id), size)
                  for r in manifest.records]
        return cls(np.stack(images), manifest.label_indices, manifest.sample_ids, manifest.classes)

    @classmethod
    def from_pairs(cls, pairs, classes: Sequence[str] = LABELS, size: Optional[int] = None
                   ) -> "ImageSet":
        """Build from ``(SampleRecord, DualModalImage)`` pairs such as ``synth.iter_samples``."""
        index = {c: i for i, c in enumerate(classes)}
        images, labels, ids = [], [], []
        for rec, img in pairs:
            images.append(preprocess(img, size))
            labels.append(index[rec.label])
            ids.append(rec.sample_id)
        return cls(np.stack(images), np.array(labels, dtype=np.int64), ids, tuple(classes))

    def subset(self, sample_ids: Sequence[str]) -> "ImageSet":
        pos = {s: i for i, s in enumerate(self.sample_ids)}
        idx = np.array([pos[s] for s in sample_ids], dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx], [self.sample_ids[i] for i in idx],
                        self.classes)

    def binary(self) -> "ImageSet":
        """Cancer vs the rest; requires the three tissue classes."""
        if tuple(self.classes) != LABELS:
            raise DataError(f"binary view needs classes {LABELS}, got {self.classes}")
        labels = (self.labels == LABELS.index("cancer")).astype(np.int64)
        return replace(self, labels=labels, classes=BINARY_LABELS)

    def manifest(self) -> DatasetManifest:
        """Path-less manifest for fold planning (patient = sample)."""
        from .dataset import SampleRecord
        recs = tuple(SampleRecord(s, s, "", "", self.classes[l])
                     for s, l in zip(self.sample_ids, self.labels))
        return DatasetManifest(recs, tuple(self.classes))

    def counts(self) -> dict[str, int]:
        return {c: int(np.sum(self.labels == i)) for i, c in enumerate(self.classes)}


def to_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 ``[N, H, W, 3]`` -> float ``[N, 3, H, W]`` scaled to [0, 1]."""
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=dtype) / np.dtype(dtype).type(255.0)


def mixup_batch(images: np.ndarray, label_dists: np.ndarray, alpha: float, seed,
                lam: Optional[float] = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Convex combination of each sample with a seeded-permutation partner.

    ``lam`` overrides the Beta(alpha, alpha) draw (useful for tests).
    Returns the mixed images, mixed label distributions and lambda.
    """
    if len(images) < 1 or len(images) != len(label_dists):
        raise DataError("mixup needs matching, non-empty image and label batches")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if lam is None:
        if alpha <= 0:
            raise ConfigError("mixup alpha must be positive")
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(len(images))
    x = lam * images + (1.0 - lam) * images[perm]
    y = lam * label_dists + (1.0 - lam) * label_dists[perm]
    return x.astype(images.dtype), y, lam


def _class_weight_array(class_weights, classes: Sequence[str]) -> Optional[np.ndarray]:
    if class_weights is None:
        return None
    if isinstance(class_weights, Mapping):
        missing = [c for c in classes if c not in class_weights]
        if missing:
            raise DataError(f"class weights missing for {missing}")
        return np.array([class_weights[c] for c in classes], dtype=np.float64)
    arr = np.asarray(class_weights, dtype=np.float64)
    if arr.shape != (len(classes),):
        raise DataError(f"need {len(classes)} class weights, got shape {arr.shape}")
    return arr


def plain_cross_entropy(scores_logits: np.ndarray, labels: np.ndarray) -> float:
    logp = log_softmax(np.asarray(scores_logits, dtype=np.float64))
    return float(-logp[np.arange(len(labels)), labels].mean())


def predict_logits(model: ResNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for uint8 images; the model's mode is restored afterwards."""
    was_training = model.training
    model.eval()
    dtype = model.stem.weight.dtype
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(Tensor(to_input(images[i:i + batch_size], dtype))).data)
    model.train(was_training)
    return np.concatenate(out).astype(np.float64)


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Consecutive batches; the remainder is kept, but a lone trailing sample
    joins the previous batch because train-mode batch norm needs two."""
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    return [slice(a, b) for a, b in zip(starts, starts[1:] + [n])]


def recalibrate_batchnorm(model: ResNet, images: np.ndarray, batch_size: int = 32) -> None:
    """Replace BN running statistics by their average over clean ``images``.

    The exponential running estimates drift with small, mixup-blended
    batches; re-estimating them on un-augmented training images makes
    eval-mode predictions stable from epoch to epoch. Only buffers change.
    """
    bns = [m for _, m in model.named_modules() if isinstance(m, BatchNorm2d)]
    if not bns or any(b.frozen for b in bns):
        return
    was_training = model.training
    saved = [b.stats.momentum for b in bns]
    for b in bns:
        b.stats.mean[...] = 0.0
        b.stats.var[...] = 1.0
    model.train()
    dtype = model.stem.weight.dtype
    with no_grad():
        for i, sl in enumerate(batch_slices(len(images), batch_size)):
            for b in bns:
                b.stats.momentum = 1.0 / (i + 1)  # cumulative mean over batches
            model.features(Tensor(to_input(images[sl], dtype)))
    for b, m in zip(bns, saved):
        b.stats.momentum = m
    model.train(was_training)


def evaluate(model: ResNet, data: ImageSet, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Softmax scores ``[N, K]`` and argmax predictions (ties -> lowest index)."""
    scores = softmax(predict_logits(model, data.images, batch_size))
    return scores, predict(scores)


def train(model: ResNet, data: ImageSet, recipe: TrainRecipe, class_weights=None,
          val: Optional[ImageSet] = None,
          on_epoch: Optional[Callable[[int, TrainHistory], None]] = None
          ) -> tuple[ResNet, TrainHistory]:
    """Train ``model`` in place following ``recipe``.

    Each step augments every sample with a seed derived from (seed, epoch,
    sample id), applies mixup, computes the class-weighted smoothed loss,
    clips the global gradient norm and takes one AdamW step. With
    ``selection="best"`` and a validation set, the weights of the epoch with
    the highest validation accuracy (earliest on ties) are restored at the end.

    Raises:
        NumericError: if the loss or gradient becomes non-finite; the message
            names the step, the loss and the gradient norm.
    """
    if len(data) == 0:
        raise DataError("training set is empty")
    k = len(data.classes)
    if model.config.num_classes != k:
        raise ConfigError(f"model has {model.config.num_classes} outputs but data has {k} classes")
    weights = _class_weight_array(class_weights, data.classes) if recipe.use_class_weights else None
    present = np.unique(data.labels)
    if weights is not None and np.any(weights[present] <= 0):
        raise DataError("class weights must be positive for every label present")

    set_freeze(model, recipe.freeze)
    model.reseed(derive_seed(recipe.seed, "dropout"))
    named = model.trainable_parameters()
    names = [n for n, _ in named]
    params = [p for _, p in named]
    state = OptimizerState(lr=recipe.lr, weight_decay=recipe.weight_decay)
    frozen = recipe.freeze == "frozen_backbone"
    dtype = model.stem.weight.dtype
    hist = TrainHistory()
    best: Optional[tuple[float, dict]] = None
    step = 0
    n = len(data)

    for epoch in range(recipe.epochs):
        model.train()
        order = np.random.default_rng(derive_seed(recipe.seed, "order", epoch)).permutation(n)
        loss_sum, correct = 0.0, 0
        for sl in batch_slices(n, recipe.batch_size):
            idx = order[sl]
            batch = np.stack([augment(data.images[i], recipe.augment,
                                      derive_seed(recipe.seed, "aug", epoch, data.sample_ids[i]))
                              for i in idx])
            x = to_input(batch, dtype)
            q = one_hot(data.labels[idx], k)
            if recipe.mixup_alpha > 0:
                x, q, _ = mixup_batch(x, q, recipe.mixup_alpha, derive_seed(recipe.seed, "mixup", step))
            try:
                if frozen:
                    # backbone is constant here, so skip building its graph
                    with no_grad():
                        feats = model.features(Tensor(x))
                    logits = model.head(Tensor(feats.data))
                else:
                    logits = model(Tensor(x))
                loss = weighted_smoothed_ce(logits, q, weights, recipe.label_smoothing)
                grads = backward(loss, params)
            except NumericError as exc:
                raise NumericError(f"non-finite value at step {step} (epoch {epoch + 1}): {exc}") from exc
            grads, pre_norm = clip_global_norm(grads, recipe.clip_norm)
            if not np.isfinite(pre_norm):
                raise NumericError(f"step {step}: loss {float(loss.data):.6g}, grad norm {pre_norm}")
            post_norm = min(pre_norm, recipe.clip_norm)
            hist.grad_norms.append(float(post_norm))
            adamw_step(params, grads, state, names)
            loss_sum += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == data.labels[idx]))
            step += 1
        if recipe.bn_recalibrate and not frozen:
            recalibrate_batchnorm(model, data.images)
        hist.train_loss.append(loss_sum / n)
        hist.train_acc.append(correct / n)
        if val is not None and len(val):
            logits_v = predict_logits(model, val.images)
            hist.val_loss.append(plain_cross_entropy(logits_v, val.labels))
            acc = float(np.mean(predict(logits_v) == val.labels))
            hist.val_acc.append(acc)
            if recipe.selection == "best" and (best is None or acc > best[0]):
                best = (acc, {kk: v.copy() for kk, v in model.state_dict().items()})
                hist.best_epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(epoch + 1, hist)

    if best is not None:
        model.load_state_dict(best[1])
    else:
        hist.best_epoch = recipe.epochs
    model.eval()
    return model, hist


# -- k-fold driver ----------------------------------------------------------------

@dataclass
class KFoldResult:
    reports: list[EvalReport]
    histories: list[TrainHistory]
    val_ids: list[list[str]]
    summary: dict

    def to_dict(self) -> dict:
        return {"summary": self.summary,
                "folds": [{"val_ids": ids, "report": r.to_dict()}
                          for ids, r in zip(self.val_ids, self.reports)]}


def summarize(reports: Sequence[EvalReport], positive: str = "cancer") -> dict:
    """Mean and (population) std over folds of the headline metrics."""
    rows = {
        "accuracy": [r.accuracy for r in reports],
        "macro_precision": [r.macro_precision for r in reports],
        "macro_recall": [r.macro_recall for r in reports],
        "macro_f1": [r.macro_f1 for r in reports],
    }
    if positive in reports[0].classes:
        aucs = [r.auc(positive) for r in reports]
        if all(a is not None for a in aucs):
            rows[f"{positive}_auc"] = aucs
    return {k: {"folds": [float(x) for x in v], "mean": float(np.mean(v)), "std": float(np.std(v))}
            for k, v in rows.items()}


def _fold_job(args) -> tuple[EvalReport, TrainHistory]:
    data, train_ids, val_ids, config, recipe, fold, pretrained = args
    train_set, val_set = data.subset(train_ids), data.subset(val_ids)
    model = build_model(replace(config, seed=derive_seed(config.seed, "fold", fold) % 2 ** 31))
    if pretrained is not None:
        load_backbone(model, pretrained)
    weights = compute_class_weights(train_set.counts())
    fold_recipe = replace(recipe, seed=derive_seed(recipe.seed, "fold", fold) % 2 ** 31)
    model, hist = train(model, train_set, fold_recipe, weights, val=val_set)
    scores, _ = evaluate(model, val_set)
    return build_report(scores, val_set.labels, val_set.classes), hist


def run_kfold(data: ImageSet, config: ModelConfig, recipe: TrainRecipe, k: int = 5,
              seed: int = 0, pretrained: Optional[Mapping[str, np.ndarray]] = None,
              workers: int = 1, group_by_patient: bool = False,
              manifest: Optional[DatasetManifest] = None) -> KFoldResult:
    """Train on k-1 folds and evaluate on the held-out fold, for every fold.

    Folds run as independent jobs and may execute in ``workers`` processes;
    results do not depend on the worker count.
    """
    plan = stratified_kfold(manifest or data.manifest(), k=k, seed=seed,
                            group_by_patient=group_by_patient)
    jobs = []
    val_ids = []
    for f in range(k):
        tr, va = plan.split(f)
        val_ids.append(va)
        jobs.append((data, tr, va, config, recipe, f, pretrained))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]
    reports = [r for r, _ in results]
    return KFoldResult(reports, [h for _, h in results], val_ids, summarize(reports))


def history_json(hist: TrainHistory) -> str:
    return json.dumps(asdict(hist), sort_keys=True)
