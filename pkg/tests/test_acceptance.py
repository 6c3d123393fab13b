"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

Run alone with ``pytest tests/test_acceptance.py -v`` (about 6 minutes on one
CPU core, dominated by the 5-fold benchmark).
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from shgnet.autodiff import (
    RunningStats,
    Tensor,
    batchnorm2d,
    conv2d,
    dropout,
    global_avg_pool,
    linear,
    maxpool2d,
    one_hot,
    relu,
    weighted_smoothed_ce,
)
from shgnet.autodiff.gradcheck import check_gradients
from shgnet.checkpoint import load_checkpoint, save_checkpoint
from shgnet.cli import main as cli_main
from shgnet.dataset import compute_class_weights, make_manifest, stratified_kfold
from shgnet.gradcam import grad_cam
from shgnet.imaging import AugmentParams
from shgnet.metrics import classification_metrics, roc_curve
from shgnet.models import ModelConfig, build_model, load_backbone
from shgnet.synth import PretextSpec, SynthSpec, generate_pretext_dataset, iter_samples
from shgnet.trainer import ImageSet, TrainRecipe, evaluate, run_kfold, to_input, train

# toy residual network used by the training criteria (32 px inputs)
TOY = ModelConfig(block_counts=(1, 1, 1), base_width=8, head_hidden=64, input_size=32)
# desk-scale recipe: the recipe defaults except a 10x learning rate and a fixed epoch budget
TOY_RECIPE = TrainRecipe(lr=1e-3, epochs=30, selection="last")


def report(capsys, n, name, passed, detail, seconds, budget):
    ok = passed and seconds <= budget
    line = (f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2} {name}: {detail} "
            f"({seconds:.1f}s, budget {budget:.0f}s)")
    with capsys.disabled():
        print("\n" + line)
    assert passed, line
    assert seconds <= budget, line


def pairwise_auc(scores, labels):
    pos, neg = scores[labels], scores[~labels]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def test_c01_golden_metrics(capsys):
    t = time.perf_counter()
    m = classification_metrics(np.array([[24, 2], [1, 27]]))  # rows = true (cancer, non-cancer)
    p, r, f = m["precision"][0], m["recall"][0], m["f1"][0]
    ok = abs(p - 0.960) <= 1e-3 and abs(r - 0.923) <= 1e-3 and abs(f - 0.941) <= 1e-3
    report(capsys, 1, "golden confusion matrix", ok,
           f"precision {p:.4f}, recall {r:.4f}, F1 {f:.4f}", time.perf_counter() - t, 1)


def test_c02_class_weight_ratio(capsys):
    t = time.perf_counter()
    w = compute_class_weights({"normal": 36, "fibrosis": 101, "cancer": 102})
    ratio = w["normal"] / w["cancer"]
    report(capsys, 2, "class weight ratio", abs(ratio - 2.83) <= 0.005,
           f"normal/cancer = {ratio:.4f} (target 2.83 +/- 0.005)", time.perf_counter() - t, 1)


def test_c03_auc_oracle(capsys):
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        labels[:2] = [True, False]
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding injects ties
        worst = max(worst, abs(roc_curve(scores, labels).area - pairwise_auc(scores, labels)))
    report(capsys, 3, "AUC vs Mann-Whitney oracle", worst < 1e-9,
           f"max |delta| = {worst:.2e} over 1000 instances", time.perf_counter() - t, 30)


def _op_cases(rng):
    def t64(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    x = t64(2, 3, 7, 7)
    w, b = t64(4, 3, 3, 3), t64(4)
    g = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    be = t64(3)
    W, bl = t64(3, 5), t64(5)
    stats = RunningStats(rng.standard_normal(3), rng.uniform(0.5, 2, 3), 0.1)
    logits = t64(6, 4)
    q = one_hot([0, 1, 2, 3, 0, 1], 4) * 0.7 + one_hot([1, 2, 3, 0, 0, 2], 4) * 0.3
    return {
        "conv2d s1 p1": (lambda: conv2d(x, w, b, 1, 1), [x, w, b]),
        "conv2d s2 p0": (lambda: conv2d(x, w, b, 2, 0), [x, w, b]),
        "batchnorm train": (lambda: batchnorm2d(x, g, be, RunningStats.fresh(3, np.float64), "train"),
                            [x, g, be]),
        "batchnorm eval": (lambda: batchnorm2d(x, g, be, stats, "eval"), [x, g, be]),
        "relu": (lambda: relu(x), [x]),
        "maxpool": (lambda: maxpool2d(x, 3, 2, padding=1), [x]),
        "global avg pool": (lambda: global_avg_pool(x), [x]),
        "linear": (lambda: linear(global_avg_pool(x), W, bl), [x, W, bl]),
        "dropout": (lambda: dropout(x, 0.3, "train", seed=5), [x]),
        "add/mul": (lambda: x * x + x, [x]),
        "weighted smoothed CE": (lambda: weighted_smoothed_ce(logits, q, [1.0, 2.0, 0.5, 3.0], 0.1),
                                 [logits]),
    }


def test_c04_gradient_correctness(capsys):
    t = time.perf_counter()
    rng = np.random.default_rng(4)
    errors = {}
    for name, (fn, params) in _op_cases(rng).items():
        shape = fn().shape
        proj = rng.standard_normal(shape)
        errors[name] = max(check_gradients(lambda: (fn() * Tensor(proj)).sum() if shape else fn(),
                                           params))
    model = build_model(ModelConfig(block_counts=(1, 1), base_width=4, head_hidden=6,
                                    head_dropout=0.0, input_size=8, seed=3)).astype(np.float64)
    x = Tensor(rng.random((3, 3, 8, 8)))
    q = one_hot([0, 1, 2], 3)
    params = [p for _, p in model.named_parameters()]
    errors["toy residual network"] = max(check_gradients(
        lambda: weighted_smoothed_ce(model(x), q, [2.8, 1.0, 1.0], 0.1), params))
    worst = max(errors, key=errors.get)
    report(capsys, 4, "finite-difference gradients", errors[worst] < 1e-4,
           f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e}",
           time.perf_counter() - t, 120)


def test_c05_frozen_backbone(capsys):
    t = time.perf_counter()
    spec = SynthSpec(counts={"normal": 11, "fibrosis": 11, "cancer": 10}, image_size=32, seed=5)
    data = ImageSet.from_pairs(iter_samples(spec))
    model = build_model(TOY)
    before = {k: v.copy() for k, v in model.state_dict().items() if not k.startswith("head.")}
    head0 = model.head.fc1.weight.data.copy()
    _, hist = train(model, data, TrainRecipe(epochs=50, lr=1e-3, freeze="frozen_backbone"))
    after = model.state_dict()
    changed = [k for k in before if not np.array_equal(before[k], after[k])]
    steps = len(hist.grad_norms)
    ok = not changed and steps == 100 and not np.array_equal(head0, model.head.fc1.weight.data)
    report(capsys, 5, "frozen backbone bit-identical", ok,
           f"{steps} steps, {len(before)} backbone tensors, {len(changed)} changed",
           time.perf_counter() - t, 60)


def test_c06_synthetic_benchmark(capsys):
    t = time.perf_counter()
    data = ImageSet.from_pairs(iter_samples(SynthSpec(seed=0)), size=32)
    assert data.counts() == {"normal": 36, "fibrosis": 101, "cancer": 102}
    res = run_kfold(data, TOY, TOY_RECIPE, k=5, seed=0)
    recalls = [r.macro_recall for r in res.reports]
    aucs = [r.auc("cancer") for r in res.reports]
    ok = min(recalls) >= 0.90 and min(aucs) >= 0.95
    report(capsys, 6, "239-image 5-fold benchmark", ok,
           "macro recall per fold " + " ".join(f"{v:.3f}" for v in recalls)
           + "; cancer AUC per fold " + " ".join(f"{v:.3f}" for v in aucs),
           time.perf_counter() - t, 900)


def test_c07_frozen_vs_scratch(capsys):
    t = time.perf_counter()
    pre = generate_pretext_dataset(PretextSpec(n_per_class=100, image_size=32), seed=0)
    pretext = ImageSet(pre.images, pre.labels, pre.sample_ids, pre.classes)
    backbone, _ = train(build_model(replace(TOY, num_classes=len(pre.classes))), pretext,
                        replace(TOY_RECIPE, epochs=15))
    counts = {"normal": 24, "fibrosis": 24, "cancer": 24}
    train_set = ImageSet.from_pairs(iter_samples(SynthSpec(counts=counts, seed=11)), size=32)
    val_set = ImageSet.from_pairs(iter_samples(SynthSpec(
        counts={c: 30 for c in counts}, seed=12)), size=32)
    acc = {}
    for mode in ("full", "frozen_backbone"):
        model = build_model(replace(TOY, seed=1))
        if mode == "frozen_backbone":
            load_backbone(model, backbone.state_dict())
        model, _ = train(model, train_set, replace(TOY_RECIPE, freeze=mode),
                         compute_class_weights(train_set.counts()))
        _, pred = evaluate(model, val_set)
        acc[mode] = float(np.mean(pred == val_set.labels))
    ok = acc["frozen_backbone"] >= acc["full"] - 0.05
    report(capsys, 7, "frozen pretext backbone vs scratch", ok,
           f"frozen {acc['frozen_backbone']:.3f} vs scratch {acc['full']:.3f} "
           f"(need >= scratch - 0.05)", time.perf_counter() - t, 600)


def test_c08_cli_determinism(capsys, tmp_path):
    t = time.perf_counter()
    assert cli_main(["synth", "--counts", "12,12,12", "--size", "32", "--seed", "7",
                     "--out", str(tmp_path / "data")]) == 0
    argv = ["train", "--manifest", str(tmp_path / "data" / "manifest.csv"), "--blocks", "1,1",
            "--width", "4", "--head-hidden", "16", "--image-size", "32", "--epochs", "3",
            "--lr", "1e-3", "--seed", "5"]
    for run in ("a", "b"):
        assert cli_main(argv + ["--out", str(tmp_path / run)]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("history.csv", "metrics.json", "eval.json")}
    report(capsys, 8, "CLI train determinism", all(same.values()),
           ", ".join(f"{f} {'identical' if v else 'DIFFERS'}" for f, v in same.items()),
           time.perf_counter() - t, 300)


def test_c09_fold_partitions(capsys):
    t = time.perf_counter()
    rng = np.random.default_rng(9)
    failures = 0
    for _ in range(200):
        k = int(rng.integers(2, 11))
        counts = rng.integers(k, 60, 3)
        labels = [c for c, n in zip(("normal", "fibrosis", "cancer"), counts) for _ in range(n)]
        manifest = make_manifest(labels)
        plan = stratified_kfold(manifest, k=k, seed=int(rng.integers(1 << 31)))
        folds = [set(plan.fold_ids(f)) for f in range(k)]
        disjoint = sum(map(len, folds)) == len(set().union(*folds))
        exhaustive = set().union(*folds) == set(manifest.sample_ids)
        by_id = {r.sample_id: r.label for r in manifest.records}
        balanced = all(
            sum(by_id[s] == c for s in folds[f]) in (n // k, -(-n // k))
            for f in range(k) for c, n in zip(("normal", "fibrosis", "cancer"), counts))
        failures += not (disjoint and exhaustive and balanced)
    report(capsys, 9, "stratified fold properties", failures == 0,
           f"{200 - failures}/200 cases disjoint, exhaustive, floor/ceil balanced",
           time.perf_counter() - t, 10)


def test_c10_gradcam_invariants(capsys):
    t = time.perf_counter()
    spec = SynthSpec(counts={"normal": 8, "fibrosis": 8, "cancer": 8}, image_size=32, seed=10)
    data = ImageSet.from_pairs(iter_samples(spec))
    model, _ = train(build_model(TOY), data, replace(TOY_RECIPE, epochs=5))
    model.astype(np.float64)
    x = to_input(data.images[:4], np.float64)
    in_range, fd_errors = True, []
    for i in range(4):
        for layer in ("stage1", "stage2", "stage3"):
            hm = grad_cam(model, x[i], 2, layer)
            in_range &= bool(hm.upsampled.min() >= 0 and hm.upsampled.max() <= 1)
            h, w = hm.activations.shape[1:]
            fd = []
            for k in range(hm.activations.shape[0]):
                vals = []
                for d in (1e-5, -1e-5):
                    def hook(a, d=d, k=k):
                        bump = np.zeros(a.shape)
                        bump[:, k] = d
                        return a + Tensor(bump)
                    vals.append(model(Tensor(x[i][None]), hooks={layer: hook}).data[0, 2])
                fd.append((vals[0] - vals[1]) / (2e-5 * h * w))
            fd = np.array(fd)
            fd_errors.append(np.linalg.norm(hm.alpha - fd) / max(np.linalg.norm(fd), 1e-12))
    model.head.fc2.weight.data[:, 0] = 0.0
    zero = grad_cam(model, x[0], 0)
    zero_ok = not zero.upsampled.any()
    ok = in_range and zero_ok and max(fd_errors) < 1e-3
    report(capsys, 10, "Grad-CAM invariants", ok,
           f"range ok={in_range}, zero-gradient map zero={zero_ok}, "
           f"max alpha FD rel err {max(fd_errors):.2e}", time.perf_counter() - t, 60)


def test_c11_checkpoint_roundtrip(capsys, tmp_path):
    t = time.perf_counter()
    spec = SynthSpec(counts={"normal": 6, "fibrosis": 6, "cancer": 6}, image_size=32, seed=11)
    data = ImageSet.from_pairs(iter_samples(spec))
    model, _ = train(build_model(TOY), data, replace(TOY_RECIPE, epochs=2,
                                                     augment=AugmentParams(rotate=False)))
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path, seed=0)
    loaded = load_checkpoint(path)
    a, b = model.state_dict(), loaded.state_dict()
    bit_exact = set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)
    probe = to_input(data.images)
    model.eval()
    loaded.eval()
    same_logits = np.array_equal(model(Tensor(probe)).data, loaded(Tensor(probe)).data)
    report(capsys, 11, "checkpoint roundtrip", bit_exact and same_logits,
           f"{len(a)} tensors bit-exact={bit_exact}, probe logits identical={same_logits}",
           time.perf_counter() - t, 10)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
