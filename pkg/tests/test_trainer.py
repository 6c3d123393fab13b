import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shgnet.autodiff import Tensor, backward, linear, one_hot, weighted_smoothed_ce
from shgnet.errors import ConfigError, DataError, NumericError
from shgnet.imaging import AugmentParams
from shgnet.models import ModelConfig, build_model
from shgnet.synth import SynthSpec, iter_samples
from shgnet.trainer import (
    HISTORY_HEADER,
    ImageSet,
    TrainRecipe,
    batch_slices,
    evaluate,
    mixup_batch,
    plain_cross_entropy,
    run_kfold,
    to_input,
    train,
)

TOY = dict(block_counts=(1, 1), base_width=4, head_hidden=8, input_size=32)
NO_AUG = AugmentParams(rotate=False)


@pytest.fixture(scope="module")
def small_set():
    spec = SynthSpec(counts={"normal": 6, "fibrosis": 6, "cancer": 6}, image_size=32, seed=3)
    return ImageSet.from_pairs(iter_samples(spec))


def quick_recipe(**kw):
    base = dict(epochs=1, batch_size=6, lr=1e-3, augment=NO_AUG, seed=0)
    base.update(kw)
    return TrainRecipe(**base)


class TestRecipe:
    def test_defaults(self):
        r = TrainRecipe()
        assert (r.lr, r.weight_decay, r.batch_size, r.clip_norm) == (1e-4, 0.01, 16, 1.0)
        assert (r.label_smoothing, r.mixup_alpha) == (0.1, 0.2)

    @pytest.mark.parametrize("kw", [{"batch_size": 1}, {"epochs": 0}, {"lr": 0.0},
                                    {"selection": "median"}, {"label_smoothing": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainRecipe(**kw)

    def test_dict_roundtrip(self):
        r = TrainRecipe(epochs=3, augment=AugmentParams(rotation_limit_deg=10))
        assert TrainRecipe.from_dict(r.to_dict()) == r


class TestMixup:
    def test_lambda_one_identity(self):
        x = np.random.default_rng(0).random((4, 3, 8, 8))
        q = one_hot([0, 1, 2, 0], 3)
        xm, qm, _ = mixup_batch(x, q, 0.2, 0, lam=1.0)
        np.testing.assert_array_equal(xm, x)
        np.testing.assert_array_equal(qm, q)

    def test_half_is_average(self):
        a, b = np.zeros((1, 2, 2)), np.full((1, 2, 2), 4.0)
        x = np.stack([a, b])
        xm, _, _ = mixup_batch(x, one_hot([0, 1], 2), 0.2, 1, lam=0.5)
        rng = np.random.default_rng(1)
        perm = rng.permutation(2)
        for i in range(2):
            np.testing.assert_allclose(xm[i], (x[i] + x[perm[i]]) / 2)

    @settings(max_examples=40)
    @given(st.integers(0, 2 ** 31), st.floats(0.05, 5.0))
    def test_rows_stay_distributions(self, seed, alpha):
        rng = np.random.default_rng(seed)
        q = one_hot(rng.integers(0, 3, 8), 3)
        _, qm, lam = mixup_batch(rng.random((8, 2)), q, alpha, seed)
        assert 0 <= lam <= 1
        np.testing.assert_allclose(qm.sum(axis=1), 1.0, atol=1e-6)

    def test_seeded(self):
        x = np.random.default_rng(0).random((5, 3))
        q = one_hot([0, 1, 2, 0, 1], 3)
        a = mixup_batch(x, q, 0.2, 11)
        b = mixup_batch(x, q, 0.2, 11)
        np.testing.assert_array_equal(a[0], b[0])


class TestLossProperties:
    def test_plain_ce_regression_guard(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(6, 3))
        y = rng.integers(0, 3, 6)
        loss = weighted_smoothed_ce(Tensor(z), one_hot(y, 3), np.ones(3), 0.0)
        assert float(loss.data) == pytest.approx(plain_cross_entropy(z, y), rel=1e-12)

    def test_duplication_equals_weighting(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(5, 4))
        labels = np.array([0, 1, 2, 0, 2])
        w = 3

        def run(x, y, weights):
            W = Tensor(np.zeros((4, 3)), requires_grad=True)
            b = Tensor(np.zeros(3), requires_grad=True)
            losses = []
            for _ in range(20):
                loss = weighted_smoothed_ce(linear(Tensor(x), W, b), one_hot(y, 3), weights,
                                            0.1, reduction="sum")
                gW, gb = backward(loss, [W, b])
                W.data -= 0.05 * gW
                b.data -= 0.05 * gb
                losses.append(float(loss.data))
            return np.array(losses), W.data

        dup = np.r_[np.arange(5), np.repeat(np.flatnonzero(labels == 0), w - 1)]
        l_dup, w_dup = run(feats[dup], labels[dup], np.ones(3))
        l_wt, w_wt = run(feats, labels, np.array([w, 1.0, 1.0]))
        np.testing.assert_allclose(l_dup, l_wt, rtol=1e-10)
        np.testing.assert_allclose(w_dup, w_wt, rtol=1e-10, atol=1e-12)


class TestBatching:
    def test_remainder_kept(self):
        assert [s.stop - s.start for s in batch_slices(37, 16)] == [16, 16, 5]

    def test_lone_sample_merged(self):
        assert [s.stop - s.start for s in batch_slices(33, 16)] == [16, 17]

    @settings(max_examples=50)
    @given(st.integers(2, 200), st.integers(2, 32))
    def test_cover(self, n, bs):
        sl = batch_slices(n, bs)
        assert sl[0].start == 0 and sl[-1].stop == n
        assert all(a.stop == b.start for a, b in zip(sl, sl[1:]))
        assert all(s.stop - s.start >= 2 for s in sl)


class TestTrain:
    def test_descent_on_two_samples(self):
        imgs = np.zeros((2, 32, 32, 3), np.uint8)
        imgs[1] = 255
        data = ImageSet(imgs, np.array([0, 1]), ["a", "b"], ("x", "y"))
        model = build_model(ModelConfig(num_classes=2, head_dropout=0.0, **TOY))
        x = Tensor(to_input(imgs))
        q = one_hot(data.labels, 2)

        def objective():
            model.train()
            return float(weighted_smoothed_ce(model(x), q, None, 0.1).data)

        before = objective()
        train(model, data, TrainRecipe(epochs=1, batch_size=2, lr=1e-2, mixup_alpha=0,
                                       augment=NO_AUG, bn_recalibrate=False))
        assert objective() < before

    def test_frozen_backbone_unchanged(self, small_set):
        model = build_model(ModelConfig(**TOY))
        before = {k: v.copy() for k, v in model.state_dict().items()}
        _, hist = train(model, small_set, quick_recipe(epochs=2, freeze="frozen_backbone"))
        after = model.state_dict()
        trainable = {n for n, p in model.named_parameters() if p.requires_grad}
        assert trainable == {n for n, _ in model.head_parameters()}
        for k in before:
            if k.startswith("head."):
                continue
            np.testing.assert_array_equal(before[k], after[k], err_msg=k)
        assert any(not np.array_equal(before[k], after[k]) for k in before if k.startswith("head."))

    def test_deterministic_history(self, small_set):
        runs = []
        for _ in range(2):
            model = build_model(ModelConfig(**TOY))
            _, hist = train(model, small_set, quick_recipe(epochs=2, augment=AugmentParams()),
                            {"normal": 2.0, "fibrosis": 1.0, "cancer": 1.0}, val=small_set)
            runs.append((hist.to_csv(), model.state_dict()))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])

    def test_history_shape_and_clip(self, small_set):
        model = build_model(ModelConfig(**TOY))
        _, hist = train(model, small_set, quick_recipe(epochs=3, lr=1e-2), val=small_set)
        assert len(hist.train_loss) == len(hist.val_acc) == 3
        assert hist.to_csv().splitlines()[0] == ",".join(HISTORY_HEADER)
        assert len(hist.grad_norms) == 9
        assert max(hist.grad_norms) <= 1.0 + 1e-6
        assert all(np.isfinite(hist.train_loss + hist.val_loss))
        assert hist.best_epoch in (1, 2, 3)

    def test_nan_aborts_with_diagnostic(self, small_set):
        model = build_model(ModelConfig(**TOY))
        model.head.fc2.weight.data[0, 0] = np.nan
        with pytest.raises(NumericError, match="step 0"):
            train(model, small_set, quick_recipe())

    def test_missing_weight(self, small_set):
        with pytest.raises(DataError):
            train(build_model(ModelConfig(**TOY)), small_set, quick_recipe(), {"normal": 1.0})

    def test_class_count_mismatch(self, small_set):
        with pytest.raises(ConfigError):
            train(build_model(ModelConfig(num_classes=2, **TOY)), small_set, quick_recipe())


class TestEvaluate:
    def test_scores_are_distributions(self, small_set):
        scores, pred = evaluate(build_model(ModelConfig(**TOY)), small_set)
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(pred, scores.argmax(axis=1))

    def test_binary_view(self, small_set):
        b = small_set.binary()
        assert b.classes == ("non_cancer", "cancer")
        assert b.labels.sum() == 6


class TestKFold:
    def test_partition_and_summary(self, small_set):
        res = run_kfold(small_set, ModelConfig(**TOY), quick_recipe(selection="last"), k=3)
        assert len(res.reports) == 3
        flat = [s for ids in res.val_ids for s in ids]
        assert sorted(flat) == sorted(small_set.sample_ids)
        assert sum(r.confusion.sum() for r in res.reports) == len(small_set)
        accs = [r.accuracy for r in res.reports]
        assert abs(res.summary["accuracy"]["mean"] - np.mean(accs)) < 1e-9
