import numpy as np
import pytest

from shgnet.autodiff import Tensor
from shgnet.gradcam import RAMP_HIGH, RAMP_LOW, SEPARATOR_WIDTH, colorize, grad_cam, render_overlay
from shgnet.models import ModelConfig, build_model


def toy_model(seed=0):
    model = build_model(ModelConfig(block_counts=(1, 1), base_width=4, head_hidden=8,
                                    input_size=32, seed=seed)).astype(np.float64)
    rng = np.random.default_rng(seed)
    for _, m in model.named_modules():
        if hasattr(m, "stats"):
            m.stats.mean[...] = rng.normal(0, 0.1, m.stats.mean.shape)
            m.stats.var[...] = rng.uniform(0.5, 1.5, m.stats.var.shape)
    return model.eval()


def probe_image(seed=0):
    return np.random.default_rng(seed).random((3, 32, 32))


def logit_with_shift(model, x, layer, channel, delta, target):
    def hook(t):
        bump = np.zeros(t.shape)
        bump[:, channel] = delta
        return t + Tensor(bump)
    return float(model(Tensor(x[None]), hooks={layer: hook}).data[0, target])


class TestGradCam:
    def test_range_and_shape(self):
        model, x = toy_model(), probe_image()
        for layer in model.layer_ids():
            hm = grad_cam(model, x, 1, layer)
            assert hm.upsampled.shape == (32, 32)
            assert hm.upsampled.min() >= 0 and hm.upsampled.max() <= 1
            assert hm.gradients.shape == hm.activations.shape

    def test_alpha_matches_finite_differences(self):
        model, x = toy_model(1), probe_image(1)
        for layer in ("stem", "stage1", "stage2"):
            hm = grad_cam(model, x, 2, layer)
            h, w = hm.activations.shape[1:]
            delta = 1e-5
            fd = np.array([
                (logit_with_shift(model, x, layer, k, delta, 2)
                 - logit_with_shift(model, x, layer, k, -delta, 2)) / (2 * delta * h * w)
                for k in range(hm.activations.shape[0])])
            rel = np.linalg.norm(hm.alpha - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel < 1e-3, (layer, rel)

    def test_zero_gradient_zero_map(self):
        model = toy_model()
        model.head.fc2.weight.data[:, 0] = 0.0
        hm = grad_cam(model, probe_image(), 0)
        assert not hm.upsampled.any()
        assert not np.isnan(hm.upsampled).any()

    def test_single_relevant_channel(self):
        model = toy_model(2)
        fc1 = model.head.fc1
        fc1.weight.data[...] = 0.0
        fc1.weight.data[0, :] = 1.0
        fc1.bias.data[...] = 0.0
        model.head.fc2.weight.data[...] = 1.0
        hm = grad_cam(model, probe_image(2), 0)
        assert hm.alpha[0] > 0 and not hm.alpha[1:].any()
        a0 = np.maximum(hm.activations[0], 0)
        np.testing.assert_allclose(hm.coarse, a0 / a0.max(), atol=1e-12)

    def test_formula(self):
        hm = grad_cam(toy_model(3), probe_image(3), 1)
        manual = np.maximum(np.einsum("k,kij->ij", hm.gradients.mean(axis=(1, 2)), hm.activations), 0)
        np.testing.assert_allclose(hm.raw, manual)

    def test_logit_shift_invariance(self):
        model, x = toy_model(4), probe_image(4)
        a = grad_cam(model, x, 1).upsampled
        model.head.fc2.bias.data += 7.0
        np.testing.assert_array_equal(a, grad_cam(model, x, 1).upsampled)

    def test_deterministic(self):
        model, x = toy_model(5), probe_image(5)
        np.testing.assert_array_equal(grad_cam(model, x, 0).upsampled, grad_cam(model, x, 0).upsampled)

    def test_uint8_input_accepted(self):
        img = (np.random.default_rng(0).random((32, 32, 3)) * 255).astype(np.uint8)
        assert grad_cam(toy_model(), img, 0).upsampled.shape == (32, 32)

    def test_unknown_layer(self):
        with pytest.raises(KeyError):
            grad_cam(toy_model(), probe_image(), 0, "stage9")


class TestOverlay:
    def setup_method(self):
        self.img = (np.random.default_rng(0).random((16, 20, 3)) * 255).astype(np.uint8)

    def test_width(self):
        out = render_overlay(self.img, np.zeros((16, 20)))
        assert out.shape == (16, 3 * 20 + 2 * SEPARATOR_WIDTH, 3)

    def test_zero_heatmap(self):
        out = render_overlay(self.img, np.zeros((16, 20)))
        center = out[:, 21:41]
        assert (center == RAMP_LOW.astype(np.uint8)).all()
        expected = np.rint(0.5 * self.img + 0.5 * RAMP_LOW).astype(np.uint8)
        np.testing.assert_array_equal(out[:, 42:], expected)
        np.testing.assert_array_equal(out[:, :20], self.img)

    def test_peak_is_ramp_max(self):
        heat = np.zeros((16, 20))
        heat[3, 4] = 1.0
        out = render_overlay(self.img, heat)
        np.testing.assert_array_equal(out[3, 21 + 4], RAMP_HIGH.astype(np.uint8))

    def test_colorize_endpoints(self):
        np.testing.assert_array_equal(colorize(np.array([0.0, 1.0])), [[0, 0, 255], [255, 0, 0]])
