import numpy as np
import pytest
import torch

from fewshot_facies.backbone import FewShotSegmenter, NetworkConfig, pad_to_multiple, parameter_count
from fewshot_facies.episodes import binarize_mask


@pytest.fixture
def model():
    torch.manual_seed(0)
    return FewShotSegmenter(NetworkConfig.toy()).eval()


def images(rng, k, h, w):
    return rng.uniform(0, 255, (k, h, w)).astype(np.float32)


class TestEncoders:
    @pytest.mark.parametrize("size,stride,grid", [(256, 32, 8), (64, 16, 4), (64, 4, 16)])
    def test_feature_grid(self, model, rng, size, stride, grid):
        feats = model.encode_image(images(rng, 1, size, size))
        assert feats[stride].shape[-2:] == (grid, grid)
        assert feats[stride].shape[1] == model.cfg.widths[[4, 8, 16, 32].index(stride)]

    def test_eval_deterministic(self, model, rng):
        x = images(rng, 2, 64, 64)
        a, b = model.encode_image(x), model.encode_image(x)
        assert all(torch.equal(a[s], b[s]) for s in a)

    def test_mask_encoder_shapes(self, model):
        enc = model.encode_mask(np.ones((1, 256, 256), np.float32))
        assert enc[16].shape == (1, 16, 16, 16) and enc[32].shape == (1, 16, 8, 8)

    @torch.no_grad()
    def test_mask_encoder_non_degenerate(self, model):
        zeros = model.encode_mask(np.zeros((1, 64, 64), np.float32))
        ones = model.encode_mask(np.ones((1, 64, 64), np.float32))
        assert float((zeros[16] - ones[16]).norm()) > 0 and float((zeros[32] - ones[32]).norm()) > 0

    def test_mask_batch_order(self, model, rng):
        m = (rng.random((3, 64, 64)) > 0.5).astype(np.float32)
        batch = model.encode_mask(m)[16]
        for i in range(3):
            torch.testing.assert_close(batch[i], model.encode_mask(m[i:i + 1])[16][0])


class TestPrediction:
    def test_range_and_shape(self, model, rng):
        for size in (64, 256):
            sup = images(rng, 2, size, size)
            m = (rng.random((2, size, size)) > 0.5).astype(np.float32)
            out = model.predict_binary(sup, m, images(rng, 1, size, size)[0])
            assert out.shape == (size, size)
            assert float(out.min()) > 0 and float(out.max()) < 1

    def test_deterministic(self, model, rng):
        sup, m = images(rng, 3, 64, 64), (rng.random((3, 64, 64)) > 0.5).astype(np.float32)
        q = images(rng, 1, 64, 64)[0]
        assert torch.equal(model.predict_binary(sup, m, q), model.predict_binary(sup, m, q))

    def test_support_order_invariance(self, model, rng):
        sup, m = images(rng, 5, 64, 64), (rng.random((5, 64, 64)) > 0.5).astype(np.float32)
        q = images(rng, 1, 64, 64)[0]
        perm = rng.permutation(5)
        a = model.predict_binary(sup, m, q)
        b = model.predict_binary(sup[perm], m[perm], q)
        assert float((a - b).abs().max()) <= 1e-5

    def test_odd_size_is_padded_and_cropped(self, model, rng):
        sup, q = images(rng, 2, 50, 70), images(rng, 1, 50, 70)[0]
        m = rng.integers(1, 4, (2, 50, 70))
        out = model.predict_classwise(sup, binarize_mask(m, 3), q)
        assert out.shape == (3, 50, 70)

    def test_classwise_matches_binary_calls(self, model, rng):
        sup, q = images(rng, 2, 64, 64), images(rng, 1, 64, 64)[0]
        bins = binarize_mask(rng.integers(1, 4, (2, 64, 64)), 3)
        joint = model.predict_classwise(sup, bins, q)
        for j in range(3):
            torch.testing.assert_close(joint[j], model.predict_binary(sup, bins[j], q), atol=1e-5, rtol=1e-4)

    def test_mismatched_shapes(self, model, rng):
        with pytest.raises(ValueError):
            model.predict_binary(images(rng, 2, 64, 64), np.ones((2, 32, 32), np.float32), images(rng, 1, 64, 64)[0])


def test_every_parameter_gets_gradient(rng):
    torch.manual_seed(1)
    model = FewShotSegmenter(NetworkConfig.toy()).train()
    sup, q = images(rng, 3, 64, 64), images(rng, 1, 64, 64)[0]
    bins = binarize_mask(rng.integers(1, 3, (3, 64, 64)), 2)
    (model.classwise_logits(sup, bins, q) * torch.randn(2, 64, 64)).sum().backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or float(p.grad.abs().sum()) == 0]
    assert dead == []


def test_parameter_count_is_class_free(model, rng):
    shapes = {n: p.shape for n, p in model.named_parameters()}
    sup, q = images(rng, 2, 64, 64), images(rng, 1, 64, 64)[0]
    for c in (2, 4, 6):
        out = model.predict_classwise(sup, binarize_mask(rng.integers(1, c + 1, (2, 64, 64)), c), q)
        assert out.shape[0] == c
    assert {n: p.shape for n, p in model.named_parameters()} == shapes
    assert parameter_count(model) == parameter_count(FewShotSegmenter(NetworkConfig.toy()))


def test_shared_gp_params():
    model = FewShotSegmenter(NetworkConfig.toy(shared_gp_params=True))
    assert model.gp_heads["16"] is model.gp_heads["32"]


def test_gp_strides_fixed():
    with pytest.raises(ValueError):
        NetworkConfig.toy(gp_strides=(8, 16))


def test_full_preset_builds():
    model = FewShotSegmenter(NetworkConfig.full())
    feats = model.encode_image(np.zeros((1, 64, 64), np.float32))
    assert [feats[s].shape[1] for s in (4, 8, 16, 32)] == [256, 512, 1024, 2048]


def test_pad_to_multiple():
    x, size = pad_to_multiple(torch.zeros(1, 1, 50, 70))
    assert x.shape[-2:] == (64, 96) and size == (50, 70)
    y, _ = pad_to_multiple(torch.zeros(1, 1, 10, 10))  # too small for reflect
    assert y.shape[-2:] == (32, 32)
