import numpy as np
import pytest

import cloudadapt.autodiff as ad
from cloudadapt import models

ARCH = models.ArchSpec(num_classes=4, points=16, k=4, edgeconv_widths=(8, 8),
                       feature_dim=16, classifier_hidden=8, seg_hidden=8,
                       decoder_widths=(16, 8, 3), dynamic_graph=True)


@pytest.fixture
def model():
    return models.ModelParams.init(ARCH, seed=0)


def batch(seed, b=3):
    return np.random.default_rng(seed).normal(size=(b, ARCH.points, 3))


class TestInit:
    def test_parameter_shapes(self, model):
        p = model.params
        assert p["encoder.edgeconv0.w"].value.shape == (6, 8)
        assert p["encoder.edgeconv1.w"].value.shape == (16, 8)
        assert p["encoder.fuse.w"].value.shape == (16, 16)
        assert p["classifier.fc1.w"].value.shape == (8, 4)
        assert p["segment.fc0.w"].value.shape == (32, 8)
        assert p["decoder.fc0.w"].value.shape == (18, 16)
        assert p["decoder.fc2.w"].value.shape == (8, 3)

    def test_affine_identity_at_init(self, model):
        np.testing.assert_allclose(model["encoder.fuse.scale"].value, 1.0)
        np.testing.assert_allclose(model["encoder.fuse.shift"].value, 0.0)

    def test_init_deterministic(self):
        a = models.ModelParams.init(ARCH, seed=5)
        b = models.ModelParams.init(ARCH, seed=5)
        for name in a.params:
            np.testing.assert_array_equal(a[name].value, b[name].value)

    def test_init_bound(self, model):
        w = model["encoder.fuse.w"].value
        assert np.max(np.abs(w)) <= 1.0 / np.sqrt(16)


class TestEncode:
    def test_global_shapes(self, model):
        out = models.encode_batch(batch(0), model, mode="global")
        assert out.global_.shape == (3, ARCH.feature_dim)
        assert out.pointwise is None

    def test_per_point_shapes(self, model):
        out = models.encode_batch(batch(1), model, mode="per_point")
        assert out.pointwise.shape == (3 * ARCH.points, 2 * ARCH.feature_dim)
        assert out.global_.shape == (3, ARCH.feature_dim)

    def test_unknown_mode_rejected(self, model):
        with pytest.raises(ValueError):
            models.encode_batch(batch(2), model, mode="chunky")

    def test_single_cloud_matches_batch(self, model):
        clouds = batch(3)
        stacked = models.encode_batch(clouds, model).global_.data
        for i in range(clouds.shape[0]):
            single = models.encode(clouds[i], model)
            np.testing.assert_allclose(single.data, stacked[i], atol=1e-12)

    def test_global_feature_permutation_invariant(self, model):
        cloud = batch(4, b=1)[0]
        perm = np.random.default_rng(5).permutation(ARCH.points)
        f1 = models.encode(cloud, model).data
        f2 = models.encode(cloud[perm], model).data
        np.testing.assert_allclose(f1, f2, atol=1e-12)

    def test_batch_independence(self, model):
        # each sample's feature must not depend on its batch neighbors
        clouds = batch(6)
        full = models.encode_batch(clouds, model).global_.data
        pairs = models.encode_batch(clouds[:2], model).global_.data
        np.testing.assert_allclose(full[:2], pairs, atol=1e-12)


class TestHeads:
    def test_classify_shapes(self, model):
        feat = models.encode_batch(batch(7), model).global_
        logits = models.classify_batch(feat, model)
        assert logits.shape == (3, ARCH.num_classes)
        single = models.classify(feat.data[0], model)
        assert single.shape == (ARCH.num_classes,)
        np.testing.assert_allclose(single.data, logits.data[0], atol=1e-12)

    def test_segment_shapes(self, model):
        out = models.encode_batch(batch(8), model, mode="per_point")
        logits = models.segment_batch(out.pointwise, model)
        assert logits.shape == (3 * ARCH.points, ARCH.num_classes)


class TestDecoder:
    def test_folding_grid_bounds_and_count(self):
        for m in (16, 17, 64):
            grid = models.folding_grid(m)
            assert grid.shape == (m, 2)
            assert np.min(grid) >= -0.5 and np.max(grid) <= 0.5

    def test_decode_shapes(self, model):
        feat = models.encode_batch(batch(9), model).global_
        out = models.decode_batch(feat, model)
        assert out.shape == (3 * ARCH.points, 3)
        single = models.decode(feat.data[0], model)
        assert single.shape == (ARCH.points, 3)
        np.testing.assert_allclose(single.data, out.data[:ARCH.points], atol=1e-12)

    def test_zeroed_final_layer_collapses_to_bias(self, model):
        model["decoder.fc2.w"].value[...] = 0.0
        model["decoder.fc2.b"].value[...] = [1.0, 2.0, 3.0]
        out = models.decode(np.zeros(ARCH.feature_dim), model)
        np.testing.assert_allclose(out.data, np.tile([1.0, 2.0, 3.0],
                                                     (ARCH.points, 1)))


class TestDynamicGraph:
    def test_static_vs_dynamic_differ_generically(self):
        import dataclasses
        static = models.ModelParams.init(
            dataclasses.replace(ARCH, dynamic_graph=False), seed=0)
        dynamic = models.ModelParams.init(ARCH, seed=0)
        cloud = batch(10, b=1)
        f_static = models.encode_batch(cloud, static).global_.data
        f_dynamic = models.encode_batch(cloud, dynamic).global_.data
        assert not np.allclose(f_static, f_dynamic)

    def test_gradients_flow_to_all_encoder_params(self, model):
        out = models.encode_batch(batch(11), model).global_
        ad.backward(ad.reduce_sum(ad.square(out)))
        for name, p in model.params.items():
            if name.startswith("encoder."):
                assert np.any(p.grad != 0.0), name
