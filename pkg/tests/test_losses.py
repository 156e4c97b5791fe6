import numpy as np
import pytest

import cloudadapt.autodiff as ad
from cloudadapt import losses as L
from cloudadapt import models
from cloudadapt.autodiff import Tensor, backward
from cloudadapt.ema import init_teacher
from cloudadapt.trainer import DomainBatch

ARCH = models.ArchSpec(num_classes=3, points=16, k=4, edgeconv_widths=(8, 8),
                       feature_dim=16, classifier_hidden=8, seg_hidden=8,
                       decoder_widths=(16, 8, 3), dynamic_graph=False)


def model_pair(seed=0, perturb=0.05):
    student = models.ModelParams.init(ARCH, seed=seed)
    teacher = init_teacher(student)
    rng = np.random.default_rng(seed + 1)
    for p in teacher.parameters():
        p.value += perturb * rng.normal(size=p.value.shape)
    return student, teacher


def domain_batch(seed=0, mode="classification", b=2):
    rng = np.random.default_rng(seed)
    labels = (rng.integers(0, 3, size=b) if mode == "classification"
              else rng.integers(0, 3, size=(b, ARCH.points)))
    return DomainBatch(source_clouds=rng.normal(size=(b, ARCH.points, 3)),
                       target_clouds=rng.normal(size=(b, ARCH.points, 3)),
                       source_labels=labels)


class TestCe:
    def test_uniform_is_log_c(self):
        logp = Tensor(np.full((4, 10), -np.log(10.0)))
        assert L.ce_loss(logp, [0, 3, 5, 9]).item() == pytest.approx(np.log(10.0))

    def test_perfect_prediction_is_zero(self):
        logp = ad.log_softmax(Tensor(1e3 * np.eye(3)))
        assert L.ce_loss(logp, [0, 1, 2]).item() == pytest.approx(0.0, abs=1e-9)

    def test_arithmetic_example(self):
        probs = np.array([[0.8, 0.2], [0.4, 0.6]])
        value = L.ce_loss(Tensor(np.log(probs)), [0, 0]).item()
        assert value == pytest.approx(-(np.log(0.8) + np.log(0.4)) / 2)
        assert value == pytest.approx(0.5697, abs=1e-4)

    def test_label_out_of_range(self):
        logp = Tensor(np.log(np.full((2, 3), 1 / 3)))
        for labels in ([0, 3], [-1, 0]):
            with pytest.raises(ValueError):
                L.ce_loss(logp, labels)

    def test_wrong_label_count(self):
        with pytest.raises(ValueError):
            L.ce_loss(Tensor(np.zeros((2, 3))), [0])


class TestSoftCe:
    def test_onehot_equals_ce(self):
        rng = np.random.default_rng(0)
        logp = ad.log_softmax(Tensor(rng.normal(size=(5, 4))))
        labels = rng.integers(0, 4, size=5)
        onehot = np.eye(4)[labels]
        assert abs(L.soft_ce_loss(logp, onehot).item()
                   - L.ce_loss(logp, labels).item()) < 1e-12

    def test_half_half_example(self):
        logp = Tensor(np.log([[0.5, 0.5]]))
        assert L.soft_ce_loss(logp, [[1.0, 0.0]]).item() == pytest.approx(np.log(2))

    def test_gibbs_inequality(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(3, 4))
        p = np.exp(ad.log_softmax(Tensor(logits)).data)
        self_ce = L.soft_ce_loss(ad.log_softmax(Tensor(logits)), p).item()
        entropy = float(-(p * np.log(p)).sum(axis=1).mean())
        assert self_ce == pytest.approx(entropy, abs=1e-12)
        other = ad.log_softmax(Tensor(logits + rng.normal(size=logits.shape)))
        assert L.soft_ce_loss(other, p).item() >= entropy - 1e-12

    def test_invalid_targets_rejected(self):
        logp = Tensor(np.log(np.full((1, 2), 0.5)))
        for bad in ([[0.5, 0.6]], [[-0.1, 1.1]]):
            with pytest.raises(ValueError):
                L.soft_ce_loss(logp, bad)


class TestConsistency:
    def test_equal_features_zero(self):
        f = np.random.default_rng(2).normal(size=(4, 8))
        assert L.consistency_loss(Tensor(f), f).item() == 0.0

    def test_known_value(self):
        assert L.consistency_loss(Tensor([1.0, 0.0]), [0.0, 1.0]).item() == \
            pytest.approx(2.0, abs=1e-12)

    def test_gradient_is_two_diff_over_batch(self):
        rng = np.random.default_rng(3)
        fs = ad.Parameter("f", rng.normal(size=(4, 6)))
        ft = rng.normal(size=(4, 6))
        backward(L.consistency_loss(fs.tensor, ft))
        np.testing.assert_allclose(fs.grad, 2.0 * (fs.value - ft) / 4, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            L.consistency_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


class TestRecon:
    def test_identity_is_zero(self):
        cloud = np.random.default_rng(4).normal(size=(1, 8, 3))
        decoded = Tensor(cloud.reshape(8, 3))
        assert L.recon_loss(decoded, cloud).item() == 0.0

    def test_singleton_example(self):
        decoded = Tensor(np.zeros((1, 3)))
        original = np.array([[[1.0, 0.0, 0.0]]])
        assert L.recon_loss(decoded, original).item() == pytest.approx(2.0)

    def test_batch_mean(self):
        # per-sample Chamfers 2.0 and 4.0 -> mean 3.0
        decoded = Tensor(np.zeros((2, 3)))
        originals = np.array([[[1.0, 0, 0]], [[np.sqrt(2.0), 0, 0]]])
        assert L.recon_loss(decoded, originals).item() == pytest.approx(3.0)


class TestTotalLoss:
    @pytest.mark.parametrize("mode", ["classification", "segmentation"])
    def test_decomposition_identity(self, mode):
        student, teacher = model_pair()
        lam = 0.2 if mode == "classification" else 0.05
        out = L.total_loss(domain_batch(0, mode), student, teacher, lam, mode=mode)
        recomposed = lam * (out.l_s + out.l_soft) + out.l_t + out.l_cons
        assert abs(out.total - recomposed) < 1e-12
        assert all(v >= 0.0 for v in out.components().values())

    @pytest.mark.parametrize("mode", ["classification", "segmentation"])
    def test_consistency_zero_after_init(self, mode):
        student = models.ModelParams.init(ARCH, seed=2)
        teacher = init_teacher(student)
        out = L.total_loss(domain_batch(1, mode), student, teacher, 0.2, mode=mode)
        assert out.l_cons == 0.0
        if mode == "segmentation":
            assert out.l_soft == 0.0

    @pytest.mark.parametrize("mode", ["classification", "segmentation"])
    def test_teacher_gradients_stay_zero(self, mode):
        student, teacher = model_pair(seed=3)
        out = L.total_loss(domain_batch(2, mode), student, teacher, 0.2, mode=mode)
        backward(out.total_tensor)
        for p in teacher.parameters():
            assert not np.any(p.grad)

    def test_pm_uses_soft_labels(self):
        student, teacher = model_pair(seed=4)
        batch = domain_batch(3)
        soft = np.zeros((2, 3))
        soft[:, 0] = 0.25
        soft[:, 1] = 0.75
        batch.source_soft_labels = soft
        out = L.total_loss(batch, student, teacher, 0.2, use_pm=True)
        plain = L.total_loss(batch, student, teacher, 0.2, use_pm=False)
        assert out.l_s != plain.l_s

    def test_unknown_mode_rejected(self):
        student, teacher = model_pair(seed=5)
        with pytest.raises(ValueError):
            L.total_loss(domain_batch(4), student, teacher, 0.2, mode="detection")
