import numpy as np
import pytest

from cloudadapt import datasets as D
from cloudadapt import trainer as T
from cloudadapt.ema import EmaState, init_teacher


def tiny_config(**overrides):
    base = dict(epochs=2, batch_size=4, points=64, k=4, num_classes=6,
                edgeconv_widths=(4, 4), feature_dim=8, classifier_hidden=8,
                seg_hidden=8, decoder_widths=(8, 3), seed=0)
    base.update(overrides)
    return T.TrainConfig.classification(**base)


@pytest.fixture(scope="module")
def splits():
    classes = D.default_class_specs()
    src = D.make_dataset(classes, 4, D.CLEAN_PROFILE, 64, seed=0)
    tgt = D.make_dataset(classes, 4, D.SHIFTED_PROFILE, 64, seed=1)
    return (T.Splits(*D.split_dataset(src, seed=0)),
            T.Splits(*D.split_dataset(tgt, seed=1)))


class TestConfig:
    def test_classification_defaults(self):
        cfg = T.TrainConfig.classification()
        assert (cfg.batch_size, cfg.epochs, cfg.lam) == (32, 150, 0.2)
        assert cfg.lr0 == 1e-3 and cfg.ema_momentum == 0.99
        assert cfg.jitter_sigma == 0.01 and cfg.jitter_clip == 0.02
        assert cfg.pm_alpha == 0.2 and cfg.k == 8

    def test_segmentation_defaults(self):
        cfg = T.TrainConfig.segmentation()
        assert (cfg.batch_size, cfg.epochs, cfg.lam) == (16, 200, 0.05)
        assert cfg.mode == "segmentation" and cfg.num_classes == 3

    def test_arch_mirrors_config(self):
        cfg = tiny_config()
        arch = cfg.arch()
        assert arch.points == 64 and arch.feature_dim == 8


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert T.cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)
        assert T.cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-18)
        assert T.cosine_lr(50, 100, 1e-3, 2e-4) == pytest.approx(6e-4)

    def test_monotone_decrease(self):
        values = [T.cosine_lr(t, 50, 1e-3) for t in range(51)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_range_check(self):
        with pytest.raises(ValueError):
            T.cosine_lr(101, 100, 1e-3)


class TestAdam:
    def test_minimizes_quadratic(self):
        from cloudadapt import models
        arch = tiny_config().arch()
        model = models.ModelParams.init(arch, seed=0)
        state = T.AdamState(model)
        p = model["classifier.fc0.b"]
        for _ in range(300):
            model.zero_grad()
            p.tensor.grad[...] = 2.0 * p.value
            T.adam_step(model, state, 0.05)
        assert np.max(np.abs(p.value)) < 1e-3
        assert state.step == 300

    def test_first_step_size_is_lr(self):
        from cloudadapt import models
        model = models.ModelParams.init(tiny_config().arch(), seed=0)
        state = T.AdamState(model)
        p = model["classifier.fc0.b"]
        before = p.value.copy()
        p.tensor.grad[...] = 3.7  # constant gradient
        T.adam_step(model, state, 1e-2)
        # bias-corrected first step is exactly lr * sign(g)
        np.testing.assert_allclose(before - p.value, 1e-2, rtol=1e-6)


class TestMeanIou:
    def test_perfect(self):
        y = np.random.default_rng(0).integers(0, 3, size=(4, 16))
        assert T.mean_iou(y, y, 3) == 1.0

    def test_known_value(self):
        truth = np.array([[0, 0, 1, 1]])
        pred = np.array([[0, 1, 1, 1]])
        # class 0: tp=1 fp=0 fn=1 -> 1/2; class 1: tp=2 fp=1 fn=0 -> 2/3
        assert T.mean_iou(pred, truth, 2) == pytest.approx((0.5 + 2 / 3) / 2)

    def test_absent_class_skipped(self):
        truth = np.array([[0, 0, 0, 0]])
        pred = np.array([[0, 0, 2, 2]])
        assert T.mean_iou(pred, truth, 3) == pytest.approx(0.5)


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        from cloudadapt import models
        model = models.ModelParams.init(tiny_config().arch(), seed=3)
        adam = T.AdamState(model)
        adam.step = 17
        for name in model.params:
            adam.m[name] += 0.5
        ema = EmaState(momentum=0.97, step=42)
        path = tmp_path / "model.ckpt"
        T.save_checkpoint(model, ema, adam, path)
        back = T.load_checkpoint(path)
        assert back.model.arch == model.arch
        for name, p in model.params.items():
            np.testing.assert_array_equal(back.model[name].value, p.value)
            np.testing.assert_array_equal(back.adam.m[name], adam.m[name])
        assert back.ema.momentum == 0.97 and back.ema.step == 42
        assert back.adam.step == 17

    def test_no_adam_state(self, tmp_path):
        from cloudadapt import models
        model = models.ModelParams.init(tiny_config().arch(), seed=3)
        path = tmp_path / "teacher.ckpt"
        T.save_checkpoint(model, EmaState(), None, path)
        assert T.load_checkpoint(path).adam is None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(T.CheckpointError, match="magic"):
            T.load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        from cloudadapt import models
        model = models.ModelParams.init(tiny_config().arch(), seed=3)
        path = tmp_path / "model.ckpt"
        T.save_checkpoint(model, EmaState(), None, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(T.CheckpointError, match="truncat"):
            T.load_checkpoint(path)

    def test_digest_mismatch_detected(self, tmp_path):
        from cloudadapt import models
        model = models.ModelParams.init(tiny_config().arch(), seed=3)
        path = tmp_path / "model.ckpt"
        T.save_checkpoint(model, EmaState(), None, path)
        raw = bytearray(path.read_bytes())
        raw[30] ^= 0xFF  # flip a byte inside the arch JSON
        path.write_bytes(bytes(raw))
        with pytest.raises(T.CheckpointError):
            T.load_checkpoint(path)


class TestTrainLoop:
    def test_smoke_and_outputs(self, splits, tmp_path):
        source, target = splits
        report = T.train(tiny_config(), source, target, run_dir=tmp_path / "run")
        assert len(report.rows) == 2
        for name in ("metrics.csv", "student.ckpt", "teacher.ckpt", "config.json"):
            assert (tmp_path / "run" / name).exists()
        header = (tmp_path / "run" / "metrics.csv").read_text().splitlines()[0]
        assert header == ("epoch,l_s,l_soft,l_t,l_cons,total,lr,"
                          "student_acc,teacher_acc")

    def test_deterministic_repeat(self, splits, tmp_path):
        source, target = splits
        T.train(tiny_config(), source, target, run_dir=tmp_path / "a")
        T.train(tiny_config(), source, target, run_dir=tmp_path / "b")
        for name in ("metrics.csv", "student.ckpt", "teacher.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_variants_run(self, splits):
        source, target = splits
        for variant in ("source_only", "autoencoder"):
            report = T.train(tiny_config(variant=variant, epochs=1),
                             source, target)
            assert len(report.rows) == 1

    def test_pm_variant_runs(self, splits):
        source, target = splits
        report = T.train(tiny_config(use_pm=True, epochs=1), source, target)
        assert len(report.rows) == 1

    def test_segmentation_mode_runs(self, tmp_path):
        classes = D.default_class_specs("segmentation")
        src = D.make_dataset(classes, 4, D.CLEAN_PROFILE, 64, seed=2,
                             mode="segmentation")
        tgt = D.make_dataset(classes, 4, D.SHIFTED_PROFILE, 64, seed=3,
                             mode="segmentation")
        cfg = T.TrainConfig.segmentation(
            epochs=1, batch_size=4, points=64, k=4, edgeconv_widths=(4, 4),
            feature_dim=8, classifier_hidden=8, seg_hidden=8,
            decoder_widths=(8, 3), seed=0)
        report = T.train(cfg, T.Splits(*D.split_dataset(src, seed=0)),
                         T.Splits(*D.split_dataset(tgt, seed=1)),
                         run_dir=tmp_path / "seg")
        header = (tmp_path / "seg" / "metrics.csv").read_text().splitlines()[0]
        assert header.endswith("student_miou,teacher_miou")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises_named_error(self, splits):
        source, target = splits
        bad = T.Splits(
            D.Dataset(clouds=source.train.clouds * np.inf,
                      labels=source.train.labels,
                      num_classes=source.train.num_classes),
            source.val, source.test)
        with pytest.raises(T.TrainDivergedError, match="l_s"):
            T.train(tiny_config(epochs=1), bad, target)

    def test_empty_dataset_rejected(self, splits):
        source, target = splits
        empty = D.Dataset(clouds=np.zeros((0, 64, 3)),
                          labels=np.zeros(0, dtype=np.int64), num_classes=6)
        with pytest.raises(ValueError):
            T.train(tiny_config(), T.Splits(empty, empty, empty), target)

    def test_teacher_tracks_student(self, splits):
        source, target = splits
        report = T.train(tiny_config(epochs=1, ema_momentum=0.5),
                         source, target)
        student, teacher = report.student, report.teacher
        # after training, the teacher must differ from both init and student
        fresh = init_teacher(student)
        assert any(
            not np.array_equal(teacher[n].value, fresh[n].value)
            for n in student.params)
