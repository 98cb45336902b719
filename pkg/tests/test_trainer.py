import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tripletdrn.miner import valid_pair_masks
from tripletdrn.model import ModelConfig, build_model, checkpoint_bytes
from tripletdrn.tensor import ConfigError, ShapeError, Tensor
from tripletdrn.trainer import (
    PRESETS,
    OptimState,
    TrainConfig,
    TrainingDiverged,
    make_batches,
    preset,
    sgd_step,
    train,
    undersized,
    write_stats,
)

TINY = ModelConfig(input_size=8, stem_channels=2, widths=(2, 3, 3), dilations=(1, 2, 4), strides=(1, 1, 1), embed_dim=4)
FAST = TrainConfig(lr=0.05, batch_size=4, classes_per_batch=2, samples_per_class=2, epochs=2)


def toy_data(seed=0, classes=3, per_class=4):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    base = rng.random((classes, 3, 8, 8))
    images = base[labels] + 0.05 * rng.standard_normal((len(labels), 3, 8, 8))
    return np.clip(images, 0, 1), labels


def scalar_param(v=1.0):
    return Tensor(np.array([v]), requires_grad=True)


class TestSGD:
    def test_zero_gradient_no_decay(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = OptimState.zeros_like([p])
        sgd_step([p], [np.zeros(2)], state, TrainConfig(weight_decay=0.0))
        assert_array_equal(p.data, [1.0, -2.0])

    def test_vanilla_step(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        sgd_step([p], [np.array([0.5, -1.0])], OptimState.zeros_like([p]), TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0))
        assert_allclose(p.data, [0.95, 2.1], rtol=1e-15)

    def test_two_momentum_steps(self):
        p = scalar_param()
        state = OptimState.zeros_like([p])
        cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step([p], [np.array([1.0])], state, cfg)
        assert_allclose(p.data, [0.9], rtol=1e-15)
        sgd_step([p], [np.array([1.0])], state, cfg)
        assert_allclose(p.data, [0.71], rtol=1e-14)
        assert_allclose(state.velocity[0], [1.9], rtol=1e-15)

    def test_weight_decay_is_l2(self):
        p = scalar_param(2.0)
        sgd_step([p], [np.array([0.0])], OptimState.zeros_like([p]), TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.5))
        assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])

    def test_gem_clamped(self):
        p = scalar_param(1.05)
        sgd_step([p], [np.array([10.0])], OptimState.zeros_like([p]), TrainConfig(lr=0.1, momentum=0.0), gem=p)
        assert p.data[0] == 1.0

    def test_shape_mismatch(self):
        p = scalar_param()
        with pytest.raises(ShapeError):
            sgd_step([p], [np.zeros(2)], OptimState.zeros_like([p]), TrainConfig())


class TestBatches:
    def test_two_by_two(self):
        batches = make_batches([0, 0, 1, 1], 2, 2, seed=0, epoch=1)
        assert len(batches) == 1 and sorted(batches[0]) == [0, 1, 2, 3]

    def test_determinism(self):
        labels = np.repeat(np.arange(10), 6)
        a = make_batches(labels, 4, 3, seed=3, epoch=2)
        b = make_batches(labels, 4, 3, seed=3, epoch=2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        c = make_batches(labels, 4, 3, seed=3, epoch=3)
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    @pytest.mark.parametrize("p,q", [(2, 2), (3, 4), (8, 4)])
    def test_triplet_count(self, p, q):
        labels = np.repeat(np.arange(12), 5)
        for batch in make_batches(labels, p, q, seed=1, epoch=1):
            bl = labels[batch]
            assert len(np.unique(bl)) == p and len(bl) == p * q
            m = valid_pair_masks(bl)
            count = int((m.ap.sum(axis=1) * m.an.sum(axis=1)).sum())
            assert count >= q * (q - 1) * p * (p - 1) * q

    def test_every_class_visited(self):
        labels = np.repeat(np.arange(20), 12)
        seen = {int(labels[i]) for b in make_batches(labels, 8, 4, seed=0, epoch=1) for i in b}
        assert seen == set(range(20))

    def test_undersized_sampled_with_replacement(self):
        labels = np.array([0, 0, 0, 0, 1, 2, 2, 2])
        assert undersized(labels, 3) == [1]
        batches = make_batches(labels, 3, 3, seed=0, epoch=1)
        assert all(len(b) == 9 for b in batches)

    def test_too_few_classes(self):
        with pytest.raises(ConfigError):
            make_batches([0, 0, 1, 1], 3, 2, seed=0, epoch=1)


class TestConfig:
    def test_batch_must_factor(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=30).validate()

    def test_paper_preset(self):
        cfg = PRESETS["paper"]
        assert (cfg.margin, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.epochs) == (0.7, 1e-4, 0.9, 5e-5, 55, 20)
        cfg.validate()

    def test_desk_preset(self):
        cfg = preset("desk")
        assert cfg.batch_size == 32 == cfg.classes_per_batch * cfg.samples_per_class and cfg.epochs <= 20
        cfg.validate()

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("laptop")

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"lr": 0.1, "nesterov": True})


class TestTrain:
    def test_zero_lr_keeps_parameters(self):
        images, labels = toy_data()
        model = build_model(TINY, seed=0)
        before = checkpoint_bytes(model)
        cfg = TrainConfig(lr=0.0, weight_decay=0.0, batch_size=4, classes_per_batch=2, samples_per_class=2, epochs=2)
        train(model, images, labels, cfg)
        assert checkpoint_bytes(model) == before

    def test_same_seed_bit_identical(self):
        images, labels = toy_data()
        runs = []
        for _ in range(2):
            model = build_model(TINY, seed=4)
            train(model, images, labels, FAST)
            runs.append(checkpoint_bytes(model))
        assert runs[0] == runs[1]

    def test_stats_and_outputs(self, tmp_path):
        images, labels = toy_data()
        model = build_model(TINY, seed=1)
        stats = train(model, images, labels, FAST, checkpoint_dir=tmp_path / "ck", log_path=tmp_path / "s.csv")
        assert [s.epoch for s in stats] == [1, 2]
        assert all(0.0 <= s.active_fraction <= 1.0 for s in stats)
        assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["epoch001.drck", "epoch002.drck"]
        rows = (tmp_path / "s.csv").read_text().splitlines()
        assert rows[0] == "epoch,mean_loss,active_fraction,gem_p" and len(rows) == 3

    def test_divergence_names_parameter(self):
        images, labels = toy_data()
        model = build_model(TINY, seed=2)
        model.params["fc.weight"].data[0, 0] = np.nan
        with pytest.raises(TrainingDiverged, match="non-finite"):
            train(model, images, labels, FAST)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_huge_lr_diverges(self):
        images, labels = toy_data()
        model = build_model(TINY, seed=2)
        with pytest.raises(TrainingDiverged, match="non-finite"):
            train(model, images, labels, TrainConfig(lr=1e300, batch_size=4, classes_per_batch=2, samples_per_class=2, epochs=3))

    def test_write_stats_empty(self, tmp_path):
        write_stats([], tmp_path / "e.csv")
        assert (tmp_path / "e.csv").read_text().strip() == "epoch,mean_loss,active_fraction,gem_p"
