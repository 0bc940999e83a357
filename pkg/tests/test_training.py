import numpy as np
import pytest

from squeezect.architecture import build_proposed
from squeezect.data import ImageSet, Normalizer
from squeezect.training import (SGD, ConfigError, Hyperparams, NumericError, TrainConfig, checkpoint_meta,
                                configure_experiment, lr_schedule, sgd_step, train)
from squeezect.weights import read_archive

SMALL = (3, 32, 32)


def test_sgd_step_by_hand():
    hp = Hyperparams(0.1, 0.9, 0.01)
    w = np.array([1.0, -2.0])
    v = np.array([0.5, 0.0])
    g = np.array([0.2, 0.4])
    sgd_step(w, g, v, hp, lr=0.1)
    v_expected = np.array([0.9 * 0.5 + 0.1 * (0.2 + 0.01 * 1.0), 0.1 * (0.4 + 0.01 * -2.0)])
    np.testing.assert_allclose(v, v_expected)
    np.testing.assert_allclose(w, [1.0, -2.0] - v_expected)


def test_sgd_zero_momentum_is_plain_descent():
    w, v = np.array([3.0]), np.zeros(1)
    sgd_step(w, np.array([2.0]), v, Hyperparams(0.5, 0.0, 0.0), 0.5)
    assert w[0] == 2.0


def test_sgd_rejects_non_finite_gradient():
    with pytest.raises(NumericError):
        sgd_step(np.zeros(2), np.array([1.0, np.inf]), np.zeros(2), Hyperparams(), 0.1)


def test_lr_schedule_steps():
    got = [lr_schedule(e, 0.1) for e in range(1, 21)]
    expected = [0.1] * 5 + [0.1 * 0.8] * 5 + [0.1 * 0.8 ** 2] * 5 + [0.1 * 0.8 ** 3] * 5
    assert got == expected
    with pytest.raises(ValueError):
        lr_schedule(0, 0.1)


@pytest.mark.parametrize("kwargs", [dict(learning_rate=-1), dict(learning_rate=2), dict(momentum=1.0),
                                    dict(l2=-1e-3)])
def test_hyperparams_validation(kwargs):
    with pytest.raises(ConfigError):
        Hyperparams(**kwargs)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(experiment="exp9")


def test_experiment_table(tmp_path):
    v, transfer = configure_experiment("exp4")
    assert v.name == "proposed" and not transfer
    v, transfer = configure_experiment("exp2")
    assert v.name == "squeezenet_simple_bypass" and not transfer
    v, transfer = configure_experiment("exp3", weights=tmp_path / "w")
    assert v.name == "squeezenet_simple_bypass" and transfer
    v, transfer = configure_experiment("exp1", weights=tmp_path / "w")
    assert v.name == "squeezenet_plain" and v.fire_variant == "classic"
    with pytest.raises(ConfigError, match="weight"):
        configure_experiment("exp3")


def toy_sets(n=8, size=32, seed=0):
    """Bright-centre vs dark-centre squares: separable after a few epochs."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    imgs = rng.random((n, size, size)).astype(np.float32) * 0.3
    c = size // 4
    imgs[labels == 1, c:-c, c:-c] += 0.6
    ids = [f"s{i}" for i in range(n)]
    return ImageSet(imgs, labels, ids), ImageSet(imgs[:4].copy(), labels[:4].copy(), ids[:4])


def run(epochs=3, seed=0, out_dir=None, lr=0.01):
    tr, va = toy_sets()
    net = build_proposed(SMALL, seed=seed)
    cfg = TrainConfig(Hyperparams(lr, 0.9, 1e-4), epochs=epochs, batch_size=8, seed=seed)
    return net, train(net, tr, va, cfg, out_dir=out_dir)


def test_training_reduces_loss():
    _, rep = run(epochs=4)
    assert len(rep.train_loss) == 4
    assert rep.train_loss[-1] < rep.train_loss[0]
    assert rep.learning_rate == [0.01] * 4


def test_training_is_bitwise_reproducible():
    _, a = run(epochs=2, seed=5)
    _, b = run(epochs=2, seed=5)
    assert [x.hex() for x in a.train_loss] == [x.hex() for x in b.train_loss]


def test_checkpoint_holds_best_epoch(tmp_path):
    net, rep = run(epochs=3, out_dir=tmp_path)
    assert rep.checkpoint == tmp_path / "checkpoint.sqz"
    meta = checkpoint_meta(rep.checkpoint)
    assert int(meta["epoch"]) == rep.best_epoch
    assert float(meta["val_accuracy"]) == pytest.approx(rep.best_val_accuracy, abs=1e-6)
    for key in ("learning_rate", "momentum", "l2", "seed", "norm_mean", "norm_std", "val_sensitivity"):
        assert key in meta
    _, tensors = read_archive(rep.checkpoint)
    for k, p in net.parameters().items():
        np.testing.assert_array_equal(tensors[k], p.data)


def test_best_epoch_is_earliest_on_ties():
    tr, va = toy_sets()
    net = build_proposed(SMALL)
    rep = train(net, tr, va, TrainConfig(Hyperparams(0.0, 0.0, 0.0), epochs=3, batch_size=8))
    # zero learning rate leaves weights fixed apart from batch-norm statistics
    if len(set(rep.val_accuracy)) == 1:
        assert rep.best_epoch == 1
    assert rep.best_val_accuracy == max(rep.val_accuracy)
    assert rep.best_epoch == rep.val_accuracy.index(max(rep.val_accuracy)) + 1


def test_non_finite_loss_reports_epoch_and_batch():
    tr, va = toy_sets()
    tr.images[3, 0, 0] = np.nan
    net = build_proposed(SMALL)
    with pytest.raises(NumericError, match="epoch 1, batch 1"):
        train(net, tr, va, TrainConfig(epochs=1, batch_size=64), normalizer=Normalizer(0.0, 1.0))


def test_empty_training_split():
    _, va = toy_sets()
    empty = ImageSet(np.zeros((0, 32, 32), np.float32), np.zeros(0, np.int64), [])
    with pytest.raises(ConfigError):
        train(build_proposed(SMALL), empty, va, TrainConfig(epochs=1))


def test_optimizer_skips_running_statistics():
    net = build_proposed(SMALL)
    opt = SGD(net, Hyperparams())
    assert "fire2.bn.running_mean" not in opt.params
    assert "fire2.bn.gamma" in opt.params
