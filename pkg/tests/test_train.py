"""Trainer: loss values, 1cycle schedule, augmentation, early stopping."""

import math

import numpy as np
import pytest

from srlf.errors import ConfigError, ValidationError
from srlf.net import ModelConfig, backward, forward, init_model
from srlf.train import (
    STOP_EARLY,
    STOP_MAX_EPOCHS,
    TrainConfig,
    TrainData,
    batch_loss_and_dlogits,
    compute_loss,
    one_cycle_lr,
    permute_views,
    split_indices,
    train,
)

TINY3 = ModelConfig(num_views=3, embed_dim=6, branch_sizes=(4,), branch_dropout=(0.0,),
                    fusion_sizes=(12, 5), num_classes=3)


# ---------------------------------------------------------------- loss

def test_loss_uniform_logits():
    assert compute_loss(np.zeros(16), 3) == pytest.approx(math.log(16), abs=1e-9)


def test_loss_saturated_correct():
    logits = np.zeros(16)
    logits[5] = 100.0
    assert compute_loss(logits, 5) < 1e-6


def test_loss_weight_scaling():
    weights = np.ones(16)
    weights[3] = 2.0
    assert compute_loss(np.zeros(16), 3, weights) == pytest.approx(2 * math.log(16))


def test_loss_label_out_of_range():
    with pytest.raises(ValidationError):
        compute_loss(np.zeros(16), 16)


def test_loss_confidence_ordering():
    confident = np.zeros(4)
    confident[1] = 8.0
    assert compute_loss(confident, 1) < compute_loss(confident, 2)
    assert compute_loss(confident, 1) >= 0


def test_zero_weight_class_has_zero_gradient():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(8, 4))
    labels = np.full(8, 2)
    weights = np.ones(4)
    weights[2] = 0.0
    loss, dlogits = batch_loss_and_dlogits(logits, labels, weights)
    assert loss == 0.0
    assert np.linalg.norm(dlogits) == 0.0


def test_batch_loss_matches_per_sample():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(10, 16))
    labels = rng.integers(0, 16, size=10)
    loss, _ = batch_loss_and_dlogits(logits.copy(), labels)
    per_sample = np.mean([compute_loss(l, y) for l, y in zip(logits, labels)])
    assert loss == pytest.approx(per_sample, rel=1e-6)


# ---------------------------------------------------------------- schedule

def test_one_cycle_endpoints_defaults():
    cfg = TrainConfig()
    total = 1000
    assert one_cycle_lr(0, total, cfg) == pytest.approx(4e-6)
    peak = int(round(cfg.pct_start * total))
    assert one_cycle_lr(peak, total, cfg) == pytest.approx(1e-4)
    assert one_cycle_lr(total - 1, total, cfg) == pytest.approx(1e-8)


def test_one_cycle_shape():
    cfg = TrainConfig()
    total = 500
    trace = np.array([one_cycle_lr(s, total, cfg) for s in range(total)])
    assert np.all(trace > 0)
    assert trace.max() == pytest.approx(cfg.base_lr, rel=1e-12)
    peak = int(round(cfg.pct_start * total))
    assert np.all(np.diff(trace[:peak + 1]) >= 0)   # warmup monotone up
    assert np.all(np.diff(trace[peak:]) <= 0)       # anneal monotone down
    # Continuity at the junction: adjacent steps differ by a smooth amount.
    gaps = np.abs(np.diff(trace))
    assert gaps.max() < cfg.base_lr * math.pi / min(peak, total - peak)


def test_one_cycle_step_range():
    cfg = TrainConfig()
    with pytest.raises(ValidationError):
        one_cycle_lr(100, 100, cfg)
    with pytest.raises(ValidationError):
        one_cycle_lr(-1, 100, cfg)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(base_lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(pct_start=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(early_stop_patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=0)


# ---------------------------------------------------------------- permutation

def test_permute_single_view_identity():
    rng = np.random.default_rng(0)
    v = [np.arange(4.0)]
    for _ in range(20):
        assert permute_views(v, rng)[0] is v[0]


def test_permutation_frequencies_uniform():
    rng = np.random.default_rng(123)
    counts = {}
    vectors = [np.full(2, i) for i in range(3)]
    for _ in range(6000):
        out = permute_views(vectors, rng)
        key = tuple(int(v[0]) for v in out)
        counts[key] = counts.get(key, 0) + 1
        assert sorted(key) == [0, 1, 2]  # multiset preserved
    assert len(counts) == 6
    for key, c in counts.items():
        assert abs(c / 6000 - 1 / 6) <= 0.03, (key, c)


def test_augmentation_expected_gradient():
    """Mean gradient under random view order == mean over all 3! orders."""
    from itertools import permutations

    params = init_model(TINY3, seed=0, dtype=np.float64)
    rng = np.random.default_rng(7)
    views = [rng.normal(size=6) for _ in range(3)]
    label = 1

    def grad_for(ordering):
        ordered = [views[i][None, :] for i in ordering]
        cache = {}
        logits = forward(params, ordered, mode="eval", cache=cache)
        _, dlogits = batch_loss_and_dlogits(logits[None, :] if logits.ndim == 1 else logits,
                                            np.array([label]))
        return np.concatenate([g.ravel() for g in
                               backward(params, cache, dlogits, bn_mode="running")])

    orders = list(permutations(range(3)))
    per_order = {o: grad_for(o) for o in orders}
    exact = np.mean(list(per_order.values()), axis=0)

    draw_rng = np.random.default_rng(99)
    index_views = [np.array([i]) for i in range(3)]
    freq = {o: 0 for o in orders}
    draws = 60000
    for _ in range(draws):
        out = permute_views(index_views, draw_rng)
        freq[tuple(int(v[0]) for v in out)] += 1
    sampled = sum((freq[o] / draws) * per_order[o] for o in orders)
    rel = np.linalg.norm(sampled - exact) / np.linalg.norm(exact)
    assert rel < 1e-2


# ---------------------------------------------------------------- split

def test_split_sizes_and_determinism():
    train_idx, val_idx = split_indices(100, 0.2, seed=5)
    assert len(train_idx) == 80 and len(val_idx) == 20
    assert set(train_idx) | set(val_idx) == set(range(100))
    assert set(train_idx) & set(val_idx) == set()
    again = split_indices(100, 0.2, seed=5)
    assert np.array_equal(train_idx, again[0]) and np.array_equal(val_idx, again[1])


# ---------------------------------------------------------------- training

def separable_data(seed=0, frames_per_class=120):
    """Inline separable clusters: one unit center per (class, view)."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(3, 3, 6))
    centers /= np.linalg.norm(centers, axis=2, keepdims=True)
    labels = np.repeat(np.arange(3), frames_per_class)
    views = []
    for v in range(3):
        x = centers[labels, v] + rng.normal(scale=0.08, size=(len(labels), 6))
        views.append(x.astype(np.float32))
    return TrainData(views, labels)


def test_train_learns_separable_data():
    data = separable_data()
    cfg = TrainConfig(max_epochs=40, batch_size=32, seed=1, base_lr=2e-3,
                      early_stop_patience=8)
    params, history = train(data, TINY3, cfg)
    assert history.val_accuracy[history.best_epoch] >= 0.95
    assert history.stop_reason in (STOP_EARLY, STOP_MAX_EPOCHS)


def test_train_deterministic():
    data = separable_data()
    cfg = TrainConfig(max_epochs=6, batch_size=32, seed=3, base_lr=1e-3)
    _, h1 = train(data, TINY3, cfg)
    _, h2 = train(data, TINY3, cfg)
    assert h1.train_loss == h2.train_loss
    assert h1.val_loss == h2.val_loss
    assert h1.val_accuracy == h2.val_accuracy
    assert h1.lr == h2.lr
    assert h1.best_epoch == h2.best_epoch


def test_best_snapshot_minimizes_val_loss():
    data = separable_data(seed=2, frames_per_class=60)
    cfg = TrainConfig(max_epochs=12, batch_size=32, seed=4, base_lr=2e-3,
                      early_stop_patience=3)
    params, history = train(data, TINY3, cfg)
    assert history.val_loss[history.best_epoch] == min(history.val_loss)
    from srlf.train import _evaluate
    train_idx, val_idx = split_indices(len(data.labels), cfg.val_fraction,
                                       np.random.SeedSequence(cfg.seed).spawn(3)[1].generate_state(1)[0])
    val_loss, _ = _evaluate(params, data.subset(val_idx), cfg.batch_size, None)
    assert val_loss == pytest.approx(min(history.val_loss), rel=1e-6)


def test_early_stopping_on_noise():
    """Unlearnable labels overfit quickly, so patience must trigger."""
    rng = np.random.default_rng(5)
    views = [rng.normal(size=(240, 6)).astype(np.float32) for _ in range(3)]
    labels = rng.integers(0, 3, size=240)
    data = TrainData(views, labels)
    cfg = TrainConfig(max_epochs=60, batch_size=32, seed=6, base_lr=5e-3,
                      early_stop_patience=2)
    _, history = train(data, TINY3, cfg)
    if history.stop_reason == STOP_EARLY:
        n = len(history.val_loss)
        assert n < 60
        assert history.best_epoch == n - 1 - cfg.early_stop_patience
        best = history.val_loss[history.best_epoch]
        assert all(v >= best for v in history.val_loss)
    else:
        assert len(history.val_loss) == 60


def test_early_stop_patience_one_stops_after_first_regression():
    rng = np.random.default_rng(11)
    views = [rng.normal(size=(240, 6)).astype(np.float32) for _ in range(3)]
    labels = rng.integers(0, 3, size=240)
    cfg = TrainConfig(max_epochs=60, batch_size=32, seed=12, base_lr=5e-3,
                      early_stop_patience=1)
    _, history = train(TrainData(views, labels), TINY3, cfg)
    if history.stop_reason == STOP_EARLY:
        # Exactly one non-improving epoch follows the best one.
        assert len(history.val_loss) == history.best_epoch + 2
        assert history.val_loss[-1] >= history.val_loss[history.best_epoch]


def test_empty_training_set_rejected():
    with pytest.raises(ValidationError):
        TrainData([np.zeros((0, 6))] * 3, np.zeros(0, dtype=int))


def test_history_csv(tmp_path):
    data = separable_data(seed=3, frames_per_class=40)
    cfg = TrainConfig(max_epochs=2, batch_size=32, seed=7, base_lr=1e-3)
    _, history = train(data, TINY3, cfg)
    path = tmp_path / "history.csv"
    history.write_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_acc,lr"
    assert len(lines) == 1 + len(history.train_loss)
