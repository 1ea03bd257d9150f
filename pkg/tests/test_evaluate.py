"""Evaluator metrics and a desk-scale subject-wise fold run."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srlf.encoder import SyntheticBackend
from srlf.errors import ValidationError
from srlf.evaluate import (
    EXCLUDE_MASK,
    EXCLUDE_RETRAIN,
    PROTO_ALL,
    PROTO_BINARY,
    PROTO_EXCLUDE,
    EvalProtocol,
    accuracy,
    collapse_binary,
    confusion_from_labels,
    kfold_summary,
    macro_per_class_accuracy,
    render_reports,
    run_fold,
    run_protocol,
)
from srlf.filters import FilterConfig
from srlf.manifest import make_folds
from srlf.net import ModelConfig
from srlf.store import EmbeddingStore
from srlf.synthetic import SyntheticSpec, build_synthetic_manifest, populate_synthetic_store
from srlf.train import TrainConfig

# Published 7-fold accuracies used as the arithmetic fixture for kfold_summary.
TABLE_FOLDS = [68.09, 74.40, 73.60, 71.37, 70.15, 75.34, 68.53]


# ------------------------------------------------------------- metrics

def test_accuracy_diagonal():
    assert accuracy(np.diag([5, 3, 9])) == 100.0


def test_accuracy_uniform_16():
    assert accuracy(np.ones((16, 16), dtype=np.int64)) == 6.25


def test_accuracy_2x2():
    assert accuracy(np.array([[3, 1], [1, 3]])) == 75.0


def test_accuracy_uniform_any_n():
    for n in (1, 2, 5, 11, 16):
        assert accuracy(np.ones((n, n))) == pytest.approx(100.0 / n)


def test_accuracy_empty_rejected():
    with pytest.raises(ValidationError):
        accuracy(np.zeros((3, 3)))


def test_macro_diagonal():
    assert macro_per_class_accuracy(np.diag([1, 2, 3])) == 100.0


def test_macro_mean_of_recalls():
    assert macro_per_class_accuracy(np.array([[8, 2], [5, 5]])) == pytest.approx(65.0)


def test_macro_skips_empty_rows():
    conf = np.array([[9, 1, 0], [0, 0, 0], [2, 0, 2]])
    assert macro_per_class_accuracy(conf) == pytest.approx((90.0 + 50.0) / 2)
    with pytest.raises(ValidationError):
        macro_per_class_accuracy(np.zeros((2, 2)))


def test_macro_differs_from_overall_under_imbalance():
    # Majority class dominates overall accuracy but not the macro mean.
    conf = np.array([[990, 10], [40, 10]])
    overall = accuracy(conf)
    macro = macro_per_class_accuracy(conf)
    assert overall == pytest.approx(95.238, abs=0.01)
    assert macro == pytest.approx((99.0 + 20.0) / 2)
    assert macro < overall


def test_collapse_diagonal_stays_diagonal():
    conf = np.diag(np.arange(1, 17))
    out = collapse_binary(conf)
    assert out[0, 1] == 0 and out[1, 0] == 0
    assert out[0, 0] == 1 and out[1, 1] == conf.trace() - 1


def test_collapse_other_block_counts_as_correct():
    out = collapse_binary((np.array([3]), np.array([5])))
    assert out[1, 1] == 1
    assert out.sum() == 1


def test_collapse_conserves_counts():
    rng = np.random.default_rng(0)
    conf = rng.integers(0, 50, size=(16, 16))
    assert collapse_binary(conf).sum() == conf.sum()


def test_collapse_accuracy_never_drops_when_errors_stay_in_other_block():
    rng = np.random.default_rng(1)
    conf = np.zeros((16, 16), dtype=np.int64)
    conf[0, 0] = 100
    for _ in range(200):  # off-diagonal mass confined to classes 1..15
        i, j = rng.integers(1, 16, size=2)
        conf[i, j] += 1
    assert accuracy(collapse_binary(conf)) >= accuracy(conf)


def test_kfold_summary_matches_published_values():
    mean, std = kfold_summary(TABLE_FOLDS)
    assert mean == pytest.approx(71.64, abs=0.01)
    assert std == pytest.approx(2.88, abs=0.01)


def test_kfold_summary_identical_folds():
    mean, std = kfold_summary([70.0, 70.0, 70.0])
    assert mean == 70.0 and std == 0.0


def test_kfold_summary_two_folds_closed_form():
    a, b = 60.0, 70.0
    mean, std = kfold_summary([a, b])
    assert mean == pytest.approx((a + b) / 2)
    assert std == pytest.approx(abs(a - b) / np.sqrt(2))


def test_kfold_summary_needs_two():
    with pytest.raises(ValidationError):
        kfold_summary([50.0])


def test_confusion_from_labels():
    conf = confusion_from_labels([0, 1, 1, 2], [0, 1, 2, 2], 3)
    assert conf.sum() == 4
    assert conf[1, 2] == 1
    assert np.trace(conf) == 3


@given(seed=st.integers(min_value=0, max_value=10_000),
       n=st.integers(min_value=2, max_value=16))
@settings(max_examples=60, deadline=None)
def test_metric_properties_random_confusions(seed, n):
    conf = np.random.default_rng(seed).integers(0, 40, size=(n, n))
    conf[0, 0] += 1  # guarantee a populated matrix
    assert 0.0 <= accuracy(conf) <= 100.0
    collapsed = collapse_binary(conf)
    assert collapsed.sum() == conf.sum()
    assert collapsed[0].sum() == conf[0].sum()          # class-0 truths conserved
    assert collapsed[1].sum() == conf[1:].sum()         # other truths conserved
    assert 0.0 <= macro_per_class_accuracy(conf) <= 100.0


# ------------------------------------------------------------- fold runs

MODEL = ModelConfig(num_views=3, embed_dim=32, branch_sizes=(16, 8),
                    branch_dropout=(0.3, 0.3), fusion_sizes=(24, 16, 8),
                    num_classes=4)
TRAIN = TrainConfig(max_epochs=30, base_lr=5e-3, batch_size=32,
                    early_stop_patience=8, seed=0)
FILTER = FilterConfig(window=5)


@pytest.fixture(scope="module")
def synthetic_setup(tmp_path_factory):
    spec = SyntheticSpec(num_classes=4, frames_per_class=80, participants=4, seed=1)
    manifest = build_synthetic_manifest(spec)
    backend = SyntheticBackend(embed_dim=32, num_classes=4, num_views=3,
                               sigma=0.1, center_seed=3)
    store = EmbeddingStore.create(tmp_path_factory.mktemp("emb") / "store", 32)
    populate_synthetic_store(manifest, store, backend, seed=2)
    folds = make_folds(manifest, k=2)
    return manifest, store, folds


def test_run_fold_all_classes(synthetic_setup):
    manifest, store, folds = synthetic_setup
    result = run_fold(manifest, store, folds, 0, EvalProtocol(PROTO_ALL, True),
                      MODEL, TRAIN, FILTER)
    assert not (result.train_participants & result.test_participants)
    assert result.confusion_raw.shape == (4, 4)
    assert result.confusion_filtered is not None
    assert result.accuracy >= 90.0
    # Confusion total equals the number of labeled test frames.
    labeled = sum(1 for r in result.predictions if r.true_label >= 0)
    assert result.scored_confusion.sum() == labeled


def test_run_fold_exclude_class0(synthetic_setup):
    manifest, store, folds = synthetic_setup
    result = run_fold(manifest, store, folds, 0,
                      EvalProtocol(PROTO_EXCLUDE, True, EXCLUDE_RETRAIN),
                      MODEL, TRAIN, FILTER)
    assert result.confusion_raw.shape == (3, 3)  # class 0 removed
    assert all(r.true_label != 0 for r in result.predictions)
    assert result.class_names[0] != "Normal Forward Driving"


def test_run_fold_exclude_mask_logits(synthetic_setup):
    manifest, store, folds = synthetic_setup
    result = run_fold(manifest, store, folds, 1,
                      EvalProtocol(PROTO_EXCLUDE, False, EXCLUDE_MASK),
                      MODEL, TRAIN, FILTER)
    assert result.confusion_raw.shape == (3, 3)
    assert result.confusion_filtered is None
    assert all(r.raw_pred >= 1 for r in result.predictions)


def test_run_fold_binary(synthetic_setup):
    manifest, store, folds = synthetic_setup
    result = run_fold(manifest, store, folds, 0, EvalProtocol(PROTO_BINARY, True),
                      MODEL, TRAIN, FILTER)
    assert result.scored_confusion.shape == (2, 2)
    assert len(result.class_names) == 2


def test_run_fold_exclude_reduces_total_by_class0(synthetic_setup):
    manifest, store, folds = synthetic_setup
    full = run_fold(manifest, store, folds, 0, EvalProtocol(PROTO_ALL, False),
                    MODEL, TRAIN, FILTER)
    excl = run_fold(manifest, store, folds, 0,
                    EvalProtocol(PROTO_EXCLUDE, False, EXCLUDE_MASK),
                    MODEL, TRAIN, FILTER)
    class0_frames = full.confusion_raw[0].sum()
    assert excl.confusion_raw.sum() == full.confusion_raw.sum() - class0_frames


def test_run_fold_deterministic(synthetic_setup):
    manifest, store, folds = synthetic_setup
    a = run_fold(manifest, store, folds, 0, EvalProtocol(PROTO_ALL, True),
                 MODEL, TRAIN, FILTER)
    b = run_fold(manifest, store, folds, 0, EvalProtocol(PROTO_ALL, True),
                 MODEL, TRAIN, FILTER)
    assert np.array_equal(a.confusion_raw, b.confusion_raw)
    assert np.array_equal(a.confusion_filtered, b.confusion_filtered)


def test_render_reports(tmp_path, synthetic_setup):
    manifest, store, folds = synthetic_setup
    results = run_protocol(manifest, store, folds, EvalProtocol(PROTO_ALL, True),
                           MODEL, TRAIN, FILTER)
    out = tmp_path / "out" / "all_classes"
    render_reports(results, out)
    for fold in range(2):
        fold_dir = out / f"fold{fold}"
        for name in ("confusion.csv", "confusion.png", "predictions.csv",
                     "filtered_predictions.csv"):
            assert (fold_dir / name).exists(), name
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0] == "fold,accuracy,accuracy_raw,macro_per_class,frames"
    assert len(summary) == 1 + 2 + 2  # folds + mean + std
    assert (out / "summary.txt").exists()

    # Tabular outputs are byte-stable across reruns.
    before = (out / "fold0" / "predictions.csv").read_bytes()
    render_reports(results, out)
    assert (out / "fold0" / "predictions.csv").read_bytes() == before

    header = (out / "fold0" / "predictions.csv").read_text().splitlines()[0]
    assert header == "session,frame_index,true_label,raw_pred,filtered_pred"


def test_run_fold_missing_embeddings_lists_sessions(tmp_path):
    from srlf.manifest import DatasetManifest

    spec = SyntheticSpec(num_classes=4, frames_per_class=40, participants=4, seed=9)
    manifest = build_synthetic_manifest(spec)
    backend = SyntheticBackend(embed_dim=32, num_classes=4, num_views=3, sigma=0.1)
    store = EmbeddingStore.create(tmp_path / "store", 32)
    # Embed only the training side; the fold-0 test sessions stay uncached.
    folds = make_folds(manifest, k=2)
    test_participants = folds.members(0)
    kept = tuple(s for s in manifest.sessions
                 if s.participant_id not in test_participants)
    populate_synthetic_store(
        DatasetManifest(sessions=kept,
                        participants=frozenset(s.participant_id for s in kept),
                        sample_rate_hz=manifest.sample_rate_hz,
                        classes=manifest.classes),
        store, backend, seed=0)
    with pytest.raises(ValidationError, match="no embeddings cached"):
        run_fold(manifest, store, folds, 0, EvalProtocol(PROTO_ALL, False),
                 MODEL, TRAIN, FILTER)


def test_protocol_validation():
    with pytest.raises(ValidationError):
        EvalProtocol("bogus")
    with pytest.raises(ValidationError):
        EvalProtocol(PROTO_EXCLUDE, True, "bogus")
