"""Evaluation protocols: subject-wise k-fold scoring, confusion matrices,
binary collapse, distraction-only runs, and report rendering.

Protocols
  all_classes     score every labeled frame over the full class set.
  binary_class0   collapse predictions and truths to {normal driving, other}.
  exclude_class0  assume a perfect upstream normal-vs-distracted classifier
                  and score only distraction frames; either retrain a model
                  without the normal class (retrain mode) or mask its logit
                  out of the full model (mask_logits mode).

Each fold trains on the complementary folds' participants and scores its own;
the train/test participant sets are asserted disjoint on every run. Raw
per-frame predictions are optionally smoothed per session with the mode
filter before scoring.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .filters import FilterConfig, mode_filter
from .manifest import UNLABELED, DatasetManifest, FoldSpec
from .net import ModelConfig, forward
from .pipeline import gather_training_data, load_session_sequence
from .store import EmbeddingStore
from .train import TrainConfig, TrainHistory, train

log = logging.getLogger(__name__)

PROTO_ALL = "all_classes"
PROTO_BINARY = "binary_class0"
PROTO_EXCLUDE = "exclude_class0"
PROTOCOLS = (PROTO_ALL, PROTO_BINARY, PROTO_EXCLUDE)

EXCLUDE_RETRAIN = "retrain_15"
EXCLUDE_MASK = "mask_logits"
EXCLUDE_MODES = (EXCLUDE_RETRAIN, EXCLUDE_MASK)


# ------------------------------------------------------------ metrics

def confusion_from_labels(y_true, y_pred, n: int) -> np.ndarray:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValidationError("label arrays must have matching lengths")
    conf = np.zeros((n, n), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    return conf


def accuracy(confusion: np.ndarray) -> float:
    """Percent of scored frames on the diagonal."""
    confusion = np.asarray(confusion)
    total = confusion.sum()
    if total == 0:
        raise ValidationError("empty confusion matrix")
    return 100.0 * np.trace(confusion) / total


def per_class_recall(confusion: np.ndarray) -> np.ndarray:
    """Diagonal over row sums, percent; NaN for classes never seen."""
    confusion = np.asarray(confusion, dtype=np.float64)
    row = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return 100.0 * np.diag(confusion) / row


def macro_per_class_accuracy(confusion: np.ndarray) -> float:
    """Unweighted mean of per-class recalls, percent.

    Classes with no ground-truth frames are excluded from the mean (logged);
    with the 59% normal-driving imbalance this metric moves very differently
    from overall accuracy.
    """
    recalls = per_class_recall(confusion)
    missing = np.flatnonzero(np.isnan(recalls))
    if len(missing) == len(recalls):
        raise ValidationError("confusion matrix has no populated rows")
    if len(missing):
        log.info("macro accuracy: excluding empty classes %s", missing.tolist())
    return float(np.nanmean(recalls))


def collapse_binary(confusion_or_labels, class0: int = 0) -> np.ndarray:
    """Collapse an n-way confusion (or a label pair) to 2x2 over
    {class0, any other}; counts are conserved."""
    if isinstance(confusion_or_labels, np.ndarray) and confusion_or_labels.ndim == 2:
        conf = confusion_or_labels
        other = [i for i in range(conf.shape[0]) if i != class0]
        out = np.empty((2, 2), dtype=conf.dtype)
        out[0, 0] = conf[class0, class0]
        out[0, 1] = conf[class0, other].sum()
        out[1, 0] = conf[other, class0].sum()
        out[1, 1] = conf[np.ix_(other, other)].sum()
        return out
    y_true, y_pred = confusion_or_labels
    t = (np.asarray(y_true) != class0).astype(np.int64)
    p = (np.asarray(y_pred) != class0).astype(np.int64)
    return confusion_from_labels(t, p, 2)


def kfold_summary(results) -> tuple[float, float]:
    """Mean and SAMPLE standard deviation (n-1) of fold accuracies, percent.

    Accepts FoldResult objects or plain accuracy values.
    """
    values = [r.accuracy if isinstance(r, FoldResult) else float(r)
              for r in results]
    if len(values) < 2:
        raise ValidationError("k-fold summary needs at least 2 folds")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1))


# ------------------------------------------------------------ fold runs

@dataclass(frozen=True)
class EvalProtocol:
    name: str = PROTO_ALL
    filter_on: bool = True
    exclude_mode: str = EXCLUDE_RETRAIN

    def __post_init__(self):
        if self.name not in PROTOCOLS:
            raise ValidationError(f"unknown protocol {self.name!r}")
        if self.exclude_mode not in EXCLUDE_MODES:
            raise ValidationError(f"unknown exclude_class0 mode {self.exclude_mode!r}")


@dataclass
class PredictionRow:
    session: str
    frame_index: int
    true_label: int      # original class id, UNLABELED for unscored frames
    raw_pred: int        # original class-id space
    filtered_pred: int


@dataclass
class FoldResult:
    fold: int
    protocol: EvalProtocol
    class_names: list[str]               # row/column labels of the confusions
    confusion_raw: np.ndarray
    confusion_filtered: np.ndarray | None
    predictions: list[PredictionRow]
    history: TrainHistory | None = None
    train_participants: frozenset = field(default_factory=frozenset)
    test_participants: frozenset = field(default_factory=frozenset)

    @property
    def scored_confusion(self) -> np.ndarray:
        return (self.confusion_filtered
                if self.confusion_filtered is not None else self.confusion_raw)

    @property
    def accuracy(self) -> float:
        return accuracy(self.scored_confusion)

    @property
    def accuracy_raw(self) -> float:
        return accuracy(self.confusion_raw)

    @property
    def recalls(self) -> np.ndarray:
        return per_class_recall(self.scored_confusion)


def build_confusions(y_true, y_raw, y_filt, protocol: EvalProtocol, n_full: int,
                     class_names) -> tuple[list[str], np.ndarray, np.ndarray | None]:
    """Score label arrays (original class-id space) under a protocol.

    Returns the confusion row/column names and the raw plus (optionally)
    filtered confusion matrices. exclude_class0 inputs must already be free
    of class-0 frames; their matrices are indexed by original id minus one.
    """
    names = list(class_names)
    if protocol.name == PROTO_BINARY:
        conf_raw = collapse_binary((y_true, y_raw))
        conf_filt = collapse_binary((y_true, y_filt)) if y_filt is not None else None
        names = [names[0], "Any other activity"]
    elif protocol.name == PROTO_EXCLUDE:
        y_true = np.asarray(y_true)
        if (y_true == 0).any():
            raise ValidationError("exclude_class0 scoring received class-0 frames")
        conf_raw = confusion_from_labels(y_true - 1, np.asarray(y_raw) - 1, n_full - 1)
        conf_filt = (confusion_from_labels(y_true - 1, np.asarray(y_filt) - 1, n_full - 1)
                     if y_filt is not None else None)
        names = names[1:]
    else:
        conf_raw = confusion_from_labels(y_true, y_raw, n_full)
        conf_filt = (confusion_from_labels(y_true, y_filt, n_full)
                     if y_filt is not None else None)
    return names, conf_raw, conf_filt


def _predict_sequence(params, views) -> np.ndarray:
    preds = []
    n = views[0].shape[0]
    for start in range(0, n, 1024):
        sl = slice(start, min(start + 1024, n))
        logits = forward(params, [v[sl] for v in views], mode="eval")
        if logits.ndim == 1:
            logits = logits[None, :]
        preds.append(logits)
    return np.concatenate(preds)


def run_fold(manifest: DatasetManifest, store: EmbeddingStore, folds: FoldSpec,
             fold_index: int, protocol: EvalProtocol, model_config: ModelConfig,
             train_config: TrainConfig,
             filter_config: FilterConfig | None = None) -> FoldResult:
    """Train on the complementary folds, score every labeled test frame."""
    if not 0 <= fold_index < folds.k:
        raise ValidationError(f"fold {fold_index} outside [0, {folds.k})")
    test_participants = folds.members(fold_index)
    train_participants = frozenset(folds.assignment) - test_participants
    assert not (train_participants & test_participants), \
        "subject-wise split violated: participants shared between train and test"
    if not test_participants or not train_participants:
        raise ValidationError(f"fold {fold_index} leaves an empty train or test side")
    if filter_config is None:
        filter_config = FilterConfig()

    n_full = manifest.num_classes
    retrain = protocol.name == PROTO_EXCLUDE and protocol.exclude_mode == EXCLUDE_RETRAIN
    if retrain:
        label_map = {c: c - 1 for c in range(1, n_full)}
        model_config = ModelConfig(
            num_views=model_config.num_views,
            embed_dim=model_config.embed_dim,
            branch_sizes=model_config.branch_sizes,
            branch_dropout=model_config.branch_dropout,
            fusion_sizes=model_config.fusion_sizes,
            num_classes=n_full - 1,
        )
    else:
        label_map = None

    data = gather_training_data(manifest, store, train_participants, label_map)
    fold_seed = int(np.random.SeedSequence([train_config.seed, fold_index])
                    .generate_state(1)[0])
    fold_train_config = TrainConfig(
        max_epochs=train_config.max_epochs, base_lr=train_config.base_lr,
        batch_size=train_config.batch_size, val_fraction=train_config.val_fraction,
        early_stop_patience=train_config.early_stop_patience,
        permute_views=train_config.permute_views,
        class_weights=train_config.class_weights, seed=fold_seed,
        pct_start=train_config.pct_start, div_factor=train_config.div_factor,
        final_div_factor=train_config.final_div_factor)
    params, history = train(data, model_config, fold_train_config)

    exclude = protocol.name == PROTO_EXCLUDE
    rows: list[PredictionRow] = []
    true_all, raw_all, filt_all = [], [], []
    missing_sessions = []
    for session in manifest.sessions:
        if session.participant_id not in test_participants:
            continue
        seq = load_session_sequence(manifest, store, session)
        if len(seq.frame_indices) == 0:
            missing_sessions.append(session.key)
            continue
        keep = np.ones(len(seq.labels), dtype=bool)
        if exclude:
            # A perfect upstream binary classifier removes normal driving.
            keep = (seq.labels != UNLABELED) & (seq.labels != 0)
        if not keep.any():
            continue
        views = [v[keep] for v in seq.views]
        logits = _predict_sequence(params, views)
        if exclude and protocol.exclude_mode == EXCLUDE_MASK:
            raw = np.argmax(logits[:, 1:], axis=1) + 1
        elif retrain:
            raw = np.argmax(logits, axis=1) + 1   # back to original ids
        else:
            raw = np.argmax(logits, axis=1)
        filtered = mode_filter(raw, filter_config) if protocol.filter_on else raw

        labels = seq.labels[keep]
        frames = seq.frame_indices[keep]
        for i in range(len(raw)):
            rows.append(PredictionRow(session.key, int(frames[i]), int(labels[i]),
                                      int(raw[i]), int(filtered[i])))
        scored = labels != UNLABELED
        true_all.append(labels[scored])
        raw_all.append(raw[scored])
        filt_all.append(filtered[scored])

    if missing_sessions:
        raise ValidationError(
            f"fold {fold_index}: no embeddings cached for test sessions "
            f"{missing_sessions}; run `srlf embed` over the full manifest")
    if not true_all:
        raise ValidationError(f"fold {fold_index}: no labeled test frames")
    y_true = np.concatenate(true_all)
    y_raw = np.concatenate(raw_all)
    y_filt = np.concatenate(filt_all)

    names, conf_raw, conf_filt = build_confusions(
        y_true, y_raw, y_filt if protocol.filter_on else None, protocol,
        n_full, [c.name for c in manifest.classes])

    return FoldResult(fold=fold_index, protocol=protocol, class_names=names,
                      confusion_raw=conf_raw, confusion_filtered=conf_filt,
                      predictions=rows, history=history,
                      train_participants=train_participants,
                      test_participants=test_participants)


def run_protocol(manifest: DatasetManifest, store: EmbeddingStore, folds: FoldSpec,
                 protocol: EvalProtocol, model_config: ModelConfig,
                 train_config: TrainConfig, filter_config: FilterConfig | None = None,
                 fold_indices=None) -> list[FoldResult]:
    indices = list(fold_indices) if fold_indices is not None else list(range(folds.k))
    results = []
    for fold in indices:
        result = run_fold(manifest, store, folds, fold, protocol,
                          model_config, train_config, filter_config)
        log.info("fold %d: accuracy %.2f%% (raw %.2f%%)", fold,
                 result.accuracy, result.accuracy_raw)
        results.append(result)
    return results


# ------------------------------------------------------------ reports

def write_confusion_csv(confusion: np.ndarray, names, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("true\\pred," + ",".join(names) + "\n")
        for i, name in enumerate(names):
            f.write(name + "," + ",".join(str(int(c)) for c in confusion[i]) + "\n")


def plot_confusion(confusion: np.ndarray, names, path, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = confusion.shape[0]
    fig, ax = plt.subplots(figsize=(max(5, n * 0.6), max(4, n * 0.55)))
    im = ax.imshow(confusion, cmap="viridis")
    ax.set_xticks(range(n), labels=names, rotation=90, fontsize=7)
    ax.set_yticks(range(n), labels=names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    ax.set_title(title)
    if n <= 20:
        threshold = confusion.max() / 2 if confusion.max() else 0
        for i in range(n):
            for j in range(n):
                ax.text(j, i, str(int(confusion[i, j])), ha="center", va="center",
                        fontsize=6,
                        color="white" if confusion[i, j] < threshold else "black")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_predictions_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("session,frame_index,true_label,raw_pred,filtered_pred\n")
        for r in rows:
            f.write(f"{r.session},{r.frame_index},{r.true_label},"
                    f"{r.raw_pred},{r.filtered_pred}\n")


def render_reports(results: list[FoldResult], out_dir) -> None:
    """Materialize the documented output tree for one protocol run.

    out/<protocol>/fold<i>/{confusion.csv, confusion.png, predictions.csv,
    filtered_predictions.csv}, plus summary.csv and summary.txt at the root.
    confusion.* reflect the scored variant (filtered when the filter was on);
    confusion_raw.csv is added alongside for comparison.
    """
    from pathlib import Path

    if not results:
        raise ValidationError("no fold results to render")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    for r in results:
        fold_dir = out_dir / f"fold{r.fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        write_confusion_csv(r.scored_confusion, r.class_names, fold_dir / "confusion.csv")
        write_confusion_csv(r.confusion_raw, r.class_names, fold_dir / "confusion_raw.csv")
        plot_confusion(r.scored_confusion, r.class_names, fold_dir / "confusion.png",
                       f"fold {r.fold} ({r.protocol.name}), "
                       f"accuracy {r.accuracy:.2f}%")
        write_predictions_csv(r.predictions, fold_dir / "predictions.csv")
        if r.confusion_filtered is not None:
            filtered_rows = [PredictionRow(p.session, p.frame_index, p.true_label,
                                           p.filtered_pred, p.filtered_pred)
                             for p in r.predictions]
            write_predictions_csv(filtered_rows, fold_dir / "filtered_predictions.csv")

    mean, std = kfold_summary(results) if len(results) >= 2 else (results[0].accuracy, 0.0)
    best = max(results, key=lambda r: r.accuracy)
    with open(out_dir / "summary.csv", "w", encoding="utf-8") as f:
        f.write("fold,accuracy,accuracy_raw,macro_per_class,frames\n")
        for r in results:
            f.write(f"{r.fold},{r.accuracy:.4f},{r.accuracy_raw:.4f},"
                    f"{macro_per_class_accuracy(r.scored_confusion):.4f},"
                    f"{int(r.scored_confusion.sum())}\n")
        f.write(f"mean,{mean:.4f},,,\n")
        f.write(f"std,{std:.4f},,,\n")

    lines = [f"protocol: {results[0].protocol.name}",
             f"filter: {'on' if results[0].protocol.filter_on else 'off'}",
             f"folds: {len(results)}",
             f"accuracy: {mean:.2f}% +/- {std:.2f}% (sample std)",
             f"best fold: {best.fold} at {best.accuracy:.2f}%",
             ""]
    for r in results:
        marker = "  <-- best" if r.fold == best.fold else ""
        lines.append(f"  fold {r.fold}: {r.accuracy:.2f}% "
                     f"(raw {r.accuracy_raw:.2f}%){marker}")
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
