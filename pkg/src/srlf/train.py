"""Training loop: cross-entropy + Adam + 1cycle schedule + early stopping.

The model trains on cached per-frame embeddings, never on pixels. Each
optimizer step draws a fresh uniformly random view-order permutation per
sample (when enabled), which pushes the fusion head toward features that
survive a change of viewpoint. Validation runs after every epoch on a frozen
eval-mode snapshot; the returned parameters are the snapshot from the epoch
with the lowest validation loss.

Everything is deterministic for a fixed seed: batch shuffling, dropout masks,
and permutations all derive from one seeded generator, and reductions run in
a fixed order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingDivergedError, ValidationError
from .manifest import split_indices
from .net import (
    ModelConfig,
    ModelParams,
    backward,
    forward,
    init_model,
    log_softmax,
    trainable_arrays,
)

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

STOP_EARLY = "early_stop"
STOP_MAX_EPOCHS = "max_epochs"


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    base_lr: float = 1e-4
    batch_size: int = 256
    val_fraction: float = 0.2
    early_stop_patience: int = 10
    permute_views: bool = True
    class_weights: tuple[float, ...] | None = None
    seed: int = 0
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0 < self.pct_start < 1:
            raise ConfigError("pct_start must lie in (0, 1)")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch-norm statistics)")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,train_loss,val_loss,val_acc,lr\n")
            for i in range(len(self.train_loss)):
                f.write(f"{i},{self.train_loss[i]:.6f},{self.val_loss[i]:.6f},"
                        f"{self.val_accuracy[i]:.6f},{self.lr[i]:.8e}\n")


def permute_views(view_vectors, rng: np.random.Generator):
    """Return the view vectors in a uniformly random order.

    The multiset of vectors is preserved; only the order (and hence which
    branch consumes which view) changes.
    """
    n = len(view_vectors)
    order = rng.permutation(n)
    return [view_vectors[i] for i in order]


def compute_loss(logits, label: int, class_weights=None) -> float:
    """Cross-entropy of one prediction: -log softmax(logits)[label], scaled
    by class_weights[label] when weights are supplied."""
    logits = np.asarray(logits)
    n = logits.shape[-1]
    if not 0 <= label < n:
        raise ValidationError(f"label {label} outside [0, {n})")
    logp = log_softmax(logits.astype(np.float64))
    loss = -float(logp[label])
    if class_weights is not None:
        weights = np.asarray(class_weights, dtype=np.float64)
        if weights.shape != (n,):
            raise ValidationError(f"class_weights must have length {n}")
        loss *= float(weights[label])
    return loss


def batch_loss_and_dlogits(logits: np.ndarray, labels: np.ndarray,
                           class_weights=None) -> tuple[float, np.ndarray]:
    """Mean of weight-scaled per-sample cross-entropies over a batch, and its
    gradient w.r.t. the logits.

    The reduction is a plain mean of the scaled losses (not normalized by the
    weight sum), so a zero-weight class contributes exactly zero loss and
    zero gradient.
    """
    n = len(labels)
    logp = log_softmax(logits)
    per_sample = -logp[np.arange(n), labels]
    probs = np.exp(logp)
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=logits.dtype)[labels]
        per_sample = per_sample * w
        dlogits = dlogits * w[:, None]
    loss = float(per_sample.mean())
    return loss, dlogits / n


def one_cycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Learning rate at a given optimizer step under the 1cycle policy.

    Cosine warmup from base_lr/div_factor up to base_lr across the first
    pct_start fraction of steps, then cosine annealing down to
    base_lr/final_div_factor at the final step.
    """
    if not 0 <= step < total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps})")
    low = cfg.base_lr / cfg.div_factor
    final = cfg.base_lr / cfg.final_div_factor
    if total_steps == 1:
        return cfg.base_lr
    peak_step = int(round(cfg.pct_start * total_steps))
    peak_step = min(max(peak_step, 1), total_steps - 1)
    if step <= peak_step:
        t = step / peak_step
        return low + (cfg.base_lr - low) * (1 - math.cos(math.pi * t)) / 2
    t = (step - peak_step) / (total_steps - 1 - peak_step)
    return final + (cfg.base_lr - final) * (1 + math.cos(math.pi * t)) / 2


class AdamState:
    """First/second moment accumulators parallel to the trainable arrays."""

    def __init__(self, params: ModelParams):
        arrays = trainable_arrays(params)
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, params: ModelParams, grads, lr: float) -> None:
        self.t += 1
        bc1 = 1 - ADAM_BETA1 ** self.t
        bc2 = 1 - ADAM_BETA2 ** self.t
        for a, g, m, v in zip(trainable_arrays(params), grads, self.m, self.v):
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            a -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


@dataclass
class TrainData:
    """In-memory training tensors: one (frames, embed_dim) matrix per view."""

    views: list[np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ValidationError("training set is empty")
        if any(v.shape[0] != len(self.labels) for v in self.views):
            raise ValidationError("view matrices and labels disagree on length")

    def subset(self, idx) -> "TrainData":
        return TrainData([v[idx] for v in self.views], self.labels[idx])


def _evaluate(params: ModelParams, data: TrainData, batch_size: int,
              class_weights) -> tuple[float, float]:
    total_loss = 0.0
    correct = 0
    n = len(data.labels)
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        logits = forward(params, [v[sl] for v in data.views], mode="eval")
        if logits.ndim == 1:
            logits = logits[None, :]
        loss, _ = batch_loss_and_dlogits(logits.astype(np.float64),
                                         data.labels[sl], class_weights)
        total_loss += loss * (sl.stop - sl.start)
        correct += int((np.argmax(logits, axis=1) == data.labels[sl]).sum())
    return total_loss / n, correct / n


def train(data: TrainData, model_config: ModelConfig,
          cfg: TrainConfig) -> tuple[ModelParams, TrainHistory]:
    """Train SRLF-Net on labeled frame embeddings.

    Returns the parameter snapshot from the best-validation-loss epoch along
    with the full per-epoch history.
    """
    num_classes = model_config.num_classes
    if data.labels.min() < 0 or data.labels.max() >= num_classes:
        raise ValidationError("labels outside the configured class range")

    root = np.random.SeedSequence(cfg.seed)
    init_seed, split_seed, loop_seed = root.spawn(3)
    params = init_model(model_config, seed=init_seed.generate_state(1)[0])
    rng = np.random.default_rng(loop_seed)

    train_idx, val_idx = split_indices(len(data.labels), cfg.val_fraction,
                                       split_seed.generate_state(1)[0])
    if len(val_idx) == 0:
        raise ValidationError("too few frames to hold out a validation split")
    train_set, val_set = data.subset(train_idx), data.subset(val_idx)
    log.info("training on %d frames, validating on %d", len(train_idx), len(val_idx))

    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    adam = AdamState(params)
    history = TrainHistory()
    weights = cfg.class_weights
    best_loss = math.inf
    best_params = params.copy()
    epochs_since_best = 0
    step = 0

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_set.labels))
        epoch_loss = 0.0
        seen = 0
        lr = cfg.base_lr
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            if len(batch_idx) < 2:
                # A trailing singleton cannot feed batch statistics; the
                # shuffled order makes its loss contribution unbiased anyway.
                step += 1
                continue
            batch_views = [v[batch_idx] for v in train_set.views]
            if cfg.permute_views:
                permuted = [np.empty_like(bv) for bv in batch_views]
                for row in range(len(batch_idx)):
                    sample = permute_views([bv[row] for bv in batch_views], rng)
                    for view_pos in range(len(permuted)):
                        permuted[view_pos][row] = sample[view_pos]
                batch_views = permuted
            labels = train_set.labels[batch_idx]

            cache = {}
            logits = forward(params, batch_views, mode="train", rng=rng, cache=cache)
            loss, dlogits = batch_loss_and_dlogits(logits, labels, weights)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}",
                    epoch=epoch, batch_index=start // cfg.batch_size,
                    lr_trace=history.lr + [lr])
            grads = backward(params, cache, dlogits.astype(params.dtype))
            lr = one_cycle_lr(step, total_steps, cfg)
            adam.step(params, grads, lr)
            step += 1
            epoch_loss += loss * len(batch_idx)
            seen += len(batch_idx)

        val_loss, val_acc = _evaluate(params, val_set, cfg.batch_size, weights)
        history.train_loss.append(epoch_loss / max(seen, 1))
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        history.lr.append(lr)

        if val_loss < best_loss:
            best_loss = val_loss
            best_params = params.copy()
            history.best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        log.debug("epoch %d: train %.4f val %.4f acc %.4f", epoch,
                  history.train_loss[-1], val_loss, val_acc)
        if epochs_since_best >= cfg.early_stop_patience:
            history.stop_reason = STOP_EARLY
            break
    else:
        history.stop_reason = STOP_MAX_EPOCHS

    return best_params, history
