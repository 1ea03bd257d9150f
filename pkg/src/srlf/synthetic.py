"""Desk-scale synthetic dataset: a manifest plus matching embeddings.

Real recordings are access-restricted and enormous; CI and the acceptance
suite instead run the identical pipeline over generated data. Each
participant performs every class exactly once in a shuffled order, the total
frame count per class is fixed, and embeddings come from the synthetic
encoder backend, so the labels are recoverable by construction.

Interval boundaries are placed on exact frame-count multiples of the sample
period, which keeps frame labeling exact under the half-open convention.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .encoder import SyntheticBackend
from .errors import ValidationError
from .manifest import (
    DEFAULT_CLASSES,
    DEFAULT_SAMPLE_RATE_HZ,
    UNLABELED,
    VIEWS,
    ActivityClass,
    DatasetManifest,
    SessionRecord,
    frames_for_session,
)
from .store import NUM_VIEWS, EmbeddingKey, EmbeddingStore


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 16
    frames_per_class: int = 200
    participants: int = 10
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    seed: int = 0

    def __post_init__(self):
        if self.participants < 1 or self.num_classes < 2:
            raise ValidationError("need at least 1 participant and 2 classes")
        if self.frames_per_class < self.participants:
            raise ValidationError(
                "frames_per_class must be >= participants so every "
                "participant performs every class")


def synthetic_classes(n: int) -> tuple[ActivityClass, ...]:
    if n <= len(DEFAULT_CLASSES):
        return DEFAULT_CLASSES[:n]
    extra = tuple(ActivityClass(i, f"Synthetic activity {i}")
                  for i in range(len(DEFAULT_CLASSES), n))
    return DEFAULT_CLASSES + extra


def build_synthetic_manifest(spec: SyntheticSpec) -> DatasetManifest:
    """One session per participant; every class appears once per session.

    The spec.frames_per_class frames of each class are dealt near-evenly
    across participants (sizes differ by at most one).
    """
    import numpy as np

    rate = spec.sample_rate_hz
    base = spec.frames_per_class // spec.participants
    remainder = spec.frames_per_class % spec.participants

    sessions = []
    for p in range(spec.participants):
        participant = f"sp{p:03d}"
        rng = np.random.default_rng([spec.seed, p])
        class_order = rng.permutation(spec.num_classes)
        annotations = []
        frame_cursor = 0
        for class_id in class_order:
            n_frames = base + (1 if p < remainder else 0)
            start = frame_cursor / rate
            end = (frame_cursor + n_frames) / rate
            annotations.append((start, end, int(class_id)))
            frame_cursor += n_frames
        sessions.append(SessionRecord(
            participant_id=participant,
            phase="unobstructed",
            session_id="s1",
            view_paths={v: f"synthetic://{participant}/{v}" for v in VIEWS},
            annotations=tuple(annotations),
            duration_sec=frame_cursor / rate,
        ))

    manifest = DatasetManifest(
        sessions=tuple(sessions),
        participants=frozenset(s.participant_id for s in sessions),
        sample_rate_hz=rate,
        classes=synthetic_classes(spec.num_classes),
    )
    manifest.validate()
    return manifest


def frame_noise_seed(seed: int, session_key: str, frame_index: int, view_id: int) -> int:
    """Stable per-(frame, view) noise seed, independent of iteration order."""
    digest = hashlib.blake2b(
        f"{seed}/{session_key}/{frame_index}/{view_id}".encode(),
        digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def populate_synthetic_store(manifest: DatasetManifest, store: EmbeddingStore,
                             backend: SyntheticBackend, seed: int = 0) -> dict:
    """Write one embedding per (frame, view); already-present keys are
    skipped so reruns are idempotent. Returns counters."""
    if backend.num_classes < manifest.num_classes:
        raise ValidationError(
            f"backend knows {backend.num_classes} classes, manifest has "
            f"{manifest.num_classes}")
    if backend.num_views != NUM_VIEWS:
        raise ValidationError(f"backend must provide {NUM_VIEWS} views")
    written = skipped = unlabeled = 0
    for session in manifest.sessions:
        for triplet in frames_for_session(manifest, session):
            if triplet.label == UNLABELED:
                unlabeled += 1
                continue
            for view_id in range(NUM_VIEWS):
                key = EmbeddingKey(session.key, view_id, triplet.frame_index)
                if store.contains(key):
                    skipped += 1
                    continue
                vec = backend.encode(
                    triplet.label, view_id,
                    frame_noise_seed(seed, session.key, triplet.frame_index, view_id))
                store.put(key, vec)
                written += 1
    store.flush()
    return {"written": written, "skipped": skipped, "unlabeled_frames": unlabeled}
