"""Glue between manifest, store, encoder and trainer.

Handles the embedding pass over real video (lazy OpenCV decode, failures
logged and summarized rather than aborting the run) and the assembly of
cached embeddings into training matrices and per-session evaluation
sequences.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .encoder import KIND_SYNTHETIC, encode_image
from .errors import EncoderError, StoreError, ValidationError
from .manifest import UNLABELED, VIEWS, DatasetManifest, SessionRecord, frames_for_session
from .store import NUM_VIEWS, EmbeddingKey, EmbeddingStore
from .synthetic import populate_synthetic_store
from .train import TrainData

log = logging.getLogger(__name__)


@dataclass
class EmbedStats:
    written: int = 0
    skipped: int = 0
    failures: list[str] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def throughput(self) -> float:
        return self.written / self.seconds if self.seconds > 0 else 0.0


def _decode_session_frames(session: SessionRecord, frame_indices, rate):
    """Yield (frame_index, view_id, pixels) by walking the three videos."""
    try:
        import cv2
    except ImportError as e:
        raise EncoderError(f"video decoding needs opencv-python: {e}") from e
    wanted = set(frame_indices)
    for view_id, view in enumerate(VIEWS):
        path = session.view_paths[view]
        cap = cv2.VideoCapture(path)
        if not cap.isOpened():
            raise EncoderError(f"cannot open video {path}")
        try:
            fps = cap.get(cv2.CAP_PROP_FPS) or rate
            native_steps = abs(fps - rate) < 1e-6
            for frame_index in sorted(wanted):
                if native_steps:
                    cap.set(cv2.CAP_PROP_POS_FRAMES, frame_index)
                else:
                    cap.set(cv2.CAP_PROP_POS_MSEC, 1000.0 * frame_index / rate)
                ok, bgr = cap.read()
                if not ok:
                    yield frame_index, view_id, None
                    continue
                yield frame_index, view_id, bgr[:, :, ::-1].copy()  # BGR -> RGB
        finally:
            cap.release()


def embed_manifest(manifest: DatasetManifest, store: EmbeddingStore, backend,
                   seed: int = 0, jobs: int = 1) -> EmbedStats:
    """Populate the store with one vector per (session, view, frame).

    Idempotent: keys already present are skipped. With the synthetic backend
    vectors derive from the frame's class label; with a pretrained backend
    frames are decoded from the session videos. Per-frame decode failures are
    collected and reported, not fatal.
    """
    started = time.monotonic()
    stats = EmbedStats()
    if backend.kind == KIND_SYNTHETIC:
        counters = populate_synthetic_store(manifest, store, backend, seed=seed)
        stats.written = counters["written"]
        stats.skipped = counters["skipped"]
        stats.seconds = time.monotonic() - started
        return stats

    def embed_session(session: SessionRecord) -> tuple[list, list[str]]:
        rows, failures = [], []
        frame_indices = [t.frame_index for t in frames_for_session(manifest, session)]
        missing = [i for i in frame_indices
                   if not all(store.contains(EmbeddingKey(session.key, v, i))
                              for v in range(NUM_VIEWS))]
        for frame_index, view_id, pixels in _decode_session_frames(
                session, missing, manifest.sample_rate_hz):
            key = EmbeddingKey(session.key, view_id, frame_index)
            if store.contains(key):
                continue
            if pixels is None:
                failures.append(f"{key.session}/{view_id}/{frame_index}: decode failed")
                continue
            try:
                rows.append((key, encode_image(backend, pixels)))
            except EncoderError as e:
                failures.append(f"{key.session}/{view_id}/{frame_index}: {e}")
        return rows, failures

    sessions = list(manifest.sessions)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(embed_session, sessions))
    else:
        results = [embed_session(s) for s in sessions]
    for rows, failures in results:
        stats.failures.extend(failures)
        for key, vec in rows:
            store.put(key, vec)
            stats.written += 1
    # Everything requested but neither written nor failed was already cached.
    store.flush()
    stats.seconds = time.monotonic() - started
    for failure in stats.failures:
        log.warning("embed failure: %s", failure)
    log.info("embedded %d vectors in %.1fs (%.1f vec/s), %d failures",
             stats.written, stats.seconds, stats.throughput, len(stats.failures))
    return stats


@dataclass
class SessionSequence:
    """Time-ordered embedded frames of one session."""

    session_key: str
    frame_indices: np.ndarray        # ascending
    views: list[np.ndarray]          # NUM_VIEWS arrays of (frames, dim)
    labels: np.ndarray               # class id or UNLABELED per frame


def load_session_sequence(manifest: DatasetManifest, store: EmbeddingStore,
                          session: SessionRecord) -> SessionSequence:
    """Join stored embeddings with manifest labels for one session.

    Only frames with all views cached are included (incomplete frames are
    excluded from training and scoring, matching the synchronized-views
    assumption).
    """
    scan = store.scan_session(session.key)
    if scan.incomplete:
        log.warning("session %s: %d frames missing a view, excluded",
                    session.key, len(scan.incomplete))
    label_by_frame = {t.frame_index: t.label
                      for t in frames_for_session(manifest, session)}
    frames, mats, labels = [], [], []
    for frame_index, mat in scan.triplets:
        if frame_index not in label_by_frame:
            raise StoreError(
                f"store holds frame {frame_index} of {session.key} beyond the "
                f"manifest's session duration")
        frames.append(frame_index)
        mats.append(mat)
        labels.append(label_by_frame[frame_index])
    if not frames:
        return SessionSequence(session.key, np.empty(0, dtype=np.int64),
                               [np.empty((0, store.embed_dim), dtype=np.float32)
                                for _ in range(NUM_VIEWS)],
                               np.empty(0, dtype=np.int64))
    stacked = np.stack(mats)  # (frames, views, dim)
    return SessionSequence(
        session_key=session.key,
        frame_indices=np.array(frames, dtype=np.int64),
        views=[stacked[:, v, :] for v in range(NUM_VIEWS)],
        labels=np.array(labels, dtype=np.int64),
    )


def gather_training_data(manifest: DatasetManifest, store: EmbeddingStore,
                         participants, label_map=None) -> TrainData:
    """Concatenate the labeled frames of the given participants.

    label_map optionally remaps class ids (used by the distraction-only
    protocol); frames whose label maps to None and UNLABELED frames are
    dropped.
    """
    participants = set(participants)
    views = [[] for _ in range(NUM_VIEWS)]
    labels = []
    for session in manifest.sessions:
        if session.participant_id not in participants:
            continue
        seq = load_session_sequence(manifest, store, session)
        keep = seq.labels != UNLABELED
        mapped = seq.labels.copy()
        if label_map is not None:
            mapped = np.array([label_map.get(int(l), -1) for l in seq.labels])
            keep &= mapped >= 0
        if not keep.any():
            continue
        for v in range(NUM_VIEWS):
            views[v].append(seq.views[v][keep])
        labels.append(mapped[keep])
    if not labels:
        raise ValidationError(
            "no labeled embedded frames found for the requested participants")
    return TrainData([np.concatenate(v).astype(np.float32) for v in views],
                     np.concatenate(labels))
