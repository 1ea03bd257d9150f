"""Dataset ingestion: sessions, annotations, frame triplets, fold partitions.

The source dataset is a tree of synchronized three-view recordings (dashboard,
rear, side) with interval annotations in a CSV. Ingestion validates the
layout into an immutable in-memory manifest holding references (never
pixels); frames are enumerated on demand at a fixed sampling rate.

Annotation intervals are half-open [start, end) so adjacent intervals tile a
session without double-labeling. Frames outside every interval get the
UNLABELED sentinel and are excluded from training and scoring.

Annotation CSV schema (header required, UTF-8, '.' decimal separator):
    participant_id,phase,session_id,start_sec,end_sec,class_id
Fold file schema:
    participant_id,fold_index
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError, ValidationError

UNLABELED = -1
VIEWS = ("dashboard", "rear", "side")
PHASES = ("unobstructed", "obstructed")
DEFAULT_PATH_TEMPLATE = "{root}/{participant}/{phase}/{view}.mp4"
DEFAULT_SAMPLE_RATE_HZ = 30.0

ANNOTATION_COLUMNS = ["participant_id", "phase", "session_id",
                      "start_sec", "end_sec", "class_id"]
FOLD_COLUMNS = ["participant_id", "fold_index"]


@dataclass(frozen=True)
class ActivityClass:
    id: int
    name: str


DEFAULT_CLASSES = tuple(ActivityClass(i, name) for i, name in enumerate([
    "Normal Forward Driving",
    "Drinking",
    "Phone Call (right)",
    "Phone Call (left)",
    "Eating",
    "Text (right)",
    "Text (left)",
    "Reaching behind",
    "Adjust control panel",
    "Pick up from floor (driver)",
    "Pick up from floor (passenger)",
    "Talk to passenger at the right",
    "Talk to passenger at backseat",
    "Yawning",
    "Hand on head",
    "Singing or dancing with music",
]))


@dataclass(frozen=True)
class SessionRecord:
    participant_id: str
    phase: str
    session_id: str
    view_paths: dict[str, str]
    annotations: tuple[tuple[float, float, int], ...]
    duration_sec: float

    @property
    def key(self) -> str:
        return f"{self.participant_id}/{self.phase}/{self.session_id}"

    def validate(self, num_classes: int) -> None:
        if self.phase not in PHASES:
            raise ValidationError(
                f"session {self.key}: unknown phase {self.phase!r}")
        if set(self.view_paths) != set(VIEWS):
            raise ValidationError(
                f"session {self.key}: expected views {VIEWS}, "
                f"got {sorted(self.view_paths)}")
        ordered = sorted(self.annotations, key=lambda a: a[0])
        for start, end, class_id in ordered:
            if start < 0:
                raise ValidationError(
                    f"session {self.key}: negative start time {start}")
            if end <= start:
                raise ValidationError(
                    f"session {self.key}: interval [{start}, {end}) is empty")
            if not 0 <= class_id < num_classes:
                raise ValidationError(
                    f"session {self.key}: unknown class {class_id}")
        for a, b in zip(ordered, ordered[1:]):
            if b[0] < a[1]:
                raise ValidationError(
                    f"session {self.key}: overlapping annotation intervals "
                    f"[{a[0]}, {a[1]}) class {a[2]} and [{b[0]}, {b[1]}) class {b[2]}")
        if self.duration_sec <= 0:
            raise ValidationError(f"session {self.key}: non-positive duration")


@dataclass(frozen=True)
class FrameTriplet:
    session_key: str
    frame_index: int
    timestamp: float
    view_paths: tuple[str, str, str]   # ordered dashboard, rear, side
    label: int                         # class id or UNLABELED


@dataclass(frozen=True)
class DatasetManifest:
    sessions: tuple[SessionRecord, ...]
    participants: frozenset[str]
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    classes: tuple[ActivityClass, ...] = DEFAULT_CLASSES

    def validate(self) -> None:
        if self.sample_rate_hz <= 0:
            raise ValidationError("sample_rate_hz must be positive")
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ValidationError("class ids must be contiguous from 0")
        keys = set()
        for session in self.sessions:
            if session.participant_id not in self.participants:
                raise ValidationError(
                    f"session {session.key}: participant not in manifest")
            if session.key in keys:
                raise ValidationError(f"duplicate session key {session.key}")
            keys.add(session.key)
            session.validate(len(self.classes))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def session_by_key(self, key: str) -> SessionRecord:
        for session in self.sessions:
            if session.key == key:
                return session
        raise ValidationError(f"no session {key!r} in manifest")

    def filter_phase(self, phase: str) -> "DatasetManifest":
        if phase not in PHASES:
            raise ValidationError(f"unknown phase {phase!r}")
        kept = tuple(s for s in self.sessions if s.phase == phase)
        return DatasetManifest(
            sessions=kept,
            participants=frozenset(s.participant_id for s in kept),
            sample_rate_hz=self.sample_rate_hz,
            classes=self.classes,
        )

    # ---------------------------------------------------------- cache I/O

    def to_json(self) -> str:
        return json.dumps({
            "sample_rate_hz": self.sample_rate_hz,
            "classes": [[c.id, c.name] for c in self.classes],
            "participants": sorted(self.participants),
            "sessions": [{
                "participant_id": s.participant_id,
                "phase": s.phase,
                "session_id": s.session_id,
                "view_paths": s.view_paths,
                "annotations": [list(a) for a in s.annotations],
                "duration_sec": s.duration_sec,
            } for s in self.sessions],
        }, indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        d = json.loads(text)
        manifest = DatasetManifest(
            sessions=tuple(SessionRecord(
                participant_id=s["participant_id"],
                phase=s["phase"],
                session_id=s["session_id"],
                view_paths=dict(s["view_paths"]),
                annotations=tuple((float(a), float(b), int(c))
                                  for a, b, c in s["annotations"]),
                duration_sec=float(s["duration_sec"]),
            ) for s in d["sessions"]),
            participants=frozenset(d["participants"]),
            sample_rate_hz=float(d["sample_rate_hz"]),
            classes=tuple(ActivityClass(int(i), str(n)) for i, n in d["classes"]),
        )
        manifest.validate()
        return manifest


@dataclass
class FoldSpec:
    k: int
    assignment: dict[str, int]

    def __post_init__(self):
        if self.k < 2:
            raise ValidationError("k must be >= 2")
        for participant, fold in self.assignment.items():
            if not 0 <= fold < self.k:
                raise ValidationError(
                    f"participant {participant}: fold {fold} outside [0, {self.k})")

    def members(self, fold: int) -> frozenset[str]:
        return frozenset(p for p, f in self.assignment.items() if f == fold)

    def sizes(self) -> list[int]:
        return [len(self.members(f)) for f in range(self.k)]


# -------------------------------------------------------------- operations

def _read_csv(path, expected_columns):
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"annotation file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file, expected header "
                                  f"{','.join(expected_columns)}") from None
        if [h.strip() for h in header] != expected_columns:
            raise ValidationError(
                f"{path}: expected header {','.join(expected_columns)}, "
                f"got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(expected_columns):
                raise ValidationError(f"{path}:{lineno}: expected "
                                      f"{len(expected_columns)} fields, got {len(row)}")
            rows.append((lineno, [cell.strip() for cell in row]))
    return rows


def load_manifest(root_path, annotation_path,
                  sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ,
                  path_template: str = DEFAULT_PATH_TEMPLATE,
                  classes: tuple[ActivityClass, ...] = DEFAULT_CLASSES) -> DatasetManifest:
    """Parse the annotation CSV, resolve per-view video paths from the path
    template, and return a validated manifest.

    Session duration is taken as the last annotation's end time (the sources
    carry no explicit duration column).
    """
    root = Path(root_path)
    if not root.exists():
        raise IngestionError(f"dataset root not found: {root}")
    rows = _read_csv(annotation_path, ANNOTATION_COLUMNS)

    grouped: dict[tuple[str, str, str], list] = {}
    for lineno, (participant, phase, session_id, start, end, class_id) in rows:
        try:
            record = (float(start), float(end), int(class_id))
        except ValueError as e:
            raise ValidationError(f"{annotation_path}:{lineno}: {e}") from None
        grouped.setdefault((participant, phase, session_id), []).append(record)

    sessions = []
    for (participant, phase, session_id), annotations in sorted(grouped.items()):
        view_paths = {}
        for view in VIEWS:
            path = path_template.format(root=root, participant=participant,
                                        phase=phase, session=session_id, view=view)
            if not Path(path).exists():
                raise IngestionError(
                    f"session {participant}/{phase}/{session_id}: "
                    f"missing {view} view file {path}")
            view_paths[view] = str(path)
        annotations = tuple(sorted(annotations, key=lambda a: a[0]))
        sessions.append(SessionRecord(
            participant_id=participant,
            phase=phase,
            session_id=session_id,
            view_paths=view_paths,
            annotations=annotations,
            duration_sec=max(a[1] for a in annotations),
        ))

    manifest = DatasetManifest(
        sessions=tuple(sessions),
        participants=frozenset(s.participant_id for s in sessions),
        sample_rate_hz=sample_rate_hz,
        classes=classes,
    )
    manifest.validate()
    return manifest


def frames_for_session(manifest: DatasetManifest,
                       session: SessionRecord) -> list[FrameTriplet]:
    """Enumerate labeled frame triplets at the manifest's sampling rate.

    Frames run from t=0 up to (exclusive) the session duration; each frame is
    labeled by the half-open interval containing its timestamp, or UNLABELED.
    """
    if session.key not in {s.key for s in manifest.sessions}:
        raise ValidationError(f"session {session.key} is not part of the manifest")
    rate = manifest.sample_rate_hz
    n_frames = math.ceil(session.duration_sec * rate)
    timestamps = np.arange(n_frames) / rate

    starts = np.array([a[0] for a in session.annotations])
    ends = np.array([a[1] for a in session.annotations])
    class_ids = np.array([a[2] for a in session.annotations])
    labels = np.full(n_frames, UNLABELED, dtype=np.int64)
    if len(starts):
        idx = np.searchsorted(starts, timestamps, side="right") - 1
        valid = (idx >= 0) & (timestamps < ends[np.clip(idx, 0, None)])
        labels[valid] = class_ids[idx[valid]]

    view_paths = tuple(session.view_paths[v] for v in VIEWS)
    return [FrameTriplet(session_key=session.key,
                         frame_index=i,
                         timestamp=float(timestamps[i]),
                         view_paths=view_paths,
                         label=int(labels[i]))
            for i in range(n_frames)]


def make_folds(manifest: DatasetManifest, k: int = 7,
               fold_file=None) -> FoldSpec:
    """Partition participants into k folds.

    With a fold file the assignment is taken verbatim (it must cover exactly
    the manifest's participants). Otherwise participants are sorted
    lexicographically and dealt round-robin, so auto-generated fold sizes
    differ by at most one.
    """
    if k < 2:
        raise ValidationError("k must be >= 2")
    participants = sorted(manifest.participants)
    if fold_file is not None:
        rows = _read_csv(fold_file, FOLD_COLUMNS)
        assignment: dict[str, int] = {}
        for lineno, (participant, fold) in rows:
            if participant in assignment:
                raise ValidationError(
                    f"{fold_file}:{lineno}: participant {participant} assigned twice")
            try:
                assignment[participant] = int(fold)
            except ValueError:
                raise ValidationError(
                    f"{fold_file}:{lineno}: fold_index must be an integer") from None
        missing = set(participants) - set(assignment)
        unknown = set(assignment) - set(participants)
        if missing:
            raise ValidationError(
                f"fold file missing participants: {sorted(missing)}")
        if unknown:
            raise ValidationError(
                f"fold file names unknown participants: {sorted(unknown)}")
        return FoldSpec(k=k, assignment=assignment)
    return FoldSpec(k=k, assignment={p: i % k for i, p in enumerate(participants)})


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic disjoint index split; val gets round(n * fraction)."""
    if not 0 < val_fraction < 1:
        raise ValidationError("val_fraction must lie in (0, 1)")
    if n == 0:
        raise ValidationError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    n_val = min(max(n_val, 1), n - 1) if n > 1 else 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def split_train_val(triplets, val_fraction: float, seed: int):
    """Frame-level train/validation split of labeled triplets.

    Disjoint, union-preserving, deterministic for a fixed seed. Individuals
    may appear on both sides; frames never do.
    """
    triplets = list(triplets)
    train_idx, val_idx = split_indices(len(triplets), val_fraction, seed)
    return [triplets[i] for i in train_idx], [triplets[i] for i in val_idx]
