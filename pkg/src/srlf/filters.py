"""Sliding-window mode filter for per-frame label sequences.

Frame-level classifiers flip labels far faster than a driver can actually
switch activities, so a majority vote over a window of w frames suppresses
isolated mis-predictions. The window is centered, truncated at the sequence
boundaries (no padding, so clip edges never see fabricated labels), and ties
are broken by a configurable policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError

TIE_KEEP_CENTER = "keep_center"
TIE_SMALLEST_INDEX = "smallest_index"


@dataclass(frozen=True)
class FilterConfig:
    """Mode-filter settings.

    window must be odd so the window has a center frame. The default of 141
    frames is sized for 30 Hz input; tune it to the typical duration of the
    activities at the actual prediction rate.
    """

    window: int = 141
    tie_policy: str = TIE_KEEP_CENTER

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"filter window must be odd and >= 1, got {self.window}")
        if self.tie_policy not in (TIE_KEEP_CENTER, TIE_SMALLEST_INDEX):
            raise ConfigError(f"unknown tie policy {self.tie_policy!r}")


def mode_filter(labels, cfg: FilterConfig | None = None) -> np.ndarray:
    """Replace each label with the most frequent label in its window.

    The window at position i covers [max(0, i-w//2), min(len, i+w//2+1)).
    Ties between equally frequent labels resolve per cfg.tie_policy:
    keep_center retains the input label at i when it is among the tied modes
    (falling back to the smallest tied label otherwise); smallest_index always
    picks the smallest tied label.

    Runs one incremental pass, updating per-label counts as the window slides,
    so cost is O(n + n * ties) rather than O(n * w).
    """
    if cfg is None:
        cfg = FilterConfig()
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValidationError("mode_filter requires a non-empty label sequence")
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
        if labels.ndim != 1:
            raise ValidationError("labels must be a 1-D integer sequence")
    if labels.min() < 0:
        raise ValidationError("labels must be non-negative class ids")

    half = cfg.window // 2
    alphabet = int(labels.max()) + 1
    counts = np.zeros(alphabet, dtype=np.int64)

    # Prime the window for position 0: frames [0, half].
    right = min(n, half + 1)
    for j in range(right):
        counts[labels[j]] += 1
    left = 0

    out = np.empty(n, dtype=labels.dtype)
    for i in range(n):
        best = counts.max()
        tied = np.flatnonzero(counts == best)
        if cfg.tie_policy == TIE_KEEP_CENTER and labels[i] in tied:
            out[i] = labels[i]
        else:
            out[i] = tied[0]
        # Slide: next window is [max(0, i+1-half), min(n, i+1+half+1)).
        new_left = max(0, i + 1 - half)
        new_right = min(n, i + 1 + half + 1)
        if new_left > left:
            counts[labels[left]] -= 1
            left = new_left
        if new_right > right:
            counts[labels[right]] += 1
            right = new_right
    return out


def segmentize(labels) -> list[tuple[int, int, int]]:
    """Collapse a label sequence into maximal constant runs.

    Returns (start_frame, end_frame, label) tuples with half-open frame
    ranges; concatenating the runs reconstructs the input exactly.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValidationError("segmentize requires a non-empty label sequence")
    segments = []
    start = 0
    for i in range(1, len(labels)):
        if labels[i] != labels[start]:
            segments.append((start, i, int(labels[start])))
            start = i
    segments.append((start, len(labels), int(labels[start])))
    return segments


def expand_segments(segments: list[tuple[int, int, int]]) -> np.ndarray:
    """Inverse of segmentize: rebuild the per-frame sequence from runs."""
    if not segments:
        raise ValidationError("expand_segments requires at least one segment")
    total = segments[-1][1]
    out = np.empty(total, dtype=np.int64)
    for start, end, label in segments:
        out[start:end] = label
    return out
