"""Sliding-window segmentation."""

from __future__ import annotations

import logging

import numpy as np

from .types import DatasetRecipe, RawRecording, WindowedDataset

logger = logging.getLogger(__name__)


def window_count(length: int, window: int, step: int) -> int:
    if length < window:
        return 0
    return (length - window) // step + 1


def majority_label(labels: np.ndarray) -> int:
    """Most frequent label; ties go to the tied label seen last in the window."""
    vals, counts = np.unique(labels, return_counts=True)
    tied = vals[counts == counts.max()]
    if len(tied) == 1:
        return int(tied[0])
    last_seen = {int(v): i for i, v in enumerate(labels.tolist()) if v in set(tied.tolist())}
    return max(last_seen, key=last_seen.get)


def slide_windows(rec: RawRecording, recipe: DatasetRecipe, n_a: int | None = None) -> WindowedDataset:
    """Cut ``rec`` into ``[n, channels, window]`` windows.

    Window ``i`` covers samples ``[i*step, i*step + window)``. Windows whose
    majority label is negative (the loaders' marker for excluded activities)
    are dropped. ``recipe.activity_filter`` refers to raw dataset codes and is
    applied by the loaders, not here.
    """
    w, step = recipe.window_size, recipe.step
    x = rec.samples
    if recipe.channel_selection:
        x = x[:, recipe.channel_selection]
    count = window_count(rec.length, w, step)
    if n_a is None:
        n_a = int(recipe.options.get("n_a", max(int(rec.per_sample_activity.max()) + 1, 1)))
    if count == 0:
        logger.warning(
            "subject %s: recording of %d samples is shorter than one window (%d); no windows",
            rec.subject_id, rec.length, w,
        )
        return WindowedDataset(np.zeros((0, x.shape[1], w)), np.zeros(0), np.zeros(0), n_a, [rec.subject_id])

    starts = np.arange(count) * step
    idx = starts[:, None] + np.arange(w)[None, :]
    X = x[idx].transpose(0, 2, 1)
    Y = np.array([majority_label(rec.per_sample_activity[s:s + w]) for s in starts], dtype=np.int64)
    keep = Y >= 0
    S = np.full(int(keep.sum()), rec.subject_id)
    return WindowedDataset(X[keep], Y[keep], S, n_a, [rec.subject_id])
