"""Signal repair and normalization applied to raw recordings before windowing."""

from __future__ import annotations

import numpy as np
from scipy import signal

from .types import DataError, RawRecording


def interpolate_missing(rec: RawRecording) -> RawRecording:
    """Fill NaN/inf gaps per channel by linear interpolation.

    Leading and trailing gaps take the nearest finite value.
    """
    x = rec.samples.copy()
    t = np.arange(x.shape[0])
    for c in range(x.shape[1]):
        col = x[:, c]
        ok = np.isfinite(col)
        if ok.all():
            continue
        if not ok.any():
            raise DataError(f"channel {c} has no finite values")
        # np.interp holds edge values outside the known range
        col[~ok] = np.interp(t[~ok], t[ok], col[ok])
    return rec.replace(x)


def normalize_minmax(rec: RawRecording, mins, maxs) -> RawRecording:
    mins = np.asarray(mins, dtype=np.float64)
    maxs = np.asarray(maxs, dtype=np.float64)
    if mins.shape != (rec.n_channels,) or maxs.shape != (rec.n_channels,):
        raise DataError(
            f"min/max tables have {mins.size}/{maxs.size} entries, recording has {rec.n_channels} channels"
        )
    bad = np.flatnonzero(maxs <= mins)
    if bad.size:
        raise DataError(f"max must exceed min; violated for channels {bad.tolist()}")
    x = (rec.samples - mins) / (maxs - mins)
    return rec.replace(np.clip(x, 0.0, 1.0))


def zscore(samples: np.ndarray) -> np.ndarray:
    """Per-channel standardization with population std."""
    mean = samples.mean(axis=0)
    std = samples.std(axis=0)
    flat = np.flatnonzero(std <= 1e-12 * np.maximum(1.0, np.abs(mean)))
    if flat.size:
        raise DataError(f"zero-variance channel(s) {flat.tolist()}")
    return (samples - mean) / std


def normalize_zscore_per_user(rec: RawRecording) -> RawRecording:
    return rec.replace(zscore(rec.samples))


def zscore_per_user(recordings: list[RawRecording]) -> list[RawRecording]:
    """Standardize using statistics pooled over all of a user's recordings."""
    by_subject: dict[int, list[int]] = {}
    for i, r in enumerate(recordings):
        by_subject.setdefault(r.subject_id, []).append(i)
    out = list(recordings)
    for idx in by_subject.values():
        stacked = np.concatenate([recordings[i].samples for i in idx])
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        flat = np.flatnonzero(std <= 1e-12 * np.maximum(1.0, np.abs(mean)))
        if flat.size:
            raise DataError(
                f"subject {recordings[idx[0]].subject_id}: zero-variance channel(s) {flat.tolist()}"
            )
        for i in idx:
            out[i] = recordings[i].replace((recordings[i].samples - mean) / std)
    return out


def bandpass_and_resample(
    rec: RawRecording,
    low_hz: float = 1.0,
    high_hz: float = 10.0,
    order: int = 4,
    out_len: int = 400,
) -> RawRecording:
    """Zero-phase Butterworth band-pass, endpoint-mean baseline removal, linear resample.

    Intended for one gesture instance at a time; the returned recording keeps
    the instance's majority label on every resampled step.
    """
    if not rec.sample_rate > 2 * high_hz:
        raise DataError(f"sample_rate {rec.sample_rate} Hz must exceed 2*high_hz = {2 * high_hz}")
    n = rec.length
    if n < 3 * order:
        raise DataError(f"recording has {n} samples; filter warm-up needs at least {3 * order}")
    sos = signal.butter(order, [low_hz, high_hz], btype="bandpass", fs=rec.sample_rate, output="sos")
    default_pad = 3 * (2 * len(sos) + 1 - min((sos[:, 2] == 0).sum(), (sos[:, 5] == 0).sum()))
    y = signal.sosfiltfilt(sos, rec.samples, axis=0, padlen=min(default_pad, n - 1))
    y = y - 0.5 * (y[0] + y[-1])

    src_t = np.linspace(0.0, 1.0, n)
    dst_t = np.linspace(0.0, 1.0, out_len)
    out = np.stack([np.interp(dst_t, src_t, y[:, c]) for c in range(y.shape[1])], axis=1)
    labels = rec.per_sample_activity
    vals, counts = np.unique(labels, return_counts=True)
    label = vals[np.argmax(counts)]
    return RawRecording(out, rec.sample_rate * out_len / n, np.full(out_len, label), rec.subject_id)
