"""Desk-scale multi-subject datasets with a tunable subject shift."""

from __future__ import annotations

import numpy as np

from .types import WindowedDataset


def synth_subjects(
    n_subjects: int,
    n_activities: int,
    n_channels: int,
    window: int,
    windows_per_subject_per_class: int,
    seed: int,
    subject_shift: float = 1.0,
    noise: float = 0.1,
) -> WindowedDataset:
    """Generate a balanced windowed dataset.

    Every activity owns a multi-harmonic base signal per channel. Each
    subject then mixes channels with its own matrix, rescales the amplitude,
    offsets the phase, and adds noise. All subject-specific deviations are
    multiplied by ``subject_shift``, so ``subject_shift=0`` gives every
    subject the same class-conditional distribution.
    """
    if min(n_subjects, n_activities, n_channels, window, windows_per_subject_per_class) < 1:
        raise ValueError("all counts must be >= 1")
    rng = np.random.default_rng(seed)
    n_harm = 3
    t = np.arange(window) / window

    # activity prototypes: frequencies in cycles per window, amplitudes, phases
    freqs = rng.uniform(0.5, 4.0, size=(n_activities, n_channels, n_harm))
    amps = rng.uniform(0.3, 1.0, size=(n_activities, n_channels, n_harm))
    phases = rng.uniform(0, 2 * np.pi, size=(n_activities, n_channels, n_harm))
    offsets = rng.normal(0, 0.3, size=(n_activities, n_channels))

    # subject distortions, drawn unconditionally so the stream is shift-independent
    mix_dev = rng.normal(0, 0.5, size=(n_subjects, n_channels, n_channels))
    scale_dev = rng.normal(0, 0.3, size=n_subjects)
    phase_dev = rng.uniform(-np.pi, np.pi, size=n_subjects)
    bias_dev = rng.normal(0, 0.5, size=(n_subjects, n_channels))

    X, Y, S = [], [], []
    k = windows_per_subject_per_class
    for s in range(n_subjects):
        mix = np.eye(n_channels) + subject_shift * mix_dev[s]
        scale = 1.0 + subject_shift * scale_dev[s]
        dphi = subject_shift * phase_dev[s]
        bias = subject_shift * bias_dev[s]
        for a in range(n_activities):
            # random start phase per window so windows are not copies
            start = rng.uniform(0, 2 * np.pi, size=(k, 1, 1, 1))
            arg = (2 * np.pi * freqs[a][None, :, :, None] * t[None, None, None, :]
                   + phases[a][None, :, :, None] + start + dphi)
            base = (amps[a][None, :, :, None] * np.sin(arg)).sum(axis=2) + offsets[a][None, :, None]
            sig = scale * np.einsum("ij,njt->nit", mix, base) + bias[None, :, None]
            sig = sig + noise * rng.standard_normal(sig.shape)
            X.append(sig)
            Y.append(np.full(k, a))
            S.append(np.full(k, s))
    return WindowedDataset(
        np.concatenate(X).astype(np.float32),
        np.concatenate(Y),
        np.concatenate(S),
        n_activities,
        list(range(n_subjects)),
    )
