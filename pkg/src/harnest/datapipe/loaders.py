"""Readers for the four public HAR datasets plus the synthetic recipe.

Each loader reads the published whitespace-separated text files, repairs
missing values, normalizes, and windows every recording. Output rows are
ordered by subject id, then by time, independent of ``jobs``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .preprocess import (
    bandpass_and_resample,
    interpolate_missing,
    normalize_minmax,
    zscore_per_user,
)
from .synth import synth_subjects
from .types import DataError, DatasetRecipe, RawRecording, WindowedDataset
from .windows import slide_windows

logger = logging.getLogger(__name__)

# --- Opportunity -----------------------------------------------------------
OPP_N_COLUMNS = 250
# 12 accelerometers, 5 IMUs without quaternions, both shoes: 36 + 45 + 32
OPP_BODY_COLUMNS = (
    list(range(1, 46)) + list(range(50, 59)) + list(range(63, 72))
    + list(range(76, 85)) + list(range(89, 98)) + list(range(102, 134))
)
OPP_LABEL_COLUMNS = {"locomotion": 243, "gestures": 249}
OPP_LOCOMOTION = {0: "Null", 1: "Stand", 2: "Walk", 4: "Sit", 5: "Lie"}
OPP_GESTURES = {
    0: "Null",
    406516: "Open Door 1", 406517: "Open Door 2", 404516: "Close Door 1", 404517: "Close Door 2",
    406520: "Open Fridge", 404520: "Close Fridge", 406505: "Open Dishwasher",
    404505: "Close Dishwasher", 406519: "Open Drawer 1", 404519: "Close Drawer 1",
    406511: "Open Drawer 2", 404511: "Close Drawer 2", 406508: "Open Drawer 3",
    404508: "Close Drawer 3", 408512: "Clean Table", 407521: "Drink from Cup",
    405506: "Toggle Switch",
}

# --- PAMAP2 ----------------------------------------------------------------
PAMAP2_N_COLUMNS = 54
# per IMU: acc16 (3), acc6 (3), gyro (3), magnetometer (3); temperature and orientation dropped
PAMAP2_CHANNELS = [c for base in (3, 20, 37) for c in range(base + 1, base + 13)]
PAMAP2_PROTOCOL = [1, 2, 3, 4, 5, 6, 7, 12, 13, 16, 17, 24]
PAMAP2_SUBJECTS = list(range(101, 109))  # subject109 performed a single activity

# --- MHEALTH ---------------------------------------------------------------
MHEALTH_N_COLUMNS = 24
MHEALTH_CHANNELS = list(range(23))
MHEALTH_ACTIVITIES = list(range(1, 13))

MOCAPACI_CHANNELS = 4
_MOCAPACI_NAME = re.compile(r"[Ss](?:ubject)?(\d+)[_-][Gg](?:esture)?(\d+)[_-][Rr](?:ep)?(\d+)")

SAMPLE_RATES = {"opportunity": 30.0, "pamap2": 100.0, "mhealth": 50.0, "mocapaci": 100.0}


def default_recipe(name: str, **overrides) -> DatasetRecipe:
    """Preprocessing settings used for each dataset."""
    base = {
        "opportunity": dict(window_size=64, step=16, channel_selection=list(OPP_BODY_COLUMNS),
                            normalization="minmax_fixed",
                            options={"track": "locomotion", "keep_null": True}),
        "pamap2": dict(window_size=200, step=50, channel_selection=list(PAMAP2_CHANNELS),
                       normalization="zscore_per_user", activity_filter=list(PAMAP2_PROTOCOL),
                       subject_filter=list(PAMAP2_SUBJECTS)),
        "mhealth": dict(window_size=200, step=50, channel_selection=list(MHEALTH_CHANNELS),
                        normalization="none", activity_filter=list(MHEALTH_ACTIVITIES)),
        "mocapaci": dict(window_size=400, step=400, channel_selection=list(range(MOCAPACI_CHANNELS)),
                         normalization="gesture_endpoint", options={"require_balanced": True}),
        "synthetic": dict(window_size=64, step=64, normalization="none",
                          options={"n_subjects": 6, "n_activities": 4, "n_channels": 3,
                                   "windows_per_subject_per_class": 20, "seed": 0,
                                   "subject_shift": 1.0, "noise": 0.1}),
    }
    if name not in base:
        raise DataError(f"no default recipe for {name!r}")
    fields = dict(base[name])
    fields.update(overrides)
    return DatasetRecipe(name=name, **fields)


def read_table(path: Path, n_columns: int) -> np.ndarray:
    """Read a whitespace-separated numeric file and check its column count."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    if path.stat().st_size == 0:
        raise DataError(f"{path}: file is empty")
    try:
        data = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: could not parse numeric table: {exc}") from exc
    if data.shape[0] == 0:
        raise DataError(f"{path}: file contains no rows")
    if data.shape[1] != n_columns:
        raise DataError(f"{path}: expected {n_columns} columns, found {data.shape[1]}")
    return data


def _label_map(codes) -> dict[int, int]:
    return {int(c): i for i, c in enumerate(codes)}


def _map_labels(raw: np.ndarray, mapping: dict[int, int]) -> np.ndarray:
    out = np.full(raw.shape, -1, dtype=np.int64)
    for code, idx in mapping.items():
        out[raw == code] = idx
    return out


def _check_selection(recipe: DatasetRecipe, expected: int, n_columns: int) -> list[int]:
    sel = list(recipe.channel_selection)
    if len(sel) != expected:
        raise DataError(f"{recipe.name}: channel_selection has {len(sel)} entries, expected {expected}")
    if min(sel) < 0 or max(sel) >= n_columns:
        raise DataError(f"{recipe.name}: channel_selection indices must lie in [0, {n_columns})")
    return sel


def _windows(rec: RawRecording, recipe: DatasetRecipe, n_a: int) -> WindowedDataset:
    return slide_windows(rec, dataclasses.replace(recipe, channel_selection=[]), n_a=n_a)


def _fill_dead_channels(rec: RawRecording, fill: Optional[float]) -> RawRecording:
    if fill is None:
        return rec
    x = rec.samples.copy()
    dead = ~np.isfinite(x).any(axis=0)
    if dead.any():
        logger.warning("subject %s: channels %s entirely missing, filled with %s",
                       rec.subject_id, np.flatnonzero(dead).tolist(), fill)
        x[:, dead] = fill
    return rec.replace(x)


def _read_all(paths: list[Path], n_columns: int, jobs: int) -> list[np.ndarray]:
    if jobs <= 1:
        return [read_table(p, n_columns) for p in paths]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda p: read_table(p, n_columns), paths))


def load_minmax_table(path=None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(mins, maxs)`` indexed by raw Opportunity column."""
    if path is None:
        text = resources.files("harnest").joinpath("data/opportunity_minmax.json").read_text()
    else:
        text = Path(path).read_text()
    table = json.loads(text)
    mins = np.full(OPP_N_COLUMNS, np.nan)
    maxs = np.full(OPP_N_COLUMNS, np.nan)
    for g in table["groups"]:
        lo, hi = g["columns"]
        mins[lo:hi + 1] = g["min"]
        maxs[lo:hi + 1] = g["max"]
    return mins, maxs


def _normalize(recs: list[RawRecording], recipe: DatasetRecipe, minmax=None) -> list[RawRecording]:
    if recipe.normalization == "zscore_per_user":
        return zscore_per_user(recs)
    if recipe.normalization == "minmax_fixed":
        if minmax is None:
            raise DataError(f"{recipe.name}: minmax_fixed normalization needs a min/max table")
        return [normalize_minmax(r, *minmax) for r in recs]
    return recs


def load_opportunity(root_path, recipe: Optional[DatasetRecipe] = None, jobs: int = 1) -> WindowedDataset:
    recipe = recipe or default_recipe("opportunity")
    sel = _check_selection(recipe, 113, OPP_N_COLUMNS)
    track = recipe.options.get("track", "locomotion")
    if track not in OPP_LABEL_COLUMNS:
        raise DataError(f"unknown Opportunity label track {track!r}")
    codes = list(OPP_LOCOMOTION if track == "locomotion" else OPP_GESTURES)
    if not recipe.options.get("keep_null", True):
        codes.remove(0)
    if recipe.activity_filter:
        codes = [c for c in codes if c in set(recipe.activity_filter)]
    mapping = _label_map(codes)

    root = Path(root_path)
    files = sorted(root.rglob("S*-*.dat"))
    pattern = re.compile(r"S(\d+)-(ADL\d|Drill)\.dat$")
    files = [f for f in files if pattern.search(f.name)]
    if not files:
        raise DataError(f"{root}: no Opportunity files matching S<k>-ADL<j>.dat / S<k>-Drill.dat")
    subj = [int(pattern.search(f.name).group(1)) for f in files]
    order = sorted(range(len(files)), key=lambda i: (subj[i], files[i].name))
    files = [files[i] for i in order]
    subj = [subj[i] for i in order]
    if recipe.subject_filter:
        keep = [i for i, s in enumerate(subj) if s in set(recipe.subject_filter)]
        files, subj = [files[i] for i in keep], [subj[i] for i in keep]

    tables = _read_all(files, OPP_N_COLUMNS, jobs)
    mins, maxs = load_minmax_table(recipe.options.get("minmax_table"))
    fill = recipe.options.get("fill_dead_channels")
    recs = []
    for t, s in zip(tables, subj):
        rec = RawRecording(t[:, sel], SAMPLE_RATES["opportunity"],
                           _map_labels(t[:, OPP_LABEL_COLUMNS[track]].astype(np.int64), mapping), s)
        recs.append(interpolate_missing(_fill_dead_channels(rec, fill)))
    recs = _normalize(recs, recipe, (mins[sel], maxs[sel]))
    return WindowedDataset.concatenate([_windows(r, recipe, len(codes)) for r in recs], len(codes))


def load_pamap2(root_path, recipe: Optional[DatasetRecipe] = None, jobs: int = 1) -> WindowedDataset:
    recipe = recipe or default_recipe("pamap2")
    sel = _check_selection(recipe, 36, PAMAP2_N_COLUMNS)
    codes = list(recipe.activity_filter or PAMAP2_PROTOCOL)
    mapping = _label_map(codes)
    subjects = list(recipe.subject_filter or PAMAP2_SUBJECTS)
    root = Path(root_path)
    files = []
    for s in subjects:
        hits = sorted(root.rglob(f"subject{s}.dat"))
        hits = [h for h in hits if "optional" not in str(h).lower()]
        if not hits:
            raise DataError(f"{root}: missing Protocol/subject{s}.dat")
        files.append(hits[0])
    tables = _read_all(files, PAMAP2_N_COLUMNS, jobs)
    recs = [
        interpolate_missing(RawRecording(t[:, sel], SAMPLE_RATES["pamap2"],
                                         _map_labels(t[:, 1].astype(np.int64), mapping), s - 100))
        for t, s in zip(tables, subjects)
    ]
    recs = _normalize(recs, recipe)
    return WindowedDataset.concatenate([_windows(r, recipe, len(codes)) for r in recs], len(codes))


def load_mhealth(root_path, recipe: Optional[DatasetRecipe] = None, jobs: int = 1) -> WindowedDataset:
    recipe = recipe or default_recipe("mhealth")
    sel = _check_selection(recipe, len(recipe.channel_selection) or 23, MHEALTH_N_COLUMNS - 1)
    codes = list(recipe.activity_filter or MHEALTH_ACTIVITIES)
    if recipe.options.get("keep_null", False) and 0 not in codes:
        codes = [0] + codes
    mapping = _label_map(codes)
    subjects = list(recipe.subject_filter or range(1, 11))
    root = Path(root_path)
    files = []
    for s in subjects:
        hits = sorted(root.rglob(f"mHealth_subject{s}.log"))
        if not hits:
            raise DataError(f"{root}: missing mHealth_subject{s}.log")
        files.append(hits[0])
    tables = _read_all(files, MHEALTH_N_COLUMNS, jobs)
    recs = [
        interpolate_missing(RawRecording(t[:, sel], SAMPLE_RATES["mhealth"],
                                         _map_labels(t[:, 23].astype(np.int64), mapping), s))
        for t, s in zip(tables, subjects)
    ]
    recs = _normalize(recs, recipe)
    return WindowedDataset.concatenate([_windows(r, recipe, len(codes)) for r in recs], len(codes))


def load_mocapaci(root_path, recipe: Optional[DatasetRecipe] = None, jobs: int = 1) -> WindowedDataset:
    """Read one text file per gesture instance.

    Files are named ``S<subject>_G<gesture>_R<repetition>.txt`` and hold
    four whitespace-separated capacitive channels sampled at 100 Hz.
    """
    recipe = recipe or default_recipe("mocapaci")
    out_len = recipe.window_size
    root = Path(root_path)
    entries = []
    for f in sorted(root.rglob("*.txt")):
        m = _MOCAPACI_NAME.search(f.name)
        if m:
            entries.append((int(m.group(1)), int(m.group(2)), int(m.group(3)), f))
    if not entries:
        raise DataError(f"{root}: no MoCapaci files named S<subject>_G<gesture>_R<rep>.txt")
    entries.sort()
    if recipe.subject_filter:
        entries = [e for e in entries if e[0] in set(recipe.subject_filter)]
    gestures = sorted({e[1] for e in entries})
    if recipe.activity_filter:
        gestures = [g for g in gestures if g in set(recipe.activity_filter)]
        entries = [e for e in entries if e[1] in set(gestures)]
    mapping = _label_map(gestures)
    tables = _read_all([e[3] for e in entries], MOCAPACI_CHANNELS, jobs)

    X, Y, S = [], [], []
    for (subject, gesture, _, _), t in zip(entries, tables):
        rec = interpolate_missing(RawRecording(t, SAMPLE_RATES["mocapaci"],
                                               np.full(len(t), mapping[gesture]), subject))
        rec = bandpass_and_resample(rec, out_len=out_len)
        X.append(rec.samples.T)
        Y.append(mapping[gesture])
        S.append(subject)
    ds = WindowedDataset(np.stack(X), np.array(Y), np.array(S), len(gestures))
    if recipe.options.get("require_balanced", True):
        check_balanced(ds)
    return ds


def check_balanced(ds: WindowedDataset) -> None:
    """Raise unless every (subject, class) cell holds the same number of windows."""
    counts = np.zeros((len(ds.subject_ids), ds.n_a), dtype=int)
    pos = {s: i for i, s in enumerate(ds.subject_ids)}
    for y, s in zip(ds.Y, ds.S):
        counts[pos[int(s)], y] += 1
    if counts.min() != counts.max():
        raise DataError(
            f"dataset is not class/subject balanced: per-cell counts range {counts.min()}..{counts.max()}"
        )


def load_synthetic(recipe: DatasetRecipe) -> WindowedDataset:
    o = recipe.options
    return synth_subjects(
        n_subjects=int(o.get("n_subjects", 6)),
        n_activities=int(o.get("n_activities", 4)),
        n_channels=int(o.get("n_channels", 3)),
        window=recipe.window_size,
        windows_per_subject_per_class=int(o.get("windows_per_subject_per_class", 20)),
        seed=int(o.get("seed", 0)),
        subject_shift=float(o.get("subject_shift", 1.0)),
        noise=float(o.get("noise", 0.1)),
    )


LOADERS: dict[str, Callable] = {
    "opportunity": load_opportunity,
    "pamap2": load_pamap2,
    "mhealth": load_mhealth,
    "mocapaci": load_mocapaci,
}


def load_from_recipe(recipe: DatasetRecipe, root_path=None, jobs: int = 1) -> WindowedDataset:
    if recipe.name == "synthetic":
        return load_synthetic(recipe)
    if root_path is None:
        raise DataError(f"recipe {recipe.name!r} needs a raw data root")
    return LOADERS[recipe.name](root_path, recipe, jobs=jobs)
