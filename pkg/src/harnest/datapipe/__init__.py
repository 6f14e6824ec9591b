"""Raw recordings to windowed datasets."""

from .container import ContainerError, load_dataset, save_dataset
from .loaders import (
    default_recipe,
    load_from_recipe,
    load_mhealth,
    load_mocapaci,
    load_opportunity,
    load_pamap2,
)
from .preprocess import (
    bandpass_and_resample,
    interpolate_missing,
    normalize_minmax,
    normalize_zscore_per_user,
    zscore_per_user,
)
from .synth import synth_subjects
from .types import DataError, DatasetRecipe, RawRecording, WindowedDataset
from .windows import slide_windows, window_count

__all__ = [
    "ContainerError", "DataError", "DatasetRecipe", "RawRecording", "WindowedDataset",
    "bandpass_and_resample", "default_recipe", "interpolate_missing", "load_dataset",
    "load_from_recipe", "load_mhealth", "load_mocapaci", "load_opportunity", "load_pamap2",
    "normalize_minmax", "normalize_zscore_per_user", "save_dataset", "slide_windows",
    "synth_subjects", "window_count", "zscore_per_user",
]
