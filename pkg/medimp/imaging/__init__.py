from medimp.imaging.augment import (
    AugmentationParams,
    apply_augmentation,
    augment,
    flip_horizontal,
    sample_augmentation_params,
)
from medimp.imaging.volume import Volume, load_volume, normalize_volume, save_volume

__all__ = [
    "AugmentationParams",
    "Volume",
    "apply_augmentation",
    "augment",
    "flip_horizontal",
    "load_volume",
    "normalize_volume",
    "sample_augmentation_params",
    "save_volume",
]
