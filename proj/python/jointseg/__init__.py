"""Joint healthy-tissue and lesion segmentation: metrics, NIfTI I/O and lesion-mask tools."""

from ._core import (
    JOINT_CLASSES,
    LESION,
    ConfigError,
    FormatError,
    InputError,
    ShapeError,
    class_name,
    config_hash,
    default_config,
    degrade_lesion_mask,
    dice,
    hd95,
    load_labels,
    load_volume,
    majority_vote,
    save_labels,
    synth_data,
)

__all__ = [
    "JOINT_CLASSES",
    "LESION",
    "ConfigError",
    "FormatError",
    "InputError",
    "ShapeError",
    "class_name",
    "config_hash",
    "default_config",
    "degrade_lesion_mask",
    "dice",
    "hd95",
    "load_labels",
    "load_volume",
    "majority_vote",
    "save_labels",
    "synth_data",
]
