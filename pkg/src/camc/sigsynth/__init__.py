from .modulate import ModType, DIGITAL_MODS, ANALOG_MODS, constellation, synthesize
from .channel import ChannelSpec, apply_channel, to_ap, measure_snr_db
from .dataset import (
    IQFrame,
    DatasetError,
    write_dataset,
    read_dataset,
    synthesize_dataset,
)

__all__ = [
    "ModType",
    "DIGITAL_MODS",
    "ANALOG_MODS",
    "constellation",
    "synthesize",
    "ChannelSpec",
    "apply_channel",
    "to_ap",
    "measure_snr_db",
    "IQFrame",
    "DatasetError",
    "write_dataset",
    "read_dataset",
    "synthesize_dataset",
]
