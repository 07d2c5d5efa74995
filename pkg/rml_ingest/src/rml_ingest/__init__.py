"""RadioML2016.10A → CAMCDS01 converter and stratified splitter."""

from .convert import KNOWN_MODS, ConvertError, convert, load_archive
from .split import split_dataset

__version__ = "0.1.0"

__all__ = ["KNOWN_MODS", "ConvertError", "convert", "load_archive", "split_dataset"]
