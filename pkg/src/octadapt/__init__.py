"""Synthetic OCT domain adaptation testbed: deterministic phantom volumes,
rule-based and CycleGAN-based cross-device adaptation, a frozen retina
segmenter, and statistical evaluation of the three-way comparison."""

__version__ = "0.1.0"

from .data import (Domain, DomainDataset, ImageTensor, PhantomConfig, RangeTag,
                   SegMask, Volume, denormalize, denormalize_volume,
                   generate_phantom, load_volume, load_volume_dir, normalize,
                   normalize_volume, save_volume, save_volumes)
from .errors import (ConfigError, ContractError, DivergenceError, FormatError,
                     MissingInputError, OctAdaptError)
from .traditional import TraditionalParams, adapt_traditional

__all__ = [
    "Domain", "DomainDataset", "ImageTensor", "PhantomConfig", "RangeTag",
    "SegMask", "Volume", "denormalize", "denormalize_volume",
    "generate_phantom", "load_volume", "load_volume_dir", "normalize",
    "normalize_volume", "save_volume", "save_volumes",
    "ConfigError", "ContractError", "DivergenceError", "FormatError",
    "MissingInputError", "OctAdaptError",
    "TraditionalParams", "adapt_traditional",
    "__version__",
]
