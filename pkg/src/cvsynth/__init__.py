"""Self-supervised CT slice interpolation with cross-view mutual distillation."""
from .volume import DegradationSpec, Volume, degrade, fuse, make_phantom, read_volume, write_volume

__all__ = [
    "DegradationSpec",
    "Volume",
    "degrade",
    "fuse",
    "make_phantom",
    "read_volume",
    "write_volume",
]
__version__ = "0.1.0"
