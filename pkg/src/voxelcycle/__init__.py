"""voxelcycle: unpaired 3D volume translation with cycle- and shape-consistency.

The package couples two generator/discriminator pairs with two voxelwise
segmentors so that translated volumes keep their anatomy, and feeds the
synthetic volumes back into segmentor training online.  Everything runs on
a small float64 reverse-mode autodiff engine; procedural dual-modality
phantoms stand in for clinical data.
"""

from .engine import Tensor, no_grad
from .optim import Adam

__all__ = ["Tensor", "no_grad", "Adam"]

__version__ = "0.1.0"
