"""Misalignment-robust cross-modality 3D image synthesis.

Training pairs in cross-modality synthesis are usually registered by a
conventional tool and keep residual misalignment; a synthesizer trained with
plain voxelwise losses learns that misalignment as blur and ghosting.  This
package trains the synthesizer jointly with a deformable registration
network: a single predicted deformation links the synthesis output to the
misaligned ground truth along two orders (warp after synthesis, synthesis
after warp), and a content/style split with per-domain generators keeps
anatomy stable while modality appearance changes.  A synthetic phantom bench
generates paired volumes with known deformations so every claim is testable
on a desk-scale CPU budget.
"""

from .errors import (
    BoundsError,
    CorruptionError,
    EmptyMaskError,
    FormatError,
    NonFiniteLossError,
    ParameterError,
    ValidationError,
)
from .volumes import (
    HU_WINDOW,
    Mask,
    Modality,
    Units,
    Volume,
    compute_body_mask,
    denormalize_intensity,
    extract_patch,
    load_mask,
    load_volume,
    normalize_intensity,
    save_mask,
    save_volume,
)

__version__ = "0.1.0"
