"""Data-parallel multi-image super-resolution.

The latent high-resolution image is estimated by minimizing an Lp data term
over all low-resolution frames plus a bilateral total variation prior. The
image is split into horizontal bands with halo rows, and a consensus scaled
conjugate gradient keeps every band on the identical step.
"""

from .errors import (
    AnalysisError,
    ConfigurationError,
    ContractError,
    ImageIOError,
    MisrError,
    NumericalError,
    SynchronizationError,
)
from .grid import ImageGrid, SparseOperator, compose, identity, spmv, spmv_transpose
from .interp import bilinear_upsample, interp_fuse
from .metrics import MtfCurve, mtf_circular_edge, psnr, ssim
from .objective import ObjectiveParams, btv_term, data_term, objective_eval
from .partition import PartitionPlan, exchange_borders, fuse, plan, split
from .scg import SCGConfig, reconstruct
from .system import DegradationSpec, SystemModel, build_system, degrade

__version__ = "0.1.0"
