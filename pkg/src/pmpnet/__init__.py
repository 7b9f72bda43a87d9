"""Multi-step point-moving completion of 3-D point clouds, in NumPy.

The public surface is re-exported here; submodules hold the details::

    from pmpnet import ModelConfig, build_params, multi_step_forward
"""

from .data import ShapeSpec, OcclusionSpec, generate, normalize, occlude, read_cloud, write_cloud
from .errors import (ArgumentError, ConfigError, ContractError, DegenerateInputError,
                     DimensionError, FormatError, ParseError, PMPError, SolverError,
                     TrainingAborted)
from .losses import LossReport, chamfer, emd_loss, hausdorff, pmd_loss, total_loss
from .model import ModelConfig, PathTrace, build_params, dense_complete, multi_step_forward, upsample
from .tensor import Tensor, backward, grad_check
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train_loop
from .transport import Assignment, assign_auction, assign_exact

__version__ = "0.1.0"
