"""Randomized block-coordinate optimistic gradient solvers for root-finding
problems ``G(x) = 0``, the operator-splitting layer built on them, and
simulated federated algorithms.
"""

from blocksolve.blockcore import (
    BlockDistribution,
    BlockPartition,
    BlockVector,
    UniformStream,
    WeightVector,
    block_scatter,
    sample_block,
    weighted_norm_sq,
)
from blocksolve.operators import (
    BlockOperator,
    make_linear_weak_minty,
    make_separable_cocoercive,
)
from blocksolve.solvers import (
    ArcogConstants,
    ArcogSchedule,
    PracticalState,
    RcogParams,
    arcog_constants,
    derive_rcog_params,
)

__version__ = "0.1.0"

__all__ = [
    "ArcogConstants",
    "ArcogSchedule",
    "BlockDistribution",
    "BlockOperator",
    "BlockPartition",
    "BlockVector",
    "PracticalState",
    "RcogParams",
    "UniformStream",
    "WeightVector",
    "arcog_constants",
    "block_scatter",
    "derive_rcog_params",
    "make_linear_weak_minty",
    "make_separable_cocoercive",
    "sample_block",
    "weighted_norm_sq",
]
