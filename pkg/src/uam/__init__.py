"""Regularity normalization and incremental NML model-complexity probes."""

from .nml import (
    CompAccumulator,
    PriorModel,
    RunningGaussian,
    SaliencyTable,
    code_length,
    comp_increment,
    gaussian_log_pdf,
    log_sum_exp,
    welford_update,
)
from .norms import AxisScheme, NormVariant, RegularityNorm

__all__ = [
    "AxisScheme",
    "CompAccumulator",
    "NormVariant",
    "PriorModel",
    "RegularityNorm",
    "RunningGaussian",
    "SaliencyTable",
    "code_length",
    "comp_increment",
    "gaussian_log_pdf",
    "log_sum_exp",
    "welford_update",
]

__version__ = "0.1.0"
