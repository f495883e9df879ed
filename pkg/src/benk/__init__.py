"""Beran estimator with neural kernels for treatment effects on censored data."""

from benk.survival import (
    StepSurvivalFunction,
    SurvivalDataset,
    SurvivalRecord,
    beran_sf,
    cate_from_sfs,
    concordance_index,
    expected_lifetime,
    kaplan_meier,
)

__version__ = "0.1.0"

__all__ = [
    "StepSurvivalFunction",
    "SurvivalDataset",
    "SurvivalRecord",
    "beran_sf",
    "cate_from_sfs",
    "concordance_index",
    "expected_lifetime",
    "kaplan_meier",
]
