"""Hybrid fish-stock assessment: a state-space assessor corrected by boosted trees."""

from stockhybrid.core import (
    AbundanceMatrix,
    AbundanceVector,
    AgeRange,
    BiologySeries,
    FeatureVector,
    FleetObservation,
    ObservationSeries,
    StockParameterSeries,
)

__all__ = [
    "AbundanceMatrix",
    "AbundanceVector",
    "AgeRange",
    "BiologySeries",
    "FeatureVector",
    "FleetObservation",
    "ObservationSeries",
    "StockParameterSeries",
]

__version__ = "0.1.0"
