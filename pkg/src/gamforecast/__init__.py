"""Graph-attentive memory forecasting over regularized multivariate series."""

__version__ = "0.1.0"

from .errors import GamError
from .estimators import (FederatedGlucoseForecaster, GlucoseForecaster,
                         GridNormalizer)
from .ingest import (EventRecord, EventStream, GridSeries, NormStats,
                     RegularSample)
from .model import GamConfig, GraphSnapshot
from .tensorcore import ParameterSet, Tensor

__all__ = [
    "EventRecord", "EventStream", "FederatedGlucoseForecaster", "GamConfig",
    "GamError", "GlucoseForecaster", "GraphSnapshot", "GridNormalizer",
    "GridSeries", "NormStats", "ParameterSet", "RegularSample", "Tensor",
    "__version__",
]
