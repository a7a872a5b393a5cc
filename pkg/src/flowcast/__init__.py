"""flowcast: partition-parallel diffusion-convolutional GRU traffic forecasting."""

from .errors import ConfigError, DataError, FlowcastError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "FlowcastError", "NumericalError", "__version__"]
