"""gridcast: unified forecasting and imputation for cellular-grid traffic."""

__version__ = "0.1.0"
