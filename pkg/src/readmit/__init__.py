"""ICU readmission risk modelling: data handling, random forests, evaluation,
calibration, likelihood ratios and TreeSHAP explanations."""

__version__ = "0.1.0"

from .data import DataTable, Schema, generate_synthetic, load_csv, preset  # noqa: E402
from .learner import ForestParams, RandomForestModel, fit_forest  # noqa: E402

__all__ = ["DataTable", "Schema", "generate_synthetic", "load_csv", "preset",
           "ForestParams", "RandomForestModel", "fit_forest", "__version__"]
