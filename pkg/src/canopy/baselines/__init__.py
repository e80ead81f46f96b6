from .linear import LinearModel, fit_linear
from .power import PowerModel, fit_power, predict_power
from .forest import (ForestParams, RandomForestModel, fit_random_forest, oob_error,
                     oob_predictions, tree_oob_errors, grid_search_oob, OOB_GRID, TUNED_PARAMS)
from .persist import BASELINE_KINDS, load_baseline, save_baseline

__all__ = ["LinearModel", "fit_linear", "PowerModel", "fit_power", "predict_power",
           "ForestParams", "RandomForestModel", "fit_random_forest", "oob_error",
           "oob_predictions", "tree_oob_errors", "grid_search_oob", "OOB_GRID", "TUNED_PARAMS",
           "BASELINE_KINDS", "save_baseline", "load_baseline"]
