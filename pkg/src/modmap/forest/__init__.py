from .forest import (
    DEFAULT_GRID_MAX_DEPTH,
    DEFAULT_GRID_N_TREES,
    EvalResult,
    ForestHyperparams,
    GridPoint,
    RandomForestModel,
    balanced_weights,
    default_grid,
    evaluate,
    fit_forest,
    gini,
    grid_search,
    load_model,
    predict,
    save_model,
)
from .kernels import BACKEND
from .tree import DecisionTree, fit_tree

__all__ = [
    "BACKEND",
    "DEFAULT_GRID_MAX_DEPTH",
    "DEFAULT_GRID_N_TREES",
    "DecisionTree",
    "EvalResult",
    "ForestHyperparams",
    "GridPoint",
    "RandomForestModel",
    "balanced_weights",
    "default_grid",
    "evaluate",
    "fit_forest",
    "fit_tree",
    "gini",
    "grid_search",
    "load_model",
    "predict",
    "save_model",
]
