from .config import ConfigError, ExperimentConfig, from_dict, load_config
from .recipes import recipe_class_bias, recipe_curriculum, recipe_robust_sweep
from .training import MetricsReport, evaluate, quantiles, train

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "MetricsReport",
    "evaluate",
    "from_dict",
    "load_config",
    "quantiles",
    "recipe_class_bias",
    "recipe_curriculum",
    "recipe_robust_sweep",
    "train",
]
