"""Progressive few-step distillation of a conditional flow-matching model on a
synthetic sequence task: teacher -> 4-step DMD student -> 1-step adversarial
student."""

from progdistill.errors import ConfigError, DataError, DistillError, NumericDivergence, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DistillError",
    "NumericDivergence",
    "ShapeError",
    "__version__",
]
