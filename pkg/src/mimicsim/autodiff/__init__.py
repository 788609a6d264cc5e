from . import jet
from .tape import (
    Pullback,
    Tape,
    TapeError,
    Var,
    absolute,
    clamp,
    concat,
    exp,
    linear,
    log,
    matmul,
    maximum,
    minimum,
    select,
    sigmoid,
    sqrt,
    stop_gradient,
    swish,
    tanh,
    value_of,
)

__all__ = [
    "jet",
    "Pullback",
    "Tape",
    "TapeError",
    "Var",
    "absolute",
    "clamp",
    "concat",
    "exp",
    "linear",
    "log",
    "matmul",
    "maximum",
    "minimum",
    "select",
    "sigmoid",
    "sqrt",
    "stop_gradient",
    "swish",
    "tanh",
    "value_of",
]
