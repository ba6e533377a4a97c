"""Phase-field brittle fracture with domain-decomposed energy-minimizing networks."""

import jax

jax.config.update("jax_enable_x64", True)

from pfxpinn.errors import (  # noqa: E402
    ConfigError,
    GeometryError,
    InputShapeError,
    NumericalFailure,
    OutputError,
    PfxError,
)

__all__ = [
    "ConfigError",
    "GeometryError",
    "InputShapeError",
    "NumericalFailure",
    "OutputError",
    "PfxError",
]

__version__ = "0.1.0"
