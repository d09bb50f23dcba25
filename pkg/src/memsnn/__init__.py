"""Memristive spiking network simulation and training with an exact reverse-mode tape."""

from .errors import (BadLabel, BadMagic, ConfigError, DataError, DomainError, MemsnnError,
                     MissingLabel, NonFiniteError, ShapeError, ShapeMismatch, SingularDivision,
                     TruncatedFile, UnsupportedDtype)

__version__ = "0.1.0"
