"""Shared error types and deterministic RNG helpers."""

from __future__ import annotations

import hashlib

import numpy as np


class ValidationError(ValueError):
    """Inputs or file contents violate a documented contract.

    ``field`` names the offending field, flag, or record so callers can
    report actionable messages (and the CLI can map it to exit code 2).
    """

    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericError(ArithmeticError):
    """A numeric stage produced NaN or inf.  ``stage`` names the stage."""

    def __init__(self, stage: str, message: str = "non-finite values") -> None:
        self.stage = stage
        super().__init__(f"{stage}: {message}")


class ExpertStuck(RuntimeError):
    """The scripted expert found no feasible candidate to demonstrate."""


def stable_seed(*parts: object) -> int:
    """Map a tuple of ints/strings to a 64-bit seed, stable across runs."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stable_rng(*parts: object) -> np.random.Generator:
    """Deterministic generator derived from hashed seed parts."""
    return np.random.default_rng(stable_seed(*parts))


def require_finite(name: str, *arrays: np.ndarray) -> None:
    """Raise :class:`NumericError` naming ``name`` if any array is non-finite."""
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericError(name)
