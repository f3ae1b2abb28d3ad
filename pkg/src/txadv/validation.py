"""Input validation helpers shared across estimators and attack code."""
from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Raised when user-supplied data violates a documented contract."""


def check_token_ids(tokens, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.intp)
    if tokens.ndim != 1:
        raise ValidationError("token ids must be a 1-D sequence")
    if tokens.size == 0:
        raise ValidationError("sequence must contain at least one transaction")
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise ValidationError(
            f"token id out of range for vocabulary of size {vocab_size}"
        )
    return tokens


def check_amounts(amounts, n_tokens: int | None = None) -> np.ndarray:
    amounts = np.asarray(amounts, dtype=np.float64)
    if amounts.ndim != 1:
        raise ValidationError("amounts must be a 1-D sequence")
    if not np.all(np.isfinite(amounts)):
        raise ValidationError("amounts must be finite")
    if np.any(amounts <= 0.0):
        raise ValidationError("amounts must be positive")
    if n_tokens is not None and amounts.shape[0] != n_tokens:
        raise ValidationError("amounts and token ids must have equal length")
    return amounts
