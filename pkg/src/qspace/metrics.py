"""Normalized root mean-squared error in coefficient and sample domains."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DOMAINS = ("coeff_sh", "coeff_spf", "spatial")


def nrmse(estimate, truth, axis=0):
    """``||estimate - truth||_2 / ||truth||_2`` along ``axis``.

    Batched inputs (extra trailing axes) give one value per column.
    """
    estimate = np.asarray(estimate)
    truth = np.asarray(truth)
    if truth.shape[axis] != estimate.shape[axis]:
        raise ValueError("estimate and truth lengths differ")
    denom = np.linalg.norm(truth, axis=axis)
    if np.any(denom == 0):
        raise ValueError("NRMSE undefined for an all-zero ground truth")
    if truth.ndim < estimate.ndim:
        truth = truth.reshape(truth.shape + (1,) * (estimate.ndim - truth.ndim))
        denom = denom.reshape(denom.shape + (1,) * (estimate.ndim - 1 - denom.ndim))
    out = np.linalg.norm(estimate - truth, axis=axis) / denom
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class NrmseResult:
    value: float
    domain: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown NRMSE domain {self.domain!r}")
        if self.value < 0:
            raise ValueError("NRMSE cannot be negative")


def mean_and_se(values):
    """Arithmetic mean over realizations and its standard error."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("no values")
    se = v.std(ddof=1) / np.sqrt(v.size) if v.size > 1 else 0.0
    return float(v.mean()), float(se)
