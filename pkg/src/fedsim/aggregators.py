"""Baseline aggregation strategies behind a common strategy description.

All strategies consume per-client deltas (local model minus the round's
global model) and produce the next global parameter vector. Ties are broken
by ascending client index everywhere, which keeps every strategy
deterministic under client permutation up to that rule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from fedsim import model
from fedsim.data import ValidationSet
from fedsim.errors import ConfigurationError
from fedsim.model import MlpSpec

log = logging.getLogger(__name__)

STRATEGY_KINDS = ("fedavg", "fedval", "multi_krum", "lfr", "trimmed_mean")
PRE_TRANSFORMS = ("norm_bound", "dp_noise")


@dataclass(frozen=True)
class ClientUpdate:
    """One client's round output: its delta against the global model."""

    client_id: int
    delta: np.ndarray
    num_samples: int


@dataclass(frozen=True)
class Strategy:
    """Aggregation strategy selection plus optional privacy pre-transforms."""

    kind: str
    remove_fraction: float = 0.0
    trim_fraction: float = 0.0
    pre_transforms: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigurationError(f"strategy kind must be one of {STRATEGY_KINDS}")
        if not 0.0 <= self.remove_fraction < 1.0:
            raise ConfigurationError("remove_fraction must lie in [0, 1)")
        if not 0.0 <= self.trim_fraction < 1.0:
            raise ConfigurationError("trim_fraction must lie in [0, 1)")
        for t in self.pre_transforms:
            if t not in PRE_TRANSFORMS:
                raise ConfigurationError(f"unknown pre-transform {t!r}")


def _stack_deltas(updates: list[ClientUpdate]) -> np.ndarray:
    if not updates:
        raise ConfigurationError("no client updates to aggregate")
    deltas = np.stack([u.delta for u in updates])
    if deltas.ndim != 2:
        raise ConfigurationError("client deltas must be flat vectors")
    return deltas


def fedavg(global_params: np.ndarray, updates: list[ClientUpdate]) -> np.ndarray:
    """Sample-count-weighted average of client models."""
    deltas = _stack_deltas(updates)
    counts = np.array([u.num_samples for u in updates], dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ConfigurationError("total sample count is zero")
    return global_params + (counts / total) @ deltas


def multi_krum(updates: list[ClientUpdate], remove_fraction: float) -> list[int]:
    """Indices of the n - f clients with the lowest Krum scores.

    A client's score is the sum of squared distances to its n - f - 2
    nearest other updates; when that neighbor count is infeasible the single
    nearest neighbor is used instead.
    """
    deltas = _stack_deltas(updates)
    n = len(updates)
    f = math.floor(remove_fraction * n)
    keep = n - f
    if keep < 1:
        raise ConfigurationError("multi_krum must keep at least one client")
    neighbors = n - f - 2
    if neighbors < 1:
        log.warning("multi_krum: n-f-2 < 1, falling back to single nearest neighbor")
        neighbors = 1
    sq = np.sum((deltas[:, None, :] - deltas[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(sq, np.inf)
    scores = np.sort(sq, axis=1)[:, :neighbors].sum(axis=1)
    selected = np.argsort(scores, kind="stable")[:keep]
    return sorted(int(i) for i in selected)


def lfr(
    global_params: np.ndarray,
    updates: list[ClientUpdate],
    spec: MlpSpec,
    val: ValidationSet,
    remove_fraction: float,
) -> np.ndarray:
    """Drop the highest-validation-loss clients, then fedavg the rest."""
    n = len(updates)
    drop = math.ceil(remove_fraction * n)
    if drop >= n:
        raise ConfigurationError(f"lfr would drop all {n} clients")
    losses = np.empty(n)
    for i, u in enumerate(updates):
        sample_losses, _ = model.eval_losses(global_params + u.delta, spec, val.data)
        losses[i] = sample_losses.mean()
    keep_order = np.argsort(losses, kind="stable")[: n - drop]
    survivors = [updates[i] for i in sorted(int(i) for i in keep_order)]
    return fedavg(global_params, survivors)


def trimmed_mean(
    global_params: np.ndarray, updates: list[ClientUpdate], trim_fraction: float
) -> np.ndarray:
    """Coordinate-wise trimmed mean of deltas, applied to the global model."""
    deltas = _stack_deltas(updates)
    n = len(updates)
    t = math.floor(trim_fraction * n)
    if 2 * t >= n:
        raise ConfigurationError(f"trim_fraction {trim_fraction} over-trims {n} updates")
    ordered = np.sort(deltas, axis=0)
    kept = ordered[t : n - t] if t > 0 else ordered
    return global_params + kept.mean(axis=0)
