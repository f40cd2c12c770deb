"""Hierarchical training loss: active MSE, corridor MSE and group conservation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tape, Tensor
from .dataio import CorridorTopology

ABLATIONS = ("none", "no_hierarchy", "no_corridor_weight", "no_conservation")


@dataclass(frozen=True)
class LossWeights:
    lambda_corr: float = 0.5
    lambda_cons: float = 0.1

    def __post_init__(self):
        if self.lambda_corr < 0 or self.lambda_cons < 0:
            raise ValueError("loss weights must be non-negative")

    def ablated(self, flag: str) -> "LossWeights":
        if flag not in ABLATIONS:
            raise ValueError(f"unknown ablation flag {flag!r}")
        if flag == "no_corridor_weight":
            return LossWeights(0.0, self.lambda_cons)
        if flag == "no_conservation":
            return LossWeights(self.lambda_corr, 0.0)
        return self


def _subset_mse(tape: Tape, y_hat: Tensor, y: np.ndarray, idx: np.ndarray, what: str) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size == 0:
        raise ValueError(f"{what} index set is empty")
    return tape.mse(tape.take(y_hat, idx), np.asarray(y, dtype=np.float64)[..., idx])


def active_mse(tape: Tape, y_hat: Tensor, y: np.ndarray, active_idx) -> Tensor:
    return _subset_mse(tape, y_hat, y, active_idx, "active")


def corridor_mse(tape: Tape, y_hat: Tensor, y: np.ndarray, corridor_idx) -> Tensor:
    return _subset_mse(tape, y_hat, y, corridor_idx, "corridor")


def conservation_loss(tape: Tape, y_hat: Tensor, y: np.ndarray, groups) -> Tensor:
    """Mean over groups of the batch MSE between predicted and observed group totals."""
    if not groups:
        raise ValueError("need at least one group")
    y = np.asarray(y, dtype=np.float64)
    total = None
    for g in groups:
        g = np.asarray(g, dtype=np.intp)
        if g.size == 0:
            raise ValueError("empty group")
        term = tape.mse(tape.sum_cols(y_hat, g), y[..., g].sum(axis=-1, keepdims=True))
        total = term if total is None else tape.add(total, term)
    return tape.scale(total, 1.0 / len(groups))


def total_loss(tape: Tape, y_hat: Tensor, y: np.ndarray, topology: CorridorTopology,
               weights: LossWeights = LossWeights()) -> Tensor:
    """``L_mse + lambda_corr * L_corr + lambda_cons * L_cons`` in normalized units.

    A zero weight drops its term from the graph entirely, so ablated arms
    compute exactly ``L_mse`` plus the surviving terms.
    """
    loss = active_mse(tape, y_hat, y, topology.active_idx)
    if weights.lambda_corr > 0:
        loss = tape.add(loss, tape.scale(corridor_mse(tape, y_hat, y, topology.corridor_idx), weights.lambda_corr))
    if weights.lambda_cons > 0:
        loss = tape.add(loss, tape.scale(conservation_loss(tape, y_hat, y, topology.groups), weights.lambda_cons))
    return loss
