"""Confidence-weighted averaging of per-node online states.

Each coordinate of the averaged weights is weighted by how much squared
gradient each node accumulated there, so a node that saw a feature often
dominates the average for that feature. Both averages cost exactly two
AllReduce calls because the scaling matrices are diagonal.
"""
from __future__ import annotations

import numpy as np

from .comm import Collective, ReduceOp
from .online import ModelState


def weighted_average_w(w: np.ndarray, g2: np.ndarray, collective: Collective) -> np.ndarray:
    """(sum_k G^k)^-1 (sum_k G^k w^k), computed identically on every node."""
    if np.any(~(g2 > 0)):
        raise ValueError("scaling diagonal must be strictly positive")
    den = collective.allreduce(g2, ReduceOp.SUM)
    num = collective.allreduce(g2 * w, ReduceOp.SUM)
    return num / den


def weighted_average_g(g2: np.ndarray, collective: Collective) -> np.ndarray:
    """(sum_k G^k)^-1 (sum_k (G^k)^2)."""
    if np.any(~(g2 > 0)):
        raise ValueError("scaling diagonal must be strictly positive")
    den = collective.allreduce(g2, ReduceOp.SUM)
    num = collective.allreduce(g2 * g2, ReduceOp.SUM)
    return num / den


def average_state(state: ModelState, collective: Collective, with_g: bool = True) -> ModelState:
    w_bar = weighted_average_w(state.w, state.g2, collective)
    g_bar = weighted_average_g(state.g2, collective) if with_g else state.g2.copy()
    return ModelState(w_bar, g_bar, state.passes, "averaged")


def uniform_average(w: np.ndarray, collective: Collective) -> np.ndarray:
    """Plain mean of the nodes' weight vectors (one collective)."""
    return collective.allreduce(w, ReduceOp.SUM) / collective.m
