"""Per-passage rescaling of decoder cross-attention.

Two ways of choosing the per-passage target masses are provided: a hard
relevance intervention (relevant passages share weight 1, irrelevant ones
get r times a relevant passage's weight) and a temperature recalibration
that sharpens or flattens the model's own per-passage totals. Both are
applied by rescaling every passage's token probabilities to its target mass,
per head, keeping within-passage proportions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AttentionSite, AttentionTensor, passage_totals


class DegenerateWeights(ValueError):
    """No passage can receive mass: zero relevant passages and r = 0."""


@dataclass(frozen=True)
class InterventionSpec:
    r: float
    relevance_mask: tuple[bool, ...] | None = None  # overrides the site's mask when given

    def __post_init__(self):
        if not self.r >= 0:
            raise ValueError(f"r must be nonnegative, got {self.r}")


@dataclass(frozen=True)
class TemperatureSpec:
    T: float
    epsilon_floor: float = 1e-12

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"temperature must be positive, got {self.T}")
        if not self.epsilon_floor > 0:
            raise ValueError("epsilon_floor must be positive")


def _relevance_weights(mask: np.ndarray, r: float) -> np.ndarray:
    """Weights for boolean masks (..., N); rows must have n+ >= 1 or r > 0."""
    mask = np.asarray(mask, dtype=bool)
    n_plus = mask.sum(axis=-1, keepdims=True)
    n_minus = mask.shape[-1] - n_plus
    denom = n_plus + r * n_minus
    if np.any(denom <= 0):
        raise DegenerateWeights("intervention weights undefined: no relevant passage and r = 0")
    return np.where(mask, 1.0, r) / denom


def intervention_weights(spec: InterventionSpec, n_plus: int, n_minus: int) -> np.ndarray:
    """Relevant passages first: [1/(n+ + r n-)] * n+ followed by [r/(n+ + r n-)] * n-."""
    if n_plus < 0 or n_minus < 0:
        raise ValueError("passage counts must be nonnegative")
    mask = np.array([True] * n_plus + [False] * n_minus)
    return _relevance_weights(mask, spec.r)


def _segment_lengths(offsets: np.ndarray, width: int) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.intp)
    return np.diff(np.append(offsets, width))


def apply_passage_weights(
    row: np.ndarray,
    passage_offsets: np.ndarray,
    weights: np.ndarray,
    valid: np.ndarray | None = None,
) -> np.ndarray:
    """Rescale each passage span of ``row`` (..., S) to total ``weights`` (..., N).

    Token proportions inside a passage are kept. A passage whose current mass
    is zero but whose target is not receives its target spread uniformly over
    its valid tokens. ``valid`` broadcasts against ``row``.
    """
    row = np.asarray(row, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    S = row.shape[-1]
    lengths = _segment_lengths(passage_offsets, S)
    totals = passage_totals(row, passage_offsets)
    weights = np.broadcast_to(weights, totals.shape)
    starved = totals <= 0.0
    scale = np.divide(weights, totals, out=np.zeros_like(totals), where=~starved)
    out = row * np.repeat(scale, lengths, axis=-1)
    if np.any(starved & (weights > 0)):
        valid_f = np.ones(row.shape) if valid is None else np.broadcast_to(np.asarray(valid, dtype=np.float64), row.shape)
        counts = passage_totals(valid_f, passage_offsets)
        # a passage with no valid token at all falls back to all of its tokens
        empty = counts == 0
        valid_f = np.where(np.repeat(empty, lengths, axis=-1), 1.0, valid_f)
        counts = np.where(empty, lengths, counts)
        fill = np.where(starved, weights / counts, 0.0)
        out = out + valid_f * np.repeat(fill, lengths, axis=-1)
    return out


def temperature_from_totals(totals: np.ndarray, spec: TemperatureSpec) -> np.ndarray:
    """softmax(log(max(totals, eps)) / T) over the last axis."""
    logs = np.log(np.maximum(np.asarray(totals, dtype=np.float64), spec.epsilon_floor)) / spec.T
    logs = logs - logs.max(axis=-1, keepdims=True)
    e = np.exp(logs)
    return e / e.sum(axis=-1, keepdims=True)


def temperature_weights(attn: AttentionTensor, k: int, l: int, spec: TemperatureSpec) -> np.ndarray:
    """Per-passage weights at decoder layer ``k`` and position ``l`` from head-averaged totals."""
    first = np.asarray(attn.probs[k, :, l, :], dtype=np.float64).mean(axis=0)
    return temperature_from_totals(passage_totals(first, attn.passage_offsets), spec)


def make_intervention_transform(spec: InterventionSpec):
    """Transform imposing relevance-based passage masses at every decoder layer."""

    def transform(probs: np.ndarray, site: AttentionSite) -> np.ndarray:
        B = probs.shape[0]
        N = len(site.passage_offsets)
        if spec.relevance_mask is not None:
            mask = np.broadcast_to(np.asarray(spec.relevance_mask, dtype=bool), (B, N))
        elif site.relevance is not None:
            mask = np.asarray(site.relevance, dtype=bool)
        else:
            raise ValueError("intervention needs relevance masks")
        if mask.shape != (B, N):
            raise ValueError(f"relevance mask shape {mask.shape} does not match ({B}, {N})")
        weights = _relevance_weights(mask, spec.r)[:, None, None, :]  # shared over heads and positions
        return apply_passage_weights(probs, site.passage_offsets, weights, site.valid[:, None, None, :])

    return transform


def make_temperature_transform(spec: TemperatureSpec):
    """Transform recalibrating passage masses per layer and decoder position."""

    def transform(probs: np.ndarray, site: AttentionSite) -> np.ndarray:
        p64 = np.asarray(probs, dtype=np.float64)
        totals = passage_totals(p64.mean(axis=1), site.passage_offsets)  # (B, T, N)
        weights = temperature_from_totals(totals, spec)[:, None, :, :]
        return apply_passage_weights(p64, site.passage_offsets, weights, site.valid[:, None, None, :])

    return transform
