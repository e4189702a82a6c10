"""Top-k sparse attention over the expanded cache, plus the tile rule.

The index scores come from a deliberately simple stub (mean over heads of the
rotary query against cached rotary keys); real hierarchical indexers are out
of scope. Sparse attention defaults to the 1/sqrt(head_dim) logit scale; pass
the dense paths' scale to compare against them. A latent-cache twin of the
sparse step is provided behind the same signature, and the two agree for any
fixed selection, exactly as the dense paths do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .model import (ExpandedCache, GqlaConfig, GqlaWeights, LatentCache,
                    _query_at, _softmax)

TILE_M = 16


@dataclass(frozen=True)
class TileReport:
    """Whether the expanded path can fill a tensor-core MMA tile."""

    heads_per_group: int
    gqa_path_feasible: bool
    rationale: str
    tile_m: int = TILE_M


def tile_feasibility(config: GqlaConfig) -> TileReport:
    """The expanded sparse path needs >= tile_m query heads per K/V group."""
    hpg = config.heads_per_group
    feasible = hpg >= TILE_M
    if feasible:
        rationale = (f"{hpg} query heads share each K/V group, filling the "
                     f"m={TILE_M} MMA tile; the expanded sparse path runs on tensor cores")
    elif hpg == 1:
        rationale = ("one query head per K/V group: the per-token GEMM degenerates "
                     "to a GEMV and falls off tensor cores; only the absorbed path remains")
    else:
        rationale = (f"only {hpg} query heads share each K/V group, under the "
                     f"m={TILE_M} MMA tile; the expanded sparse path cannot fill tensor cores")
    return TileReport(heads_per_group=hpg, gqa_path_feasible=feasible, rationale=rationale)


def stub_index_scores(weights: GqlaWeights, config: GqlaConfig, cache, x) -> np.ndarray:
    """Fixed stub indexer: mean over heads of the rotary query-key dot product.

    Works on either cache layout (both carry the rotary keys). The query is
    the newest cached token.
    """
    if len(cache) < 1:
        raise ParameterError("cache must be non-empty")
    x = np.asarray(x, dtype=np.float64)
    _, q_rope = _query_at(weights, config, x, len(cache) - 1)
    return (q_rope @ cache.k_rope.T).mean(axis=0)


def topk_select(scores, k: int) -> np.ndarray:
    """Positions of the k largest scores, ties toward the smaller position.

    Returns all positions when k >= len(scores); result sorted ascending.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ParameterError("scores must be a non-empty 1-D array")
    if not np.all(np.isfinite(scores)):
        raise ShapeError("scores contain non-finite entries")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    k = min(k, scores.size)
    # lexsort: primary key last; descending score, then ascending position.
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:k])


def _check_selection(selected, length: int) -> np.ndarray:
    sel = np.asarray(selected, dtype=np.int64)
    if sel.ndim != 1 or sel.size == 0:
        raise ParameterError("selection must be a non-empty 1-D index set")
    if np.unique(sel).size != sel.size:
        raise ParameterError("selection contains repeated positions")
    if sel.min() < 0 or sel.max() >= length:
        raise ParameterError(f"selection out of range for a cache of {length} tokens")
    return sel


def sparse_attention(weights: GqlaWeights, config: GqlaConfig, cache: ExpandedCache,
                     x, selected, scale: float | None = None) -> np.ndarray:
    """Attend only over the selected cache positions along the expanded path.

    The query token x is the newest cached entry; its position is
    len(cache) - 1. Returns the combined model_dim output.
    """
    sel = _check_selection(selected, len(cache))
    if scale is None:
        scale = 1.0 / math.sqrt(config.head_dim)
    x = np.asarray(x, dtype=np.float64)
    q_nope, q_rope = _query_at(weights, config, x, len(cache) - 1)
    gi = np.arange(config.num_heads) // config.heads_per_group
    k_g = cache.k_nope[sel].reshape(sel.size, config.num_groups, config.head_dim)[:, gi, :]
    v_g = cache.v[sel].reshape(sel.size, config.num_groups, config.value_head_dim)[:, gi, :]
    logits = (np.einsum("hd,shd->hs", q_nope, k_g) + q_rope @ cache.k_rope[sel].T) * scale
    attn = _softmax(logits)
    o = np.einsum("hs,shd->hd", attn, v_g)
    return weights.out_proj @ o.reshape(-1)


def sparse_attention_absorbed(weights: GqlaWeights, config: GqlaConfig, cache: LatentCache,
                              x, selected, scale: float | None = None) -> np.ndarray:
    """Latent-cache twin of sparse_attention; identical output for the same selection."""
    sel = _check_selection(selected, len(cache))
    if scale is None:
        scale = 1.0 / math.sqrt(config.head_dim)
    x = np.asarray(x, dtype=np.float64)
    q_nope, q_rope = _query_at(weights, config, x, len(cache) - 1)
    k_up_b = weights.k_up.reshape(config.num_groups, config.head_dim, config.kv_rank)
    v_up_b = weights.v_up.reshape(config.num_groups, config.value_head_dim, config.kv_rank)
    gi = np.arange(config.num_heads) // config.heads_per_group
    q_abs = np.einsum("hd,hdr->hr", q_nope, k_up_b[gi])
    logits = (q_abs @ cache.kv[sel].T + q_rope @ cache.k_rope[sel].T) * scale
    attn = _softmax(logits)
    o_hat = attn @ cache.kv[sel]
    o = np.einsum("hvr,hr->hv", v_up_b[gi], o_hat)
    return weights.out_proj @ o.reshape(-1)


def masked_reference(weights: GqlaWeights, config: GqlaConfig, cache: ExpandedCache,
                     x, selected, scale: float | None = None,
                     mask_value: float = -1e9) -> np.ndarray:
    """Diagnostic oracle: dense attention with excluded logits forced to mask_value.

    True exclusion and masking must agree; this is the masking-equivalence
    check run by tests and the sparse-check command.
    """
    sel = _check_selection(selected, len(cache))
    if scale is None:
        scale = 1.0 / math.sqrt(config.head_dim)
    x = np.asarray(x, dtype=np.float64)
    q_nope, q_rope = _query_at(weights, config, x, len(cache) - 1)
    gi = np.arange(config.num_heads) // config.heads_per_group
    length = len(cache)
    k_g = cache.k_nope.reshape(length, config.num_groups, config.head_dim)[:, gi, :]
    v_g = cache.v.reshape(length, config.num_groups, config.value_head_dim)[:, gi, :]
    logits = (np.einsum("hd,shd->hs", q_nope, k_g) + q_rope @ cache.k_rope.T) * scale
    mask = np.full(length, True)
    mask[sel] = False
    logits[:, mask] = mask_value
    attn = _softmax(logits)
    o = np.einsum("hs,shd->hd", attn, v_g)
    return weights.out_proj @ o.reshape(-1)
