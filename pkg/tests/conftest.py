"""Shared fixtures: desk-scale configs, planted sources, and loop oracles.

The loop oracles here are intentionally naive reimplementations (explicit
per-head/per-position loops, no shared code with the package) used to check
the vectorized implementations against an independent route.
"""

import dataclasses
import math

import numpy as np
import pytest

from gqla.convert_gqa import GqaWeights, init_random_gqa
from gqla.model import GqlaConfig, init_random, random_tokens


@pytest.fixture
def desk_config() -> GqlaConfig:
    return GqlaConfig(model_dim=64, num_heads=8, num_groups=2, head_dim=16,
                      value_head_dim=16, rope_head_dim=8, kv_rank=32, q_rank=48)


@pytest.fixture
def desk_weights(desk_config):
    return init_random(desk_config, 1)


@pytest.fixture
def mini_canonical_config() -> GqlaConfig:
    # the canonical shape scaled by 1/8 in every dimension
    return GqlaConfig(model_dim=896, num_heads=16, num_groups=1, head_dim=16,
                      value_head_dim=16, rope_head_dim=8, kv_rank=64, q_rank=192)


@pytest.fixture
def desk_gqa() -> GqaWeights:
    return init_random_gqa(num_heads=8, num_groups=2, head_dim=16, model_dim=64, seed=5)


@pytest.fixture
def mla_config() -> GqlaConfig:
    # head-indexed source: one K/V block per query head
    return GqlaConfig(model_dim=64, num_heads=8, num_groups=8, head_dim=16,
                      value_head_dim=16, rope_head_dim=8, kv_rank=32, q_rank=48)


@pytest.fixture
def mla_weights(mla_config):
    return init_random(mla_config, 21)


def plant_bandrank1_gqa(num_heads, num_groups, head_dim, model_dim, seed,
                        rope_base=10000.0) -> GqaWeights:
    """Source whose per-band key activations have complex rank 1.

    Every rotary frequency band's key content across heads is a complex
    multiple of one shared direction, so the full rotary structure fits a
    single head_dim-wide frequency ladder and conversion can be lossless.
    """
    rng = np.random.default_rng(seed)
    g, d, dm = num_groups, head_dim, model_dim
    k = np.zeros((g * d, dm))
    for p in range(d // 2):
        a = rng.standard_normal(dm)
        b = rng.standard_normal(dm)
        for j in range(g):
            re, im = rng.standard_normal(2)
            k[j * d + 2 * p] = re * a - im * b
            k[j * d + 2 * p + 1] = im * a + re * b
    bq = 1.0 / math.sqrt(dm)
    bo = 1.0 / math.sqrt(num_heads * d)
    return GqaWeights(
        num_heads=num_heads, num_groups=g, head_dim=d, model_dim=dm, rope_base=rope_base,
        q_proj=rng.uniform(-bq, bq, (num_heads * d, dm)),
        k_proj=k,
        v_proj=rng.uniform(-bq, bq, (g * d, dm)),
        out_proj=rng.uniform(-bo, bo, (dm, num_heads * d)))


def plant_group_structured_mla(config: GqlaConfig, groups: int, seed: int):
    """Head-indexed weights whose per-group up-projections share a rank-d_h core.

    Each head's block is an orthogonal rotation of its group's common map, so
    per-group PCA at the canonical rank recovers the structure exactly.
    """
    base = init_random(config, seed)
    rng = np.random.default_rng(seed + 1)
    hpg = config.num_heads // groups
    d, dv, r = config.head_dim, config.value_head_dim, config.kv_rank
    k_up = np.zeros_like(base.k_up)
    v_up = np.zeros_like(base.v_up)
    for j in range(groups):
        core_k = rng.standard_normal((d, r))
        core_v = rng.standard_normal((dv, r))
        for i in range(hpg):
            rot_k, _ = np.linalg.qr(rng.standard_normal((d, d)))
            rot_v, _ = np.linalg.qr(rng.standard_normal((dv, dv)))
            head = j * hpg + i
            k_up[head * d:(head + 1) * d] = rot_k @ core_k
            v_up[head * dv:(head + 1) * dv] = rot_v @ core_v
    return dataclasses.replace(base, k_up=k_up, v_up=v_up)


def loop_gqa_oracle(src: GqaWeights, tokens, s_q=1) -> np.ndarray:
    """From-scratch grouped-query attention with explicit loops and inline trig."""
    tokens = np.asarray(tokens, dtype=np.float64)
    length = tokens.shape[0]
    h, g, d = src.num_heads, src.num_groups, src.head_dim
    hpg = h // g
    half = d // 2
    freqs = [src.rope_base ** (-2.0 * k / d) for k in range(half)]

    def rot(vec, t):
        out = np.empty_like(vec)
        for k in range(half):
            ang = t * freqs[k]
            c, s = math.cos(ang), math.sin(ang)
            out[2 * k] = vec[2 * k] * c - vec[2 * k + 1] * s
            out[2 * k + 1] = vec[2 * k] * s + vec[2 * k + 1] * c
        return out

    keys = [[rot((src.k_proj @ tokens[t])[j * d:(j + 1) * d], t) for j in range(g)]
            for t in range(length)]
    vals = [[(src.v_proj @ tokens[t])[j * d:(j + 1) * d] for j in range(g)]
            for t in range(length)]
    outputs = np.empty((s_q, src.model_dim))
    for idx, t in enumerate(range(length - s_q, length)):
        per_head = []
        for i in range(h):
            j = i // hpg
            q = rot((src.q_proj @ tokens[t])[i * d:(i + 1) * d], t)
            logits = [float(np.dot(q, keys[s][j])) / math.sqrt(d) for s in range(t + 1)]
            m = max(logits)
            exps = [math.exp(l - m) for l in logits]
            z = sum(exps)
            o = np.zeros(d)
            for s in range(t + 1):
                o += (exps[s] / z) * vals[s][j]
            per_head.append(o)
        outputs[idx] = src.out_proj @ np.concatenate(per_head)
    return outputs


def dual_path_bound(outputs, tol=1e-10) -> float:
    return tol * (1.0 + float(np.max(np.abs(outputs))))


__all__ = ["plant_bandrank1_gqa", "plant_group_structured_mla", "loop_gqa_oracle",
           "dual_path_bound", "random_tokens"]
