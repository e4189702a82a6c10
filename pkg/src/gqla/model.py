"""Group-query latent attention core.

One set of projection weights admits two algebraically equivalent decoding
paths. The expanded path materializes per-group K/V from the latent and runs
grouped-query attention against an ExpandedCache; the absorbed path folds the
K/V up-projections into the query/output sides so every head attends directly
to the cached latent (LatentCache). Switching between them is a one-shot cache
expand/compress. A deliberately naive brute-force attention (oracle_mha) is
kept free of any shared code with the two paths and serves as their oracle.

Shapes use single tokens as 1-D vectors and sequences as (L, model_dim)
arrays. All arithmetic is float64 and all functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, OutOfSubspaceError, ParameterError, ShapeError
from .rope import RopeSpec, apply_folded_rope, apply_rope


@dataclass(frozen=True)
class GqlaConfig:
    """Architecture dimensions plus the rotary base.

    num_heads query heads share num_groups K/V groups; the joint K/V latent
    has kv_rank dims and queries are compressed through a q_rank latent. The
    decoupled rotary pathway carries rope_head_dim dims, shared across heads
    on the key side.
    """

    model_dim: int
    num_heads: int
    num_groups: int
    head_dim: int
    value_head_dim: int
    rope_head_dim: int
    kv_rank: int
    q_rank: int
    rope_base: float = 10000.0

    def __post_init__(self):
        for f in ("model_dim", "num_heads", "num_groups", "head_dim",
                  "value_head_dim", "rope_head_dim", "kv_rank", "q_rank"):
            if getattr(self, f) < 1:
                raise ParameterError(f"{f} must be >= 1, got {getattr(self, f)}")
        if self.num_heads % self.num_groups != 0:
            raise ParameterError(
                f"num_heads ({self.num_heads}) must be divisible by num_groups ({self.num_groups})")
        if self.rope_head_dim % 2 != 0:
            raise ParameterError(f"rope_head_dim must be even, got {self.rope_head_dim}")
        if not self.rope_base > 1.0:
            raise ParameterError(f"rope_base must be > 1, got {self.rope_base}")

    @property
    def heads_per_group(self) -> int:
        return self.num_heads // self.num_groups

    def group_of(self, head: int) -> int:
        """KV group serving a query head (contiguous head blocks)."""
        return head // self.heads_per_group

    @property
    def score_scale(self) -> float:
        """Softmax logit scale shared by both decoding paths."""
        return 1.0 / math.sqrt(self.head_dim + self.rope_head_dim)

    def rope_spec(self) -> RopeSpec:
        return RopeSpec(self.rope_head_dim, self.rope_base)

    @property
    def latent_elements_per_token(self) -> int:
        return self.kv_rank + self.rope_head_dim

    @property
    def expanded_elements_per_token(self) -> int:
        return self.num_groups * (self.head_dim + self.value_head_dim) + self.rope_head_dim


def canonical_config() -> GqlaConfig:
    """The reference DeepSeek-style operating shape used by the planner."""
    return GqlaConfig(
        model_dim=7168, num_heads=128, num_groups=8, head_dim=128,
        value_head_dim=128, rope_head_dim=64, kv_rank=512, q_rank=1536,
    )


@dataclass(frozen=True)
class GqlaWeights:
    """The eight projection matrices (row-major, float64).

    q_down: (q_rank, model_dim)             query down-projection
    q_up:   (num_heads*head_dim, q_rank)    per-head query up-projection
    q_rope: (num_heads*rope_head_dim, q_rank) per-head rotary query projection
    kv_down:(kv_rank, model_dim)            joint K/V down-projection
    k_up:   (num_groups*head_dim, kv_rank)  per-group key up-projection
    v_up:   (num_groups*value_head_dim, kv_rank) per-group value up-projection
    k_rope: (rope_head_dim, model_dim)      shared rotary key projection
    out_proj:(model_dim, num_heads*value_head_dim) output combination
    """

    q_down: np.ndarray
    q_up: np.ndarray
    q_rope: np.ndarray
    kv_down: np.ndarray
    k_up: np.ndarray
    v_up: np.ndarray
    k_rope: np.ndarray
    out_proj: np.ndarray

    def validate(self, config: GqlaConfig, require_finite: bool = True) -> None:
        for name, shape in expected_shapes(config).items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            if require_finite and not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name} contains non-finite entries")


def expected_shapes(config: GqlaConfig) -> dict:
    c = config
    return {
        "q_down": (c.q_rank, c.model_dim),
        "q_up": (c.num_heads * c.head_dim, c.q_rank),
        "q_rope": (c.num_heads * c.rope_head_dim, c.q_rank),
        "kv_down": (c.kv_rank, c.model_dim),
        "k_up": (c.num_groups * c.head_dim, c.kv_rank),
        "v_up": (c.num_groups * c.value_head_dim, c.kv_rank),
        "k_rope": (c.rope_head_dim, c.model_dim),
        "out_proj": (c.model_dim, c.num_heads * c.value_head_dim),
    }


def init_random(config: GqlaConfig, seed: int) -> GqlaWeights:
    """Seeded random weights, entries uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

    Matrices are drawn in the field order of GqlaWeights, so a (config, seed)
    pair is fully reproducible.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in expected_shapes(config).items():
        bound = 1.0 / math.sqrt(shape[1])  # fan_in = input dimension
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return GqlaWeights(**arrays)


@dataclass(frozen=True)
class LatentCache:
    """Per-token latent layout: kv (L, kv_rank) and post-rotary k_rope (L, rope_head_dim)."""

    kv: np.ndarray
    k_rope: np.ndarray

    def __len__(self) -> int:
        return self.kv.shape[0]

    @property
    def elements_per_token(self) -> int:
        return self.kv.shape[1] + self.k_rope.shape[1]


@dataclass(frozen=True)
class ExpandedCache:
    """Per-token expanded layout: per-group K (L, g*head_dim), V (L, g*value_head_dim),
    and the shared post-rotary k_rope (L, rope_head_dim)."""

    k_nope: np.ndarray
    v: np.ndarray
    k_rope: np.ndarray

    def __len__(self) -> int:
        return self.k_nope.shape[0]

    @property
    def elements_per_token(self) -> int:
        return self.k_nope.shape[1] + self.v.shape[1] + self.k_rope.shape[1]


@dataclass(frozen=True)
class ProjectedToken:
    """Single-token projections: per-head queries and the shared K/V latent."""

    q_nope: np.ndarray  # (num_heads, head_dim)
    q_rope: np.ndarray  # (num_heads, rope_head_dim), post-rotary
    kv: np.ndarray      # (kv_rank,)
    k_rope: np.ndarray  # (rope_head_dim,), post-rotary


def project_token(weights: GqlaWeights, config: GqlaConfig, x, position: int) -> ProjectedToken:
    """Run one token through the input projections at the given position."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (config.model_dim,):
        raise ShapeError(f"token has shape {x.shape}, expected ({config.model_dim},)")
    spec = config.rope_spec()
    c_q = weights.q_down @ x
    kv = weights.kv_down @ x
    q_nope = (weights.q_up @ c_q).reshape(config.num_heads, config.head_dim)
    q_rope_raw = weights.q_rope @ c_q
    q_rope = apply_folded_rope(spec, q_rope_raw, position).reshape(
        config.num_heads, config.rope_head_dim)
    k_rope = apply_rope(spec, weights.k_rope @ x, position)
    return ProjectedToken(q_nope=q_nope, q_rope=q_rope, kv=kv, k_rope=k_rope)


def random_tokens(count: int, dim: int, seed: int) -> np.ndarray:
    """Seeded synthetic token stream (standard normal), used for calibration
    and probe inputs at desk scale."""
    if count < 1 or dim < 1:
        raise ParameterError("count and dim must be >= 1")
    return np.random.default_rng(seed).standard_normal((count, dim))


def _check_tokens(tokens, config: GqlaConfig, s_q: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != config.model_dim:
        raise ShapeError(f"tokens must be (L, {config.model_dim}), got {tokens.shape}")
    if tokens.shape[0] < 1:
        raise ParameterError("token sequence must be non-empty")
    if not 1 <= s_q <= tokens.shape[0]:
        raise ParameterError(f"s_q must be in [1, {tokens.shape[0]}], got {s_q}")
    return tokens


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _build_caches(weights: GqlaWeights, config: GqlaConfig, tokens: np.ndarray):
    """Latent and expanded cache arrays for every token of the sequence."""
    spec = config.rope_spec()
    kv = tokens @ weights.kv_down.T
    k_rope_raw = tokens @ weights.k_rope.T
    k_rope = np.stack([apply_rope(spec, k_rope_raw[t], t) for t in range(tokens.shape[0])])
    k_nope = kv @ weights.k_up.T
    v = kv @ weights.v_up.T
    return kv, k_nope, v, k_rope


def _query_at(weights: GqlaWeights, config: GqlaConfig, x: np.ndarray, position: int):
    spec = config.rope_spec()
    c_q = weights.q_down @ x
    q_nope = (weights.q_up @ c_q).reshape(config.num_heads, config.head_dim)
    q_rope = apply_folded_rope(spec, weights.q_rope @ c_q, position).reshape(
        config.num_heads, config.rope_head_dim)
    return q_nope, q_rope


def _attend_expanded(weights, config, q_nope, q_rope, k_nope, v, k_rope) -> np.ndarray:
    """One query against an expanded prefix; returns the combined model_dim output."""
    length = k_nope.shape[0]
    gi = np.arange(config.num_heads) // config.heads_per_group
    k_g = k_nope.reshape(length, config.num_groups, config.head_dim)[:, gi, :]
    v_g = v.reshape(length, config.num_groups, config.value_head_dim)[:, gi, :]
    logits = (np.einsum("hd,shd->hs", q_nope, k_g) + q_rope @ k_rope.T) * config.score_scale
    attn = _softmax(logits)
    o = np.einsum("hs,shd->hd", attn, v_g)
    return weights.out_proj @ o.reshape(-1)


def _attend_latent(weights, config, q_nope, q_rope, kv, k_rope) -> np.ndarray:
    """One query against a latent prefix, up-projections folded into Q/O."""
    k_up_b = weights.k_up.reshape(config.num_groups, config.head_dim, config.kv_rank)
    v_up_b = weights.v_up.reshape(config.num_groups, config.value_head_dim, config.kv_rank)
    gi = np.arange(config.num_heads) // config.heads_per_group
    q_abs = np.einsum("hd,hdr->hr", q_nope, k_up_b[gi])  # (num_heads, kv_rank)
    logits = (q_abs @ kv.T + q_rope @ k_rope.T) * config.score_scale
    attn = _softmax(logits)
    o_hat = attn @ kv  # (num_heads, kv_rank)
    o = np.einsum("hvr,hr->hv", v_up_b[gi], o_hat)
    return weights.out_proj @ o.reshape(-1)


def forward_gqa_path(weights: GqlaWeights, config: GqlaConfig, tokens, s_q: int = 1):
    """Causal attention along the expanded path for the trailing s_q positions.

    Returns (outputs (s_q, model_dim), ExpandedCache over the whole sequence).
    """
    tokens = _check_tokens(tokens, config, s_q)
    length = tokens.shape[0]
    _, k_nope, v, k_rope = _build_caches(weights, config, tokens)
    outputs = np.empty((s_q, config.model_dim))
    for idx, t in enumerate(range(length - s_q, length)):
        q_nope, q_rope = _query_at(weights, config, tokens[t], t)
        outputs[idx] = _attend_expanded(
            weights, config, q_nope, q_rope, k_nope[: t + 1], v[: t + 1], k_rope[: t + 1])
    return outputs, ExpandedCache(k_nope=k_nope, v=v, k_rope=k_rope)


def forward_absorb_path(weights: GqlaWeights, config: GqlaConfig, tokens, s_q: int = 1):
    """Causal attention along the absorbed path for the trailing s_q positions.

    Returns (outputs (s_q, model_dim), LatentCache over the whole sequence).
    """
    tokens = _check_tokens(tokens, config, s_q)
    length = tokens.shape[0]
    kv, _, _, k_rope = _build_caches(weights, config, tokens)
    outputs = np.empty((s_q, config.model_dim))
    for idx, t in enumerate(range(length - s_q, length)):
        q_nope, q_rope = _query_at(weights, config, tokens[t], t)
        outputs[idx] = _attend_latent(
            weights, config, q_nope, q_rope, kv[: t + 1], k_rope[: t + 1])
    return outputs, LatentCache(kv=kv, k_rope=k_rope)


def decode_gqa(weights: GqlaWeights, config: GqlaConfig, cache: ExpandedCache, x):
    """Append one token to an expanded cache and return (output, new cache)."""
    x = np.asarray(x, dtype=np.float64)
    position = len(cache)
    spec = config.rope_spec()
    kv = weights.kv_down @ x
    k_nope = np.vstack([cache.k_nope, weights.k_up @ kv])
    v = np.vstack([cache.v, weights.v_up @ kv])
    k_rope = np.vstack([cache.k_rope, apply_rope(spec, weights.k_rope @ x, position)])
    q_nope, q_rope = _query_at(weights, config, x, position)
    y = _attend_expanded(weights, config, q_nope, q_rope, k_nope, v, k_rope)
    return y, ExpandedCache(k_nope=k_nope, v=v, k_rope=k_rope)


def decode_absorb(weights: GqlaWeights, config: GqlaConfig, cache: LatentCache, x):
    """Append one token to a latent cache and return (output, new cache)."""
    x = np.asarray(x, dtype=np.float64)
    position = len(cache)
    spec = config.rope_spec()
    kv = np.vstack([cache.kv, weights.kv_down @ x])
    k_rope = np.vstack([cache.k_rope, apply_rope(spec, weights.k_rope @ x, position)])
    q_nope, q_rope = _query_at(weights, config, x, position)
    y = _attend_latent(weights, config, q_nope, q_rope, kv, k_rope)
    return y, LatentCache(kv=kv, k_rope=k_rope)


@dataclass(frozen=True)
class AbsorbedWeights:
    """Pre-fused form of the absorbed path.

    q_absorbed stacks, per head, the composition of the head's query
    up-projection with the transposed key up-projection of its group
    ((num_heads*kv_rank, q_rank)); out_absorbed composes the output projection
    with each head's value up-projection ((model_dim, num_heads*kv_rank)). The
    remaining four projections are carried unchanged.
    """

    q_absorbed: np.ndarray
    out_absorbed: np.ndarray
    q_down: np.ndarray
    q_rope: np.ndarray
    kv_down: np.ndarray
    k_rope: np.ndarray


def absorb(weights: GqlaWeights, config: GqlaConfig) -> AbsorbedWeights:
    """Fold the K/V up-projections into the query and output projections."""
    c = config
    k_up_b = weights.k_up.reshape(c.num_groups, c.head_dim, c.kv_rank)
    v_up_b = weights.v_up.reshape(c.num_groups, c.value_head_dim, c.kv_rank)
    q_blocks = []
    o_blocks = []
    for i in range(c.num_heads):
        j = c.group_of(i)
        q_up_i = weights.q_up[i * c.head_dim:(i + 1) * c.head_dim]
        q_blocks.append(k_up_b[j].T @ q_up_i)  # (kv_rank, q_rank)
        o_i = weights.out_proj[:, i * c.value_head_dim:(i + 1) * c.value_head_dim]
        o_blocks.append(o_i @ v_up_b[j])  # (model_dim, kv_rank)
    return AbsorbedWeights(
        q_absorbed=np.vstack(q_blocks),
        out_absorbed=np.hstack(o_blocks),
        q_down=weights.q_down.copy(),
        q_rope=weights.q_rope.copy(),
        kv_down=weights.kv_down.copy(),
        k_rope=weights.k_rope.copy(),
    )


def forward_absorbed(absorbed: AbsorbedWeights, config: GqlaConfig, tokens, s_q: int = 1):
    """Absorbed-path forward using the pre-fused projections."""
    c = config
    tokens = _check_tokens(tokens, c, s_q)
    length = tokens.shape[0]
    spec = c.rope_spec()
    kv = tokens @ absorbed.kv_down.T
    k_rope_raw = tokens @ absorbed.k_rope.T
    k_rope = np.stack([apply_rope(spec, k_rope_raw[t], t) for t in range(length)])
    q_abs_b = absorbed.q_absorbed.reshape(c.num_heads, c.kv_rank, c.q_rank)
    outputs = np.empty((s_q, c.model_dim))
    for idx, t in enumerate(range(length - s_q, length)):
        c_q = absorbed.q_down @ tokens[t]
        q_abs = np.einsum("hrq,q->hr", q_abs_b, c_q)
        q_rope = apply_folded_rope(spec, absorbed.q_rope @ c_q, t).reshape(
            c.num_heads, c.rope_head_dim)
        logits = (q_abs @ kv[: t + 1].T + q_rope @ k_rope[: t + 1].T) * c.score_scale
        attn = _softmax(logits)
        o_hat = attn @ kv[: t + 1]  # (num_heads, kv_rank)
        outputs[idx] = absorbed.out_absorbed @ o_hat.reshape(-1)
    return outputs, LatentCache(kv=kv, k_rope=k_rope)


def cache_expand(cache: LatentCache, weights: GqlaWeights) -> ExpandedCache:
    """One-shot latent -> expanded switch: up-project every cached token."""
    return ExpandedCache(
        k_nope=cache.kv @ weights.k_up.T,
        v=cache.kv @ weights.v_up.T,
        k_rope=cache.k_rope.copy(),
    )


def cache_compress(cache: ExpandedCache, weights: GqlaWeights, *, reject_above: float = 1e-6):
    """One-shot expanded -> latent switch by per-token least squares.

    Returns (LatentCache, relative residual per token). Raises
    OutOfSubspaceError when any entry's residual exceeds reject_above times
    its norm, which signals a cache not generated by these weights.
    """
    basis = np.vstack([weights.k_up, weights.v_up])
    stacked = np.hstack([cache.k_nope, cache.v])  # (L, rows(basis))
    if not (np.all(np.isfinite(basis)) and np.all(np.isfinite(stacked))):
        raise NumericError("cache compression needs finite weights and cache entries")
    solution, _, _, _ = np.linalg.lstsq(basis, stacked.T, rcond=None)
    kv = solution.T
    residual = np.linalg.norm(stacked - kv @ basis.T, axis=1)
    norms = np.linalg.norm(stacked, axis=1)
    relative = np.where(norms > 0, residual / np.where(norms > 0, norms, 1.0), residual)
    worst = int(np.argmax(relative)) if len(cache) else 0
    if len(cache) and relative[worst] > reject_above:
        raise OutOfSubspaceError(
            f"cache entry {worst} lies outside the K/V up-projection column space "
            f"(relative residual {relative[worst]:.3e} > {reject_above:.1e})")
    return LatentCache(kv=kv, k_rope=cache.k_rope.copy()), relative


def oracle_mha(weights: GqlaWeights, config: GqlaConfig, tokens, s_q: int = 1) -> np.ndarray:
    """Brute-force reference attention for the trailing s_q positions.

    Materializes every per-head K/V through replicated up-projections and
    evaluates the causal attention with explicit loops, its own softmax, and
    rotations written out longhand. Intentionally shares no code with
    forward_gqa_path / forward_absorb_path so it can serve as their oracle.
    """
    tokens = _check_tokens(tokens, config, s_q)
    c = config
    length = tokens.shape[0]
    hpg = c.heads_per_group
    half = c.rope_head_dim // 2
    freqs = [c.rope_base ** (-2.0 * k / c.rope_head_dim) for k in range(half)]

    def rotate(vec, t):
        out = np.empty_like(vec)
        for k in range(half):
            a = t * freqs[k]
            ca, sa = math.cos(a), math.sin(a)
            out[2 * k] = vec[2 * k] * ca - vec[2 * k + 1] * sa
            out[2 * k + 1] = vec[2 * k] * sa + vec[2 * k + 1] * ca
        return out

    # Replicated per-head up-projections (head i uses its group's block).
    k_maps = []
    v_maps = []
    for i in range(c.num_heads):
        j = i // hpg
        k_maps.append(weights.k_up[j * c.head_dim:(j + 1) * c.head_dim])
        v_maps.append(weights.v_up[j * c.value_head_dim:(j + 1) * c.value_head_dim])

    # Fully materialized per-head keys/values for every position.
    keys = [[None] * c.num_heads for _ in range(length)]
    vals = [[None] * c.num_heads for _ in range(length)]
    k_ropes = []
    for s in range(length):
        latent = weights.kv_down @ tokens[s]
        k_ropes.append(rotate(weights.k_rope @ tokens[s], s))
        for i in range(c.num_heads):
            keys[s][i] = k_maps[i] @ latent
            vals[s][i] = v_maps[i] @ latent

    outputs = np.empty((s_q, c.model_dim))
    scale = 1.0 / math.sqrt(c.head_dim + c.rope_head_dim)
    for idx, t in enumerate(range(length - s_q, length)):
        c_q = weights.q_down @ tokens[t]
        per_head = []
        for i in range(c.num_heads):
            q_n = weights.q_up[i * c.head_dim:(i + 1) * c.head_dim] @ c_q
            q_r = rotate(weights.q_rope[i * c.rope_head_dim:(i + 1) * c.rope_head_dim] @ c_q, t)
            logits = []
            for s in range(t + 1):
                logits.append((float(np.dot(q_n, keys[s][i])) +
                               float(np.dot(q_r, k_ropes[s]))) * scale)
            m = max(logits)
            exps = [math.exp(l - m) for l in logits]
            z = sum(exps)
            o = np.zeros(c.value_head_dim)
            for s in range(t + 1):
                o += (exps[s] / z) * vals[s][i]
            per_head.append(o)
        outputs[idx] = weights.out_proj @ np.concatenate(per_head)
    return outputs
