"""Head-indexed latent checkpoints converted to the group-indexed dual-path form.

A head-indexed source (one K/V up-projection block per query head, i.e.
num_groups == num_heads) shares the joint latent but only decodes through the
absorbed path. The conversion recovers group-indexed up-projections by
per-group, side-separated PCA on up-projection activations, then folds the
square orthonormal factors into the query and output slices with no shape
change. The latent down-projection and the rotary pathway pass through
untouched, so the source's latent cache and absorbed kernel stay valid.
No gradient updates; calibration only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import model as gqla_model
from .errors import ParameterError, ShapeError
from .model import GqlaConfig, GqlaWeights, random_tokens
from .numerics import CovarianceAccumulator, accumulate, pca_factor, sym_eig
from .rope import apply_rope

# A head-indexed source is a GqlaWeights whose config has num_groups == num_heads.
MlaWeights = GqlaWeights


def _check_source(config: GqlaConfig) -> None:
    if config.num_groups != config.num_heads:
        raise ParameterError(
            "source must be head-indexed: num_groups == num_heads "
            f"(got {config.num_groups} groups for {config.num_heads} heads)")


def _check_groups(config: GqlaConfig, groups: int) -> int:
    if groups < 1 or config.num_heads % groups != 0:
        raise ParameterError(f"groups must divide num_heads ({config.num_heads}), got {groups}")
    return groups


def target_config(config: GqlaConfig, groups: int) -> GqlaConfig:
    """Config of the converted checkpoint: only the group count changes."""
    _check_source(config)
    _check_groups(config, groups)
    return replace(config, num_groups=groups)


@dataclass(frozen=True)
class GroupStats:
    """Per-group, per-side uncentered activation covariance accumulators."""

    groups: int
    key: tuple    # one CovarianceAccumulator per group, dim (h/g)*head_dim
    value: tuple  # one per group, dim (h/g)*value_head_dim


def _group_row_blocks(config: GqlaConfig, groups: int, per_head_dim: int):
    hpg = config.num_heads // groups
    block = hpg * per_head_dim
    return [(j * block, (j + 1) * block) for j in range(groups)]


def calibrate(weights: MlaWeights, config: GqlaConfig, calib, groups: int) -> GroupStats:
    """Accumulate per-group, per-side covariances of up-projection activations."""
    _check_source(config)
    _check_groups(config, groups)
    calib = np.asarray(calib, dtype=np.float64)
    if calib.ndim != 2 or calib.shape[0] < 1:
        raise ParameterError("calibration batch must be a non-empty (N, model_dim) array")
    if calib.shape[1] != config.model_dim:
        raise ShapeError(f"calibration dim {calib.shape[1]} != model_dim {config.model_dim}")
    latents = calib @ weights.kv_down.T  # (N, kv_rank)
    key_accs = []
    value_accs = []
    for lo, hi in _group_row_blocks(config, groups, config.head_dim):
        acts = latents @ weights.k_up[lo:hi].T
        key_accs.append(accumulate(CovarianceAccumulator.empty(hi - lo), acts))
    for lo, hi in _group_row_blocks(config, groups, config.value_head_dim):
        acts = latents @ weights.v_up[lo:hi].T
        value_accs.append(accumulate(CovarianceAccumulator.empty(hi - lo), acts))
    return GroupStats(groups=groups, key=tuple(key_accs), value=tuple(value_accs))


@dataclass(frozen=True)
class GroupFactorization:
    """Per-group, per-side factors W_j ~ u_j @ v_j.

    u_j is column-orthonormal ((h/g)*dim x rank), v_j = u_j^T W_j
    (rank x kv_rank). energy_* hold the per-group retained activation energy
    fraction; stats keeps the accumulators the factors were built from.
    """

    groups: int
    key_rank: int
    value_rank: int
    key_u: tuple
    key_v: tuple
    value_u: tuple
    value_v: tuple
    key_energy: tuple
    value_energy: tuple
    stats: GroupStats


def factor(weights: MlaWeights, config: GqlaConfig, stats: GroupStats,
           key_rank: int | None = None, value_rank: int | None = None) -> GroupFactorization:
    """Side-separated PCA of each group's stacked up-projection block.

    Default ranks are the canonical ones (head_dim and value_head_dim), which
    make every per-head sub-block square and therefore absorbable.
    """
    _check_source(config)
    groups = stats.groups
    hpg = config.num_heads // groups
    key_rank = config.head_dim if key_rank is None else key_rank
    value_rank = config.value_head_dim if value_rank is None else value_rank
    if not 1 <= key_rank <= hpg * config.head_dim:
        raise ParameterError(f"key rank {key_rank} outside [1, {hpg * config.head_dim}]")
    if not 1 <= value_rank <= hpg * config.value_head_dim:
        raise ParameterError(f"value rank {value_rank} outside [1, {hpg * config.value_head_dim}]")

    def side(proj, accs, per_head_dim, rank):
        us, vs, energies = [], [], []
        for j, (lo, hi) in enumerate(_group_row_blocks(config, groups, per_head_dim)):
            u, v = pca_factor(proj[lo:hi], accs[j], rank)
            lam = sym_eig(accs[j].normalized()).eigenvalues
            total = float(lam.sum())
            energies.append(float(lam[:rank].sum()) / total if total > 0 else 1.0)
            us.append(u)
            vs.append(v)
        return tuple(us), tuple(vs), tuple(energies)

    key_u, key_v, key_energy = side(weights.k_up, stats.key, config.head_dim, key_rank)
    value_u, value_v, value_energy = side(weights.v_up, stats.value,
                                          config.value_head_dim, value_rank)
    return GroupFactorization(groups=groups, key_rank=key_rank, value_rank=value_rank,
                              key_u=key_u, key_v=key_v, value_u=value_u, value_v=value_v,
                              key_energy=key_energy, value_energy=value_energy, stats=stats)


def absorb_factors(weights: MlaWeights, config: GqlaConfig,
                   fact: GroupFactorization) -> GqlaWeights:
    """Fold the square per-head factor blocks into the query/output slices.

    The group-indexed up-projections become the stacked v_j factors (first
    dimension shrinks by heads-per-group); query and output projections keep
    their shapes; the latent and rotary projections pass through unchanged.
    Requires canonical ranks so every per-head block of u_j is square.
    """
    _check_source(config)
    if fact.key_rank != config.head_dim or fact.value_rank != config.value_head_dim:
        raise ParameterError(
            "absorption needs canonical ranks (square per-head blocks): "
            f"got key rank {fact.key_rank} (head_dim {config.head_dim}), "
            f"value rank {fact.value_rank} (value_head_dim {config.value_head_dim})")
    groups = fact.groups
    hpg = config.num_heads // groups
    d, dv = config.head_dim, config.value_head_dim

    q_up = np.empty_like(weights.q_up)
    out_proj = np.empty_like(weights.out_proj)
    for i in range(config.num_heads):
        j, pos = divmod(i, hpg)
        u_k = fact.key_u[j][pos * d:(pos + 1) * d]     # (d, d) square
        u_v = fact.value_u[j][pos * dv:(pos + 1) * dv]  # (dv, dv) square
        q_up[i * d:(i + 1) * d] = u_k.T @ weights.q_up[i * d:(i + 1) * d]
        out_proj[:, i * dv:(i + 1) * dv] = weights.out_proj[:, i * dv:(i + 1) * dv] @ u_v
    converted = GqlaWeights(
        q_down=weights.q_down.copy(),
        q_up=q_up,
        q_rope=weights.q_rope.copy(),
        kv_down=weights.kv_down.copy(),
        k_up=np.vstack(fact.key_v),
        v_up=np.vstack(fact.value_v),
        k_rope=weights.k_rope.copy(),
        out_proj=out_proj,
    )
    converted.validate(target_config(config, groups))
    return converted


def unfused_forward(weights: MlaWeights, config: GqlaConfig, fact: GroupFactorization,
                    tokens, s_q: int = 1) -> np.ndarray:
    """Forward with the PCA factors applied but NOT absorbed.

    Straight-line evaluation of the factored source: head i scores against
    u_j v_j-approximated keys and reads u_j v_j-approximated values through
    the original output projection. Algebraically identical to running the
    absorbed weights; the gap between the two is pure floating-point noise.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != config.model_dim:
        raise ShapeError(f"tokens must be (L, {config.model_dim}), got {tokens.shape}")
    length = tokens.shape[0]
    if length < 1 or not 1 <= s_q <= length:
        raise ParameterError("empty sequence or s_q out of range")
    hpg = config.num_heads // fact.groups
    d, dv, dr = config.head_dim, config.value_head_dim, config.rope_head_dim
    spec = config.rope_spec()
    scale = 1.0 / math.sqrt(d + dr)

    latents = tokens @ weights.kv_down.T
    k_rope = np.stack([apply_rope(spec, weights.k_rope @ tokens[t], t) for t in range(length)])
    group_k = [latents @ fact.key_v[j].T for j in range(fact.groups)]    # (L, key_rank)
    group_v = [latents @ fact.value_v[j].T for j in range(fact.groups)]  # (L, value_rank)

    outputs = np.empty((s_q, config.model_dim))
    for idx, t in enumerate(range(length - s_q, length)):
        c_q = weights.q_down @ tokens[t]
        per_head = []
        for i in range(config.num_heads):
            j, pos = divmod(i, hpg)
            q_n = weights.q_up[i * d:(i + 1) * d] @ c_q
            q_r = apply_rope(spec, weights.q_rope[i * dr:(i + 1) * dr] @ c_q, t)
            keys = group_k[j][: t + 1] @ fact.key_u[j][pos * d:(pos + 1) * d].T
            logits = (keys @ q_n + k_rope[: t + 1] @ q_r) * scale
            attn = np.exp(logits - logits.max())
            attn /= attn.sum()
            vals = group_v[j][: t + 1] @ fact.value_u[j][pos * dv:(pos + 1) * dv].T
            per_head.append(attn @ vals)
        outputs[idx] = weights.out_proj @ np.concatenate(per_head)
    return outputs


@dataclass(frozen=True)
class MlaConversionReport:
    """Diagnostics for one head-indexed-to-grouped conversion."""

    groups: int
    key_energy: tuple
    value_energy: tuple
    output_deviation: float
    output_scale: float
    latent_elements_per_token: int

    def lines(self) -> list:
        key = ", ".join(f"{e:.6f}" for e in self.key_energy)
        value = ", ".join(f"{e:.6f}" for e in self.value_energy)
        return [
            f"groups:                  {self.groups}",
            f"key energy retained:     [{key}]",
            f"value energy retained:   [{value}]",
            f"latent cache:            {self.latent_elements_per_token} elements/token "
            "(unchanged by conversion)",
            f"output deviation:        {self.output_deviation:.3e} "
            f"(source output scale {self.output_scale:.3e})",
        ]


_PROBE_SEED = 46301


def convert(weights: MlaWeights, config: GqlaConfig, calib, groups: int):
    """calibrate -> factor (canonical ranks) -> absorb.

    Returns (GqlaWeights, MlaConversionReport); the converted config is
    target_config(config, groups). Held-out probe sequences measure the
    end-to-end output deviation against the source.
    """
    stats = calibrate(weights, config, calib, groups)
    fact = factor(weights, config, stats)
    converted = absorb_factors(weights, config, fact)
    tgt = target_config(config, groups)

    dev, scale = 0.0, 0.0
    for n in range(2):
        probe = random_tokens(10, config.model_dim, _PROBE_SEED + n)
        ref, _ = gqla_model.forward_gqa_path(weights, config, probe, 2)
        got, _ = gqla_model.forward_gqa_path(converted, tgt, probe, 2)
        dev = max(dev, float(np.max(np.abs(got - ref))))
        scale = max(scale, float(np.max(np.abs(ref))))
    report = MlaConversionReport(
        groups=groups,
        key_energy=fact.key_energy,
        value_energy=fact.value_energy,
        output_deviation=dev,
        output_scale=scale,
        latent_elements_per_token=config.kv_rank + config.rope_head_dim,
    )
    return converted, report
