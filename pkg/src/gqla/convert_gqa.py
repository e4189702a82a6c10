"""Grouped-query checkpoint conversion into the dual-path latent form.

Four stages, the first two exact and the last two calibration-driven:

1. merge_heads: restack the source K/V projections into one joint latent and
   introduce group-indexed selector blocks. Pure reparameterization; the
   merged module is still standard grouped-query attention.
2. rorope_align: per K/V head, a rotation block-diagonal over rotary pairs is
   applied to the key path and folded into the matching query slices. Scores
   are preserved exactly; per-pair energy concentrates on the leading
   coordinate so a shared rotary basis becomes available.
3. freqfold_compress: the key coordinates are partitioned into one band per
   rotary frequency (2g dims each) and PCA runs inside each band on the
   pair-structured (complex) covariance, so basis vectors keep their rotary
   partners. The highest-energy directions keep their rotation and become the
   shared decoupled key; the rest become position-free latent candidates.
4. balance_and_joint_pca: the position-free key part and the values are
   rescaled to a common Frobenius activation norm (inverse scales folded back
   so the forward pass is untouched) and jointly compressed to the target
   latent rank.

No gradient updates anywhere; calibration is a seeded synthetic token stream
at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as gqla_model
from .errors import DegenerateCalibrationError, ParameterError, ShapeError
from .model import GqlaConfig, GqlaWeights, random_tokens
from .numerics import CovarianceAccumulator, accumulate, pca_factor, sym_eig
from .rope import RopeSpec, apply_folded_rope


@dataclass(frozen=True)
class GqaWeights:
    """A source grouped-query attention block.

    q_proj: (num_heads*head_dim, model_dim); k_proj/v_proj:
    (num_groups*head_dim, model_dim); out_proj: (model_dim,
    num_heads*head_dim). Queries and keys are rotated with the per-head
    rope ladder (dim head_dim) at their positions.
    """

    num_heads: int
    num_groups: int
    head_dim: int
    model_dim: int
    rope_base: float
    q_proj: np.ndarray
    k_proj: np.ndarray
    v_proj: np.ndarray
    out_proj: np.ndarray

    def __post_init__(self):
        if self.num_heads % self.num_groups != 0:
            raise ParameterError("num_heads must be divisible by num_groups")
        if self.head_dim % 2 != 0:
            raise ParameterError("head_dim must be even (rotary pairs)")

    @property
    def heads_per_group(self) -> int:
        return self.num_heads // self.num_groups

    def rope_spec(self) -> RopeSpec:
        return RopeSpec(self.head_dim, self.rope_base)

    def validate(self) -> None:
        h, g, d, dm = self.num_heads, self.num_groups, self.head_dim, self.model_dim
        expect = {"q_proj": (h * d, dm), "k_proj": (g * d, dm),
                  "v_proj": (g * d, dm), "out_proj": (dm, h * d)}
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name} contains non-finite entries")


def init_random_gqa(num_heads: int, num_groups: int, head_dim: int, model_dim: int,
                    seed: int, rope_base: float = 10000.0) -> GqaWeights:
    """Seeded random source block, uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    rng = np.random.default_rng(seed)
    b = 1.0 / math.sqrt(model_dim)
    bo = 1.0 / math.sqrt(num_heads * head_dim)
    return GqaWeights(
        num_heads=num_heads, num_groups=num_groups, head_dim=head_dim,
        model_dim=model_dim, rope_base=rope_base,
        q_proj=rng.uniform(-b, b, (num_heads * head_dim, model_dim)),
        k_proj=rng.uniform(-b, b, (num_groups * head_dim, model_dim)),
        v_proj=rng.uniform(-b, b, (num_groups * head_dim, model_dim)),
        out_proj=rng.uniform(-bo, bo, (model_dim, num_heads * head_dim)),
    )


def _check_sequence(tokens, model_dim: int, s_q: int):
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != model_dim:
        raise ShapeError(f"tokens must be (L, {model_dim}), got {tokens.shape}")
    if tokens.shape[0] < 1:
        raise ParameterError("token sequence must be non-empty")
    if not 1 <= s_q <= tokens.shape[0]:
        raise ParameterError(f"s_q must be in [1, {tokens.shape[0]}], got {s_q}")
    return tokens


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward_gqa_source(src: GqaWeights, tokens, s_q: int = 1) -> np.ndarray:
    """Reference forward of the source block for the trailing s_q positions."""
    tokens = _check_sequence(tokens, src.model_dim, s_q)
    length = tokens.shape[0]
    h, g, d = src.num_heads, src.num_groups, src.head_dim
    spec = src.rope_spec()
    q = np.stack([apply_folded_rope(spec, src.q_proj @ tokens[t], t) for t in range(length)])
    k = np.stack([apply_folded_rope(spec, src.k_proj @ tokens[t], t) for t in range(length)])
    v = tokens @ src.v_proj.T
    q = q.reshape(length, h, d)
    k = k.reshape(length, g, d)
    v = v.reshape(length, g, d)
    gi = np.arange(h) // src.heads_per_group
    outputs = np.empty((s_q, src.model_dim))
    scale = 1.0 / math.sqrt(d)
    for idx, t in enumerate(range(length - s_q, length)):
        logits = np.einsum("hd,shd->hs", q[t], k[: t + 1][:, gi, :]) * scale
        attn = _softmax_rows(logits)
        o = np.einsum("hs,shd->hd", attn, v[: t + 1][:, gi, :])
        outputs[idx] = src.out_proj @ o.reshape(-1)
    return outputs


@dataclass(frozen=True)
class MergedWeights:
    """Stage-1 form: one stacked K/V latent with group-indexed selectors.

    kv_down stacks the key rows over the value rows (2*g*head_dim x
    model_dim); k_sel / v_sel hold per-group (head_dim x g*head_dim) selector
    blocks, sparse identities at initialization. The rotary ladder folds over
    the g*head_dim latent, repeating every head_dim coordinates.
    """

    num_heads: int
    num_groups: int
    head_dim: int
    model_dim: int
    rope_base: float
    q_proj: np.ndarray   # (num_heads*head_dim, model_dim)
    kv_down: np.ndarray  # (2*num_groups*head_dim, model_dim)
    k_sel: np.ndarray    # (num_groups, head_dim, num_groups*head_dim)
    v_sel: np.ndarray    # (num_groups, head_dim, num_groups*head_dim)
    out_proj: np.ndarray

    @property
    def heads_per_group(self) -> int:
        return self.num_heads // self.num_groups

    @property
    def key_width(self) -> int:
        return self.num_groups * self.head_dim

    def rope_spec(self) -> RopeSpec:
        return RopeSpec(self.head_dim, self.rope_base)

    def key_rows(self) -> np.ndarray:
        return self.kv_down[: self.key_width]

    def value_rows(self) -> np.ndarray:
        return self.kv_down[self.key_width:]


def merge_heads(src: GqaWeights) -> MergedWeights:
    """Exact restack of a source block; selectors start as sparse identities."""
    src.validate()
    g, d = src.num_groups, src.head_dim
    sel = np.zeros((g, d, g * d))
    for j in range(g):
        sel[j, :, j * d:(j + 1) * d] = np.eye(d)
    return MergedWeights(
        num_heads=src.num_heads, num_groups=g, head_dim=d,
        model_dim=src.model_dim, rope_base=src.rope_base,
        q_proj=src.q_proj.copy(),
        kv_down=np.vstack([src.k_proj, src.v_proj]),
        k_sel=sel, v_sel=sel.copy(),
        out_proj=src.out_proj.copy(),
    )


def _merged_projections(merged: MergedWeights, tokens: np.ndarray):
    """Per-token rotated key latents and raw value latents."""
    length = tokens.shape[0]
    spec = merged.rope_spec()
    c = tokens @ merged.kv_down.T
    c_k, c_v = c[:, : merged.key_width], c[:, merged.key_width:]
    k_hat = np.stack([apply_folded_rope(spec, c_k[t], t) for t in range(length)])
    return c_k, c_v, k_hat


def _merged_query(merged: MergedWeights, x: np.ndarray, t: int) -> np.ndarray:
    """Rotated, selector-embedded queries for one position: (num_heads, key_width)."""
    spec = merged.rope_spec()
    q = (merged.q_proj @ x).reshape(merged.num_heads, merged.head_dim)
    out = np.empty((merged.num_heads, merged.key_width))
    for i in range(merged.num_heads):
        j = i // merged.heads_per_group
        out[i] = apply_folded_rope(spec, merged.k_sel[j].T @ q[i], t)
    return out


def merged_forward(merged: MergedWeights, tokens, s_q: int = 1) -> np.ndarray:
    """Forward pass of the merged form for the trailing s_q positions."""
    tokens = _check_sequence(tokens, merged.model_dim, s_q)
    length = tokens.shape[0]
    _, c_v, k_hat = _merged_projections(merged, tokens)
    gi = np.arange(merged.num_heads) // merged.heads_per_group
    scale = 1.0 / math.sqrt(merged.head_dim)
    outputs = np.empty((s_q, merged.model_dim))
    for idx, t in enumerate(range(length - s_q, length)):
        q_hat = _merged_query(merged, tokens[t], t)
        logits = (q_hat @ k_hat[: t + 1].T) * scale
        attn = _softmax_rows(logits)
        o_hat = attn @ c_v[: t + 1]  # (num_heads, key_width)
        o = np.einsum("hdw,hw->hd", merged.v_sel[gi], o_hat)
        outputs[idx] = merged.out_proj @ o.reshape(-1)
    return outputs


def merged_scores(merged: MergedWeights, tokens) -> np.ndarray:
    """Causal pre-softmax logits (num_heads, L, L); upper triangle left zero."""
    tokens = _check_sequence(tokens, merged.model_dim, 1)
    length = tokens.shape[0]
    _, _, k_hat = _merged_projections(merged, tokens)
    scale = 1.0 / math.sqrt(merged.head_dim)
    scores = np.zeros((merged.num_heads, length, length))
    for t in range(length):
        q_hat = _merged_query(merged, tokens[t], t)
        scores[:, t, : t + 1] = (q_hat @ k_hat[: t + 1].T) * scale
    return scores


@dataclass(frozen=True)
class RoRopeRotations:
    """Per K/V head rotations, block-diagonal over rotary pairs."""

    per_head: tuple

    def __len__(self) -> int:
        return len(self.per_head)


def identity_rotations(merged: MergedWeights) -> RoRopeRotations:
    return RoRopeRotations(tuple(np.eye(merged.head_dim) for _ in range(merged.num_groups)))


def apply_head_rotations(merged: MergedWeights, rotations: RoRopeRotations) -> MergedWeights:
    """Rotate each head's key rows and fold the matching rotation into the
    query slices; attention scores are unchanged because each block rotates
    within a single rotary pair and therefore commutes with the rotary map."""
    if len(rotations) != merged.num_groups:
        raise ShapeError(f"expected {merged.num_groups} rotations, got {len(rotations)}")
    d = merged.head_dim
    kv_down = merged.kv_down.copy()
    for j, rot in enumerate(rotations.per_head):
        if rot.shape != (d, d):
            raise ShapeError(f"rotation {j} has shape {rot.shape}, expected {(d, d)}")
        kv_down[j * d:(j + 1) * d] = rot @ kv_down[j * d:(j + 1) * d]
    q_proj = merged.q_proj.copy()
    for i in range(merged.num_heads):
        rot = rotations.per_head[i // merged.heads_per_group]
        q_proj[i * d:(i + 1) * d] = rot @ q_proj[i * d:(i + 1) * d]
    return MergedWeights(
        num_heads=merged.num_heads, num_groups=merged.num_groups,
        head_dim=d, model_dim=merged.model_dim, rope_base=merged.rope_base,
        q_proj=q_proj, kv_down=kv_down,
        k_sel=merged.k_sel.copy(), v_sel=merged.v_sel.copy(),
        out_proj=merged.out_proj.copy(),
    )


def _key_covariance(merged: MergedWeights, calib: np.ndarray) -> CovarianceAccumulator:
    acc = CovarianceAccumulator.empty(merged.key_width)
    return accumulate(acc, calib @ merged.key_rows().T)


def rorope_align(merged: MergedWeights, calib) -> tuple:
    """Concentrate each head's per-pair key energy on the leading pair coordinate.

    For every head and rotary pair, the 2-dim covariance of the pre-rotation
    key activations is eigendecomposed and the pure rotation taking the
    leading eigenvector to the first coordinate is applied (keys) and folded
    back (queries). All heads end up sharing the per-pair leading axis as
    their common rotary reference.
    """
    calib = np.asarray(calib, dtype=np.float64)
    if calib.ndim != 2 or calib.shape[0] < 1:
        raise ParameterError("calibration batch must be a non-empty (N, model_dim) array")
    if calib.shape[1] != merged.model_dim:
        raise ShapeError(f"calibration dim {calib.shape[1]} != model_dim {merged.model_dim}")
    cov = _key_covariance(merged, calib).normalized()
    d = merged.head_dim
    per_head = []
    for j in range(merged.num_groups):
        rot = np.eye(d)
        for p in range(d // 2):
            a = j * d + 2 * p
            pair_cov = cov[a:a + 2, a:a + 2]
            lead = sym_eig(pair_cov).eigenvectors[:, 0]
            rot[2 * p:2 * p + 2, 2 * p:2 * p + 2] = np.array(
                [[lead[0], lead[1]], [-lead[1], lead[0]]])
        per_head.append(rot)
    rotations = RoRopeRotations(tuple(per_head))
    return apply_head_rotations(merged, rotations), rotations


@dataclass(frozen=True)
class FreqFoldResult:
    """Band-wise split of the key coordinates into rotary and position-free parts.

    rope_basis (key_width x rope_dim) projects onto the retained rotary
    directions; columns come in rotary pairs, each pair supported on a single
    frequency band, placed in band-ascending order. nope_basis (key_width x
    key_width - rope_dim) spans the complement and feeds the joint latent
    compression. band_partition lists the key-coordinate indices of each
    frequency band; retained names each kept (band, direction) pair and
    band_energies holds the per-band direction energies.
    """

    rope_basis: np.ndarray
    nope_basis: np.ndarray
    band_partition: tuple
    retained: tuple
    band_energies: tuple


def _band_complex_pca(cov: np.ndarray, band: list, num_groups: int):
    """Eigenpairs of the pair-structured covariance of one band.

    The band's 2g coordinates are read as g complex numbers; the Hermitian
    covariance is eigendecomposed and each complex eigenvector is returned as
    the two real paired columns it spans. Only complex-linear mixtures are
    considered, which is exactly the set of maps commuting with the common
    in-band rotation.
    """
    g = num_groups
    hermitian = np.empty((g, g), dtype=np.complex128)
    for a in range(g):
        xa, ya = band[2 * a], band[2 * a + 1]
        for b in range(g):
            xb, yb = band[2 * b], band[2 * b + 1]
            hermitian[a, b] = (cov[xa, xb] + cov[ya, yb]) + 1j * (cov[ya, xb] - cov[xa, yb])
    hermitian = (hermitian + hermitian.conj().T) / 2.0
    w, u = np.linalg.eigh(hermitian)
    order = np.argsort(-w, kind="stable")
    w, u = w[order], u[:, order]
    pairs = []
    for r in range(g):
        col = u[:, r]
        lead = int(np.argmax(np.abs(col)))
        phase = col[lead] / abs(col[lead]) if abs(col[lead]) > 0 else 1.0
        col = col * np.conj(phase)
        v1 = np.empty(2 * g)
        v2 = np.empty(2 * g)
        v1[0::2], v1[1::2] = col.real, col.imag
        v2[0::2], v2[1::2] = -col.imag, col.real
        pairs.append((v1, v2))
    return w, pairs


def freqfold_compress(aligned: MergedWeights, calib, kv_rank: int,
                      rope_dim: int) -> FreqFoldResult:
    """Split the key coordinates into a rotary remainder and latent candidates.

    rope_dim/2 directions are retained greedily by energy across all bands
    (ties toward the lower angular frequency, i.e. the later band) and keep
    their rotation; everything else becomes a position-free candidate for the
    joint compression. Pairs are never split between the two outputs.
    """
    g, d = aligned.num_groups, aligned.head_dim
    width = aligned.key_width
    if rope_dim % 2 != 0 or rope_dim < 0:
        raise ParameterError(f"rope_dim must be a non-negative even count, got {rope_dim}")
    if rope_dim > width:
        raise ParameterError(f"rope_dim {rope_dim} exceeds the key width {width}")
    if kv_rank < 1 or kv_rank + rope_dim > 2 * width:
        raise ParameterError(
            f"rank budget kv_rank={kv_rank}, rope_dim={rope_dim} is infeasible "
            f"for a {2 * width}-element source cache")
    calib = np.asarray(calib, dtype=np.float64)
    if calib.ndim != 2 or calib.shape[0] < 1:
        raise ParameterError("calibration batch must be a non-empty (N, model_dim) array")
    cov = _key_covariance(aligned, calib).normalized()

    bands = [[j * d + 2 * p + e for j in range(g) for e in (0, 1)] for p in range(d // 2)]
    energies = []
    basis_pairs = []
    entries = []
    for p, band in enumerate(bands):
        w, pairs = _band_complex_pca(cov, band, g)
        energies.append(w)
        basis_pairs.append(pairs)
        for r in range(g):
            entries.append((w[r], p, r))
    # Greedy retention by energy; on ties prefer the lower angular frequency
    # (larger band index), then the leading direction.
    entries.sort(key=lambda e: (-e[0], -e[1], e[2]))
    retained = sorted((p, r) for _, p, r in entries[: rope_dim // 2])
    dropped = sorted((p, r) for _, p, r in entries[rope_dim // 2:])

    def place(selection):
        cols = np.zeros((width, 2 * len(selection)))
        for m, (p, r) in enumerate(selection):
            v1, v2 = basis_pairs[p][r]
            cols[bands[p], 2 * m] = v1
            cols[bands[p], 2 * m + 1] = v2
        return cols

    return FreqFoldResult(
        rope_basis=place(retained),
        nope_basis=place(dropped),
        band_partition=tuple(tuple(b) for b in bands),
        retained=tuple(retained),
        band_energies=tuple(np.asarray(w) for w in energies),
    )


@dataclass(frozen=True)
class JointCompression:
    """Stage-4 output: the compressed latent map and per-group up-projections.

    kv_down is the new (kv_rank x model_dim) joint down-projection; k_up /
    v_up are the group-indexed up-projections with the balancing scales
    already inverted, so the composed forward map is unchanged by balancing.
    energy_* are per-side retained activation energy fractions (unscaled
    units).
    """

    kv_down: np.ndarray
    k_up: np.ndarray
    v_up: np.ndarray
    scale_key: float
    scale_value: float
    energy_key: float
    energy_value: float


def balance_and_joint_pca(aligned: MergedWeights, calib, kv_rank: int,
                          freqfold: FreqFoldResult | None = None,
                          balance: bool = True) -> JointCompression:
    """Norm-balance the position-free key part against the values, then
    compress both jointly to kv_rank with a covariance-weighted PCA.

    Without a freqfold result every key coordinate is treated as
    position-free (useful for testing the balancing semantics alone).
    """
    g, d = aligned.num_groups, aligned.head_dim
    width = aligned.key_width
    calib = np.asarray(calib, dtype=np.float64)
    if calib.ndim != 2 or calib.shape[0] < 1:
        raise ParameterError("calibration batch must be a non-empty (N, model_dim) array")
    nope_proj = np.eye(width) if freqfold is None else freqfold.nope_basis
    d_n = nope_proj.shape[1]
    if kv_rank < 1 or kv_rank > d_n + width:
        raise ParameterError(
            f"kv_rank {kv_rank} is outside [1, {d_n + width}] for this rank budget")

    act_k = (calib @ aligned.key_rows().T) @ nope_proj     # (N, d_n)
    act_v = calib @ aligned.value_rows().T                 # (N, key_width)
    norm_k = float(np.linalg.norm(act_k)) if d_n else 0.0
    norm_v = float(np.linalg.norm(act_v))
    if norm_v == 0.0 or (d_n and norm_k == 0.0):
        raise DegenerateCalibrationError("a side has zero activation energy under calibration")
    # Balancing only makes sense for comparable sides: amplifying a side that
    # is numerical dust (e.g. all key energy already lives in the rotary
    # remainder) would promote noise to signal parity, so it is skipped.
    comparable = d_n and min(norm_k, norm_v) >= 1e-9 * max(norm_k, norm_v)
    if balance and comparable:
        target = math.sqrt(norm_k * norm_v)
        scale_k, scale_v = target / norm_k, target / norm_v
    else:
        scale_k, scale_v = 1.0, 1.0

    w_map = np.vstack([scale_k * (nope_proj.T @ aligned.key_rows()),
                       scale_v * aligned.value_rows()])
    stacked = np.hstack([scale_k * act_k, scale_v * act_v])
    sigma = accumulate(CovarianceAccumulator.empty(d_n + width), stacked)
    u, v = pca_factor(w_map, sigma, kv_rank)
    u_k, u_v = u[:d_n], u[d_n:]

    k_up = np.vstack([(nope_proj[j * d:(j + 1) * d] @ u_k) / scale_k for j in range(g)]) \
        if d_n else np.zeros((width, kv_rank))
    v_up = np.vstack([u_v[j * d:(j + 1) * d] / scale_v for j in range(g)])

    coords = stacked @ u
    recon = coords @ u.T
    def retained(a, b):
        total = float(np.linalg.norm(a) ** 2)
        if total == 0.0:
            return 1.0
        return 1.0 - float(np.linalg.norm(a - b) ** 2) / total
    energy_key = retained(stacked[:, :d_n], recon[:, :d_n]) if d_n else 1.0
    energy_value = retained(stacked[:, d_n:], recon[:, d_n:])
    return JointCompression(kv_down=v, k_up=k_up, v_up=v_up,
                            scale_key=scale_k, scale_value=scale_v,
                            energy_key=energy_key, energy_value=energy_value)


@dataclass(frozen=True)
class ConversionReport:
    """Per-stage diagnostics of one conversion run."""

    source_elements_per_token: int
    latent_elements_per_token: int
    cache_ratio: float
    merge_deviation: float
    score_deviation: float
    rotary_energy_retained: float
    key_energy_retained: float
    value_energy_retained: float
    balance_scale_key: float
    balance_scale_value: float
    output_deviation: float
    output_scale: float

    @property
    def cache_ratio_text(self) -> str:
        return f"{self.cache_ratio * 100:g}%"

    def lines(self) -> list:
        return [
            f"merge exactness:        max deviation {self.merge_deviation:.3e}",
            f"rotary alignment:       max score deviation {self.score_deviation:.3e}",
            f"rotary energy retained: {self.rotary_energy_retained:.6f}",
            f"key energy retained:    {self.key_energy_retained:.6f}",
            f"value energy retained:  {self.value_energy_retained:.6f}",
            f"balance scales:         key {self.balance_scale_key:.6g}, "
            f"value {self.balance_scale_value:.6g}",
            f"cache ratio:            {self.latent_elements_per_token}/"
            f"{self.source_elements_per_token} elements/token = {self.cache_ratio_text}",
            f"output deviation:       {self.output_deviation:.3e} "
            f"(source output scale {self.output_scale:.3e})",
        ]


_PROBE_SEED = 91151


def convert(src: GqaWeights, calib, target: GqlaConfig):
    """Run the full pipeline and emit dual-path weights for the target config.

    Returns (GqlaWeights, ConversionReport). The target must match the source
    head count, group count, head dim (keys and values), rotary base and
    model dim, and use q_rank == model_dim: queries are not compressed by
    this route, so the emitted query down-projection is the identity.
    """
    src.validate()
    checks = [
        (target.num_heads == src.num_heads, "num_heads"),
        (target.num_groups == src.num_groups, "num_groups"),
        (target.head_dim == src.head_dim, "head_dim"),
        (target.value_head_dim == src.head_dim, "value_head_dim"),
        (target.model_dim == src.model_dim, "model_dim"),
        (target.rope_base == src.rope_base, "rope_base"),
        (target.q_rank == src.model_dim, "q_rank (must equal model_dim)"),
    ]
    for ok, name in checks:
        if not ok:
            raise ParameterError(f"target config incompatible with source: {name}")

    h, g, d, dm = src.num_heads, src.num_groups, src.head_dim, src.model_dim
    d_r = target.rope_head_dim

    merged = merge_heads(src)
    aligned, _ = rorope_align(merged, calib)
    folded = freqfold_compress(aligned, calib, target.kv_rank, d_r)
    joint = balance_and_joint_pca(aligned, calib, target.kv_rank, freqfold=folded)

    # The merged form scores with 1/sqrt(head_dim); the emitted weights run
    # under the model's 1/sqrt(head_dim + rope_head_dim), so queries carry the
    # compensating factor.
    q_scale = math.sqrt((d + d_r) / d)
    q_rope_rows = []
    for i in range(h):
        j = i // src.heads_per_group
        block = folded.rope_basis[j * d:(j + 1) * d]  # (head_dim, rope_dim)
        q_rope_rows.append(q_scale * (block.T @ aligned.q_proj[i * d:(i + 1) * d]))
    weights = GqlaWeights(
        q_down=np.eye(dm),
        q_up=q_scale * aligned.q_proj,
        q_rope=np.vstack(q_rope_rows),
        kv_down=joint.kv_down,
        k_up=joint.k_up,
        v_up=joint.v_up,
        k_rope=folded.rope_basis.T @ aligned.key_rows(),
        out_proj=src.out_proj.copy(),
    )
    weights.validate(target)

    # Probe diagnostics: merge exactness, score invariance, end-to-end output
    # deviation against the source on held-out sequences.
    probes = [random_tokens(10, dm, _PROBE_SEED + n) for n in range(2)]
    merge_dev = max(float(np.max(np.abs(
        merged_forward(merged, p, 2) - forward_gqa_source(src, p, 2)))) for p in probes)
    score_dev = max(float(np.max(np.abs(
        merged_scores(aligned, p) - merged_scores(merged, p)))) for p in probes)
    out_dev, out_scale = 0.0, 0.0
    for p in probes:
        ref = forward_gqa_source(src, p, 2)
        got, _ = gqla_model.forward_gqa_path(weights, target, p, 2)
        out_dev = max(out_dev, float(np.max(np.abs(got - ref))))
        out_scale = max(out_scale, float(np.max(np.abs(ref))))

    total_energy = sum(float(np.sum(w)) for w in folded.band_energies)
    kept_energy = sum(float(folded.band_energies[p][r]) for p, r in folded.retained)
    report = ConversionReport(
        source_elements_per_token=2 * g * d,
        latent_elements_per_token=target.kv_rank + d_r,
        cache_ratio=(target.kv_rank + d_r) / (2 * g * d),
        merge_deviation=merge_dev,
        score_deviation=score_dev,
        rotary_energy_retained=(kept_energy / total_energy) if total_energy > 0 else 1.0,
        key_energy_retained=joint.energy_key,
        value_energy_retained=joint.energy_value,
        balance_scale_key=joint.scale_key,
        balance_scale_value=joint.scale_value,
        output_deviation=out_dev,
        output_scale=out_scale,
    )
    return weights, report
