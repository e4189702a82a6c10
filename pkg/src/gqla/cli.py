"""Command-line surface: verify, convert, roofline, sparse-check.

Reports go to stdout, diagnostics to stderr. Exit codes: 0 success, 1 a
numerical check failed, 2 usage or input errors. Every command is
deterministic given its flags; the GQLA_SEED environment variable overrides
the default seed 0.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import convert_gqa, convert_mla, roofline, sparse
from . import io as gqck
from . import model as gqla_model
from .errors import GqlaError
from .model import GqlaConfig, canonical_config, random_tokens


def _default_seed() -> int:
    return int(os.environ.get("GQLA_SEED", "0"))


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _load_checkpoint(path: str, strict: bool = True):
    try:
        return gqck.read_checkpoint(path, strict=strict)
    except (OSError, GqlaError) as exc:
        _err(f"cannot read checkpoint {path!r}: {exc}")
        return None


def _finite_leq(value: float, bound: float) -> bool:
    return math.isfinite(value) and value <= bound


def cmd_verify(args) -> int:
    # lenient load: corrupted payload values should fail verification (exit 1),
    # not parsing (exit 2)
    loaded = _load_checkpoint(args.checkpoint, strict=False)
    if loaded is None:
        return 2
    kind, config, weights = loaded
    if kind != gqck.KIND_GQLA:
        _err(f"verify needs a GQLA checkpoint, got kind {kind}")
        return 2
    tokens = random_tokens(args.seq_len, config.model_dim, args.seed)
    out_gqa, expanded = gqla_model.forward_gqa_path(weights, config, tokens, args.sq)
    out_abs, latent = gqla_model.forward_absorb_path(weights, config, tokens, args.sq)
    out_oracle = gqla_model.oracle_mha(weights, config, tokens, args.sq)
    scale = 1.0 + float(np.max(np.abs(out_gqa)))

    dev_paths = float(np.max(np.abs(out_gqa - out_abs)))
    dev_gqa = float(np.max(np.abs(out_gqa - out_oracle)))
    dev_abs = float(np.max(np.abs(out_abs - out_oracle)))
    try:
        recovered, residuals = gqla_model.cache_compress(expanded, weights)
        dev_cache = float(np.max(np.abs(recovered.kv - latent.kv)))
        rebuilt = gqla_model.cache_expand(recovered, weights)
        dev_roundtrip = max(float(np.max(np.abs(rebuilt.k_nope - expanded.k_nope))),
                            float(np.max(np.abs(rebuilt.v - expanded.v))))
        max_residual = float(np.max(residuals))
    except (GqlaError, np.linalg.LinAlgError):
        dev_cache = dev_roundtrip = max_residual = float("nan")

    bound = args.tolerance * scale
    checks = [
        ("expanded vs absorbed output", dev_paths),
        ("expanded path vs oracle", dev_gqa),
        ("absorbed path vs oracle", dev_abs),
        ("compressed cache vs latent", dev_cache),
        ("cache round trip", dev_roundtrip),
    ]
    ok = True
    print(f"checkpoint: {args.checkpoint} (L={args.seq_len}, s_q={args.sq}, "
          f"tolerance {args.tolerance:g})")
    print(f"cache: latent {config.latent_elements_per_token} elements/token, "
          f"expanded {config.expanded_elements_per_token} elements/token")
    for name, dev in checks:
        passed = _finite_leq(dev, bound)
        ok = ok and passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: max deviation {dev:.3e}")
    print(f"max relative compression residual: {max_residual:.3e}")
    return 0 if ok else 1


def cmd_convert(args) -> int:
    loaded = _load_checkpoint(args.input)
    if loaded is None:
        return 2
    kind, config, weights = loaded
    wanted = args.source_kind.upper()
    if kind != wanted:
        _err(f"--from {args.source_kind} but checkpoint kind is {kind}")
        return 2
    seed = args.seed

    try:
        if wanted == gqck.KIND_GQA:
            if args.rkv is None or args.dhr is None:
                _err("--rkv and --dhr are required for --from gqa")
                return 2
            src: convert_gqa.GqaWeights = weights
            target = GqlaConfig(
                model_dim=src.model_dim, num_heads=src.num_heads,
                num_groups=src.num_groups, head_dim=src.head_dim,
                value_head_dim=src.head_dim, rope_head_dim=args.dhr,
                kv_rank=args.rkv, q_rank=src.model_dim, rope_base=src.rope_base)
            calib = random_tokens(args.calib_tokens, src.model_dim, seed)
            converted, report = convert_gqa.convert(src, calib, target)
        else:
            if args.g is None:
                _err("--g is required for --from mla")
                return 2
            calib = random_tokens(args.calib_tokens, config.model_dim, seed)
            converted, report = convert_mla.convert(weights, config, calib, args.g)
            target = convert_mla.target_config(config, args.g)
    except GqlaError as exc:
        _err(str(exc))
        return 2

    for line in report.lines():
        print(line)
    gqck.write_checkpoint(args.output, gqck.KIND_GQLA, target, converted)
    print(f"wrote GQLA checkpoint: {args.output}")

    probe = random_tokens(8, target.model_dim, seed + 1)
    a, _ = gqla_model.forward_gqa_path(converted, target, probe, 2)
    b, _ = gqla_model.forward_absorb_path(converted, target, probe, 2)
    dev = float(np.max(np.abs(a - b)))
    bound = 1e-9 * (1.0 + float(np.max(np.abs(a))))
    passed = _finite_leq(dev, bound)
    print(f"{'PASS' if passed else 'FAIL'}  dual-path check on converted weights: "
          f"max deviation {dev:.3e}")
    return 0 if passed else 1


def _parse_hardware(spec: str):
    tokens = [t.strip() for t in spec.split(",") if t.strip()]
    out = []
    i = 0
    while i < len(tokens):
        token = tokens[i]
        low = token.lower()
        if low == "h100":
            out.append(roofline.H100)
        elif low == "h20":
            out.append(roofline.H20)
        elif low.startswith("custom:"):
            # custom:FLOPS,BW: the comma doubles as the list separator, so the
            # bandwidth may arrive as the next token
            parts = [p for p in token.split(":", 1)[1].replace(";", "/").split("/") if p]
            if len(parts) == 1 and i + 1 < len(tokens):
                i += 1
                parts.append(tokens[i])
            if len(parts) != 2:
                raise ValueError(f"custom hardware needs custom:FLOPS,BW, got {token!r}")
            try:
                out.append(roofline.HardwareSpec("custom", float(parts[0]), float(parts[1])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"malformed custom hardware {token!r}: {exc}") from exc
        else:
            raise ValueError(f"unknown hardware {token!r}")
        i += 1
    if not out:
        raise ValueError("no hardware specified")
    return out


def _parse_rows(spec: str):
    if spec == "default":
        return None
    rows = []
    for token in spec.split(","):
        parts = token.strip().split(":")
        if len(parts) != 3:
            raise ValueError(f"row must be path:g:s_q, got {token!r}")
        name = parts[0].lower()
        if name in ("mqa", "mqa-absorb", "absorb", "latent"):
            path = roofline.MQA_ABSORB
        elif name in ("gqa", "expanded"):
            path = roofline.GQA
        else:
            raise ValueError(f"unknown path {parts[0]!r}")
        rows.append((path, int(parts[1]), int(parts[2])))
    return rows


def operating_points_table(points) -> gqck.ResultTable:
    """Format planner rows as a 10-column table (strings, stable across formats)."""
    rows = []
    for p in points:
        rows.append([
            p.gpu, p.path, str(p.g), str(p.s_q), str(p.cache_bytes_per_token),
            f"{p.intensity:.2f}", f"{p.mem_time * 1e6:.2f}", f"{p.cmp_time * 1e6:.2f}",
            f"{p.step_time * 1e6:.2f}", f"{p.throughput:.0f}",
        ])
    return gqck.make_table(
        ["gpu", "path", "g", "s_q", "cache_bytes_per_token", "intensity_flops_per_byte",
         "mem_us", "cmp_us", "step_us", "tokens_per_s"], rows)


def cmd_roofline(args) -> int:
    try:
        hardware = _parse_hardware(args.hw)
        rows = _parse_rows(args.rows)
    except ValueError as exc:
        _err(str(exc))
        return 2
    if args.config == "canonical":
        config = canonical_config()
    else:
        loaded = _load_checkpoint(args.config)
        if loaded is None:
            return 2
        kind, config, _ = loaded
        if kind == gqck.KIND_GQA:
            _err("roofline needs a GQLA or MLA checkpoint (or 'canonical')")
            return 2
    points = roofline.operating_table(hardware, config, rows=rows, length=args.seq_len)
    table = operating_points_table(points)
    if args.format == "text":
        for hw in hardware:
            print(f"# {hw.name}: {hw.flops_peak / 1e12:g} TFLOP/s, "
                  f"{hw.bandwidth / 1e12:g} TB/s, ridge {roofline.ridge(hw):.1f} FLOPs/byte")
        print(f"# per-step operating points at L={args.seq_len} "
              "(per attention layer per sequence)")
    sys.stdout.write(gqck.emit_table(table, args.format))
    return 0


def cmd_sparse_check(args) -> int:
    loaded = _load_checkpoint(args.checkpoint)
    if loaded is None:
        return 2
    kind, config, weights = loaded
    if kind != gqck.KIND_GQLA:
        _err(f"sparse-check needs a GQLA checkpoint, got kind {kind}")
        return 2
    tokens = random_tokens(args.seq_len, config.model_dim, args.seed)
    dense, expanded = gqla_model.forward_gqa_path(weights, config, tokens, 1)
    _, latent = gqla_model.forward_absorb_path(weights, config, tokens, 1)
    query = tokens[-1]
    scores = sparse.stub_index_scores(weights, config, expanded, query)

    everything = sparse.topk_select(scores, len(expanded))
    saturated = sparse.sparse_attention(weights, config, expanded, query, everything,
                                        scale=config.score_scale)
    dev_sat = float(np.max(np.abs(saturated - dense[0])))
    bound_sat = 1e-10 * (1.0 + float(np.max(np.abs(dense[0]))))

    selected = sparse.topk_select(scores, args.k)
    picked = sparse.sparse_attention(weights, config, expanded, query, selected)
    masked = sparse.masked_reference(weights, config, expanded, query, selected)
    twin = sparse.sparse_attention_absorbed(weights, config, latent, query, selected)
    dev_mask = float(np.max(np.abs(picked - masked)))
    dev_twin = float(np.max(np.abs(picked - twin)))
    scale_out = 1.0 + float(np.max(np.abs(picked)))

    ok = True
    for name, dev, bound in [
        ("saturation (k >= L) vs dense path", dev_sat, bound_sat),
        ("masking-equivalence oracle", dev_mask, 1e-8 * scale_out),
        ("latent-cache sparse twin", dev_twin, 1e-10 * scale_out),
    ]:
        passed = _finite_leq(dev, bound)
        ok = ok and passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: max deviation {dev:.3e}")
    report = sparse.tile_feasibility(config)
    state = "feasible" if report.gqa_path_feasible else "infeasible"
    print(f"tile rule: {state}, {report.heads_per_group} heads/group "
          f"(m={report.tile_m} tile)")
    print(f"  {report.rationale}")
    print(f"selected {len(selected)}/{len(expanded)} positions: "
          + " ".join(str(s) for s in selected))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gqla",
        description="Dual-path latent attention: verification, checkpoint "
                    "conversion, and roofline planning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the dual-path and oracle checks on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--sq", type=int, choices=(1, 2), default=1)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("convert", help="convert a GQA or MLA checkpoint to GQLA")
    p.add_argument("--from", dest="source_kind", required=True, choices=("gqa", "mla"))
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--g", type=int, default=None, help="target group count (mla route)")
    p.add_argument("--rkv", type=int, default=None, help="target latent rank (gqa route)")
    p.add_argument("--dhr", type=int, default=None, help="target rotary dim (gqa route)")
    p.add_argument("--calib-tokens", type=int, default=2048)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("roofline", help="emit the per-step operating-point table")
    p.add_argument("--hw", default="h100,h20",
                   help="comma list: h100, h20, custom:FLOPS,BW")
    p.add_argument("--config", default="canonical", help="'canonical' or a checkpoint path")
    p.add_argument("--rows", default="default", help="'default' or comma list path:g:s_q")
    p.add_argument("--seq-len", type=int, default=8192)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_roofline)

    p = sub.add_parser("sparse-check", help="run the sparse-attention oracles and tile rule")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_sparse_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


def entrypoint() -> None:
    sys.exit(main())
