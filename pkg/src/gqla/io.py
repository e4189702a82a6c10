"""Bit-exact checkpoint container (GQCK) and result tables.

One self-describing file format serves all three architecture kinds so the
converters are file-to-file transforms. Layout: 4-byte magic "GQCK", a u32
version and u64 header length (little-endian), a canonical-JSON manifest
(kind, config, dtype, tensor directory with shapes and payload offsets), then
the raw row-major little-endian payload. Writes are deterministic: sorted
manifest keys, fixed tensor order, no timestamps. float64 round-trips
bitwise; float32 is available for size experiments.
"""

from __future__ import annotations

import csv
import io as _stringio
import json
import struct
from dataclasses import dataclass

import numpy as np

from .convert_gqa import GqaWeights
from .errors import CheckpointFormatError
from .model import GqlaConfig, GqlaWeights

MAGIC = b"GQCK"
VERSION = 1

KIND_GQA = "GQA"
KIND_MLA = "MLA"
KIND_GQLA = "GQLA"
_KINDS = (KIND_GQA, KIND_MLA, KIND_GQLA)

_GQLA_FIELDS = ("q_down", "q_up", "q_rope", "kv_down", "k_up", "v_up", "k_rope", "out_proj")
_GQA_FIELDS = ("q_proj", "k_proj", "v_proj", "out_proj")
_CONFIG_FIELDS = ("model_dim", "num_heads", "num_groups", "head_dim", "value_head_dim",
                  "rope_head_dim", "kv_rank", "q_rank", "rope_base")
_DTYPES = {"float64": np.dtype("<f8"), "float32": np.dtype("<f4")}


def _normalize_kind(kind: str) -> str:
    k = str(kind).upper()
    if k not in _KINDS:
        raise CheckpointFormatError(f"unknown checkpoint kind {kind!r}")
    return k


def _config_dict(kind: str, config, weights) -> dict:
    if kind == KIND_GQA:
        w: GqaWeights = weights
        return {"model_dim": w.model_dim, "num_heads": w.num_heads,
                "num_groups": w.num_groups, "head_dim": w.head_dim,
                "rope_base": w.rope_base}
    return {f: getattr(config, f) for f in _CONFIG_FIELDS}


def _validate_pair(kind: str, config, weights, require_finite: bool = True) -> None:
    if kind == KIND_GQA:
        if not isinstance(weights, GqaWeights):
            raise CheckpointFormatError("GQA checkpoints carry GqaWeights")
        weights.validate()
        return
    if not isinstance(weights, GqlaWeights) or not isinstance(config, GqlaConfig):
        raise CheckpointFormatError(f"{kind} checkpoints carry GqlaConfig + GqlaWeights")
    if kind == KIND_MLA and config.num_groups != config.num_heads:
        raise CheckpointFormatError(
            "MLA checkpoints are head-indexed: num_groups must equal num_heads "
            f"(got {config.num_groups} groups for {config.num_heads} heads)")
    weights.validate(config, require_finite=require_finite)


def write_checkpoint(path, kind: str, config, weights, dtype: str = "float64",
                     provenance: str | None = None) -> None:
    """Serialize one checkpoint; the file parses back to an identical value.

    For the GQA kind the dimensions live on the weights and ``config`` may be
    None. ``provenance`` is an optional free-text manifest field excluded
    from value equality.
    """
    kind = _normalize_kind(kind)
    if dtype not in _DTYPES:
        raise CheckpointFormatError(f"unsupported dtype {dtype!r}")
    _validate_pair(kind, config, weights)
    names = _GQA_FIELDS if kind == KIND_GQA else _GQLA_FIELDS
    np_dtype = _DTYPES[dtype]
    directory = []
    chunks = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(getattr(weights, name), dtype=np_dtype)
        raw = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"kind": kind, "dtype": dtype, "config": _config_dict(kind, config, weights),
              "tensors": directory}
    if provenance is not None:
        header["provenance"] = provenance
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for raw in chunks:
            fh.write(raw)


def read_checkpoint(path, strict: bool = True):
    """Parse a checkpoint back into (kind, config, weights).

    For GQLA/MLA kinds config is a GqlaConfig and weights a GqlaWeights; for
    GQA, config is the plain manifest dict and weights a GqaWeights. With
    strict=False non-finite tensor values are tolerated (shapes are still
    enforced), so verification tooling can surface payload corruption as a
    failed numerical check rather than a parse error.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointFormatError("not a GQCK checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointFormatError("file too short for a GQCK header")
    version, header_len = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported container version {version}")
    if len(blob) < 16 + header_len:
        raise CheckpointFormatError("file truncated inside the manifest")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"manifest is not valid JSON: {exc}") from exc
    payload = blob[16 + header_len:]

    kind = _normalize_kind(header.get("kind", ""))
    dtype = header.get("dtype", "float64")
    if dtype not in _DTYPES:
        raise CheckpointFormatError(f"unsupported dtype {dtype!r}")
    np_dtype = _DTYPES[dtype]
    expected = _GQA_FIELDS if kind == KIND_GQA else _GQLA_FIELDS
    directory = header.get("tensors", [])
    names = [t.get("name") for t in directory]
    if sorted(names) != sorted(expected):
        missing = set(expected) - set(names)
        extra = set(names) - set(expected)
        raise CheckpointFormatError(
            f"manifest tensor set mismatch for kind {kind}: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}")

    arrays = {}
    spans = []
    for entry in directory:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        nbytes = int(np.prod(shape)) * np_dtype.itemsize if shape else np_dtype.itemsize
        if offset < 0 or offset + nbytes > len(payload):
            raise CheckpointFormatError(f"payload truncated reading tensor {name!r}")
        spans.append((offset, offset + nbytes, name))
        arr = np.frombuffer(payload, dtype=np_dtype, count=int(np.prod(shape)),
                            offset=offset).reshape(shape)
        arrays[name] = arr.astype(np.float64, copy=True)
    spans.sort()
    for (_, end, name), (start, _, nxt) in zip(spans, spans[1:]):
        if start < end:
            raise CheckpointFormatError(f"tensors {name!r} and {nxt!r} overlap in the payload")

    cfg = header.get("config", {})
    try:
        if kind == KIND_GQA:
            weights = GqaWeights(
                num_heads=int(cfg["num_heads"]), num_groups=int(cfg["num_groups"]),
                head_dim=int(cfg["head_dim"]), model_dim=int(cfg["model_dim"]),
                rope_base=float(cfg["rope_base"]),
                **{f: arrays[f] for f in _GQA_FIELDS})
            weights.validate()
            return kind, dict(cfg), weights
        config = GqlaConfig(**{f: (float(cfg[f]) if f == "rope_base" else int(cfg[f]))
                               for f in _CONFIG_FIELDS})
        weights = GqlaWeights(**{f: arrays[f] for f in _GQLA_FIELDS})
        _validate_pair(kind, config, weights, require_finite=strict)
        return kind, config, weights
    except KeyError as exc:
        raise CheckpointFormatError(f"manifest config is missing field {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"checkpoint is internally inconsistent: {exc}") from exc


@dataclass(frozen=True)
class ResultTable:
    """A rectangular table with deterministic column order."""

    columns: tuple
    rows: tuple

    def __post_init__(self):
        for row in self.rows:
            if len(row) != len(self.columns):
                raise CheckpointFormatError(
                    f"row width {len(row)} does not match {len(self.columns)} columns")


def make_table(columns, rows) -> ResultTable:
    return ResultTable(columns=tuple(columns), rows=tuple(tuple(r) for r in rows))


def emit_table(table: ResultTable, format: str = "text") -> str:
    """Render a table as fixed-width aligned text or RFC-style CSV."""
    if format == "csv":
        buf = _stringio.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(table.columns)
        for row in table.rows:
            writer.writerow(row)
        return buf.getvalue()
    if format != "text":
        raise CheckpointFormatError(f"unknown table format {format!r}")
    cells = [[str(c) for c in table.columns]] + [[str(c) for c in row] for row in table.rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(table.columns))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)).rstrip()
             for row in cells]
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> ResultTable:
    """Inverse of emit_table(format="csv"); all values come back as strings."""
    rows = list(csv.reader(_stringio.StringIO(text)))
    if not rows:
        raise CheckpointFormatError("empty CSV input")
    return make_table(rows[0], rows[1:])
