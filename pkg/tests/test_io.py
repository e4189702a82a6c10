import dataclasses
import json
import struct

import numpy as np
import pytest

from gqla import io as gqck
from gqla import model as M
from gqla.convert_gqa import init_random_gqa
from gqla.errors import CheckpointFormatError


def read_blob(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestCheckpointRoundTrip:
    def test_gqla_bitwise(self, tmp_path, desk_config, desk_weights):
        path = tmp_path / "model.gqck"
        gqck.write_checkpoint(path, "gqla", desk_config, desk_weights)
        kind, config, weights = gqck.read_checkpoint(path)
        assert kind == "GQLA" and config == desk_config
        for name in gqck._GQLA_FIELDS:
            assert np.array_equal(getattr(weights, name), getattr(desk_weights, name))

    def test_mla_kind(self, tmp_path, mla_config, mla_weights):
        path = tmp_path / "mla.gqck"
        gqck.write_checkpoint(path, "mla", mla_config, mla_weights)
        kind, config, weights = gqck.read_checkpoint(path)
        assert kind == "MLA" and config == mla_config
        assert np.array_equal(weights.k_up, mla_weights.k_up)

    def test_gqa_kind(self, tmp_path, desk_gqa):
        path = tmp_path / "src.gqck"
        gqck.write_checkpoint(path, "gqa", None, desk_gqa)
        kind, config, weights = gqck.read_checkpoint(path)
        assert kind == "GQA"
        assert config["num_heads"] == 8 and config["head_dim"] == 16
        for name in gqck._GQA_FIELDS:
            assert np.array_equal(getattr(weights, name), getattr(desk_gqa, name))

    def test_float32_mode(self, tmp_path, desk_config, desk_weights):
        path = tmp_path / "f32.gqck"
        gqck.write_checkpoint(path, "gqla", desk_config, desk_weights, dtype="float32")
        _, _, weights = gqck.read_checkpoint(path)
        assert np.max(np.abs(weights.q_up - desk_weights.q_up)) <= 1e-6

    def test_writes_are_deterministic(self, tmp_path, desk_config, desk_weights):
        a, b = tmp_path / "a.gqck", tmp_path / "b.gqck"
        gqck.write_checkpoint(a, "gqla", desk_config, desk_weights)
        gqck.write_checkpoint(b, "gqla", desk_config, desk_weights)
        assert read_blob(a) == read_blob(b)

    def test_provenance_does_not_affect_values(self, tmp_path, desk_config, desk_weights):
        a, b = tmp_path / "a.gqck", tmp_path / "b.gqck"
        gqck.write_checkpoint(a, "gqla", desk_config, desk_weights)
        gqck.write_checkpoint(b, "gqla", desk_config, desk_weights, provenance="run 1")
        _, cfg_a, w_a = gqck.read_checkpoint(a)
        _, cfg_b, w_b = gqck.read_checkpoint(b)
        assert cfg_a == cfg_b
        assert np.array_equal(w_a.kv_down, w_b.kv_down)


class TestCheckpointValidation:
    def test_truncated_payload_names_the_tensor(self, tmp_path, desk_config, desk_weights):
        path = tmp_path / "model.gqck"
        gqck.write_checkpoint(path, "gqla", desk_config, desk_weights)
        blob = read_blob(path)
        with open(path, "wb") as fh:
            fh.write(blob[:-64])
        with pytest.raises(CheckpointFormatError, match="out_proj"):
            gqck.read_checkpoint(path)

    def test_mla_with_group_indexed_tensors_rejected(self, tmp_path, desk_config, desk_weights):
        # desk_config has 2 groups for 8 heads: not a head-indexed layout
        with pytest.raises(CheckpointFormatError, match="head-indexed"):
            gqck.write_checkpoint(tmp_path / "bad.gqck", "mla", desk_config, desk_weights)

    def test_mla_mislabel_rejected_on_read(self, tmp_path, desk_config, desk_weights):
        # a group-indexed file whose manifest claims the head-indexed kind
        path = tmp_path / "model.gqck"
        gqck.write_checkpoint(path, "gqla", desk_config, desk_weights)
        blob = read_blob(path)
        version, header_len = struct.unpack("<IQ", blob[4:16])
        header = json.loads(blob[16:16 + header_len])
        header["kind"] = "MLA"
        new_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(blob[:4] + struct.pack("<IQ", version, len(new_header)) +
                         new_header + blob[16 + header_len:])
        with pytest.raises(CheckpointFormatError, match="head-indexed"):
            gqck.read_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.gqck"
        path.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(CheckpointFormatError, match="magic"):
            gqck.read_checkpoint(path)

    def test_unknown_version(self, tmp_path, desk_config, desk_weights):
        path = tmp_path / "model.gqck"
        gqck.write_checkpoint(path, "gqla", desk_config, desk_weights)
        blob = bytearray(read_blob(path))
        blob[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="version"):
            gqck.read_checkpoint(path)

    def test_missing_tensor_rejected(self, tmp_path, desk_config, desk_weights):
        path = tmp_path / "model.gqck"
        gqck.write_checkpoint(path, "gqla", desk_config, desk_weights)
        blob = read_blob(path)
        version, header_len = struct.unpack("<IQ", blob[4:16])
        header = json.loads(blob[16:16 + header_len])
        header["tensors"] = header["tensors"][:-1]
        new_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(blob[:4] + struct.pack("<IQ", version, len(new_header)) +
                         new_header + blob[16 + header_len:])
        with pytest.raises(CheckpointFormatError, match="missing"):
            gqck.read_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path, desk_config, desk_weights):
        bad = dataclasses.replace(desk_weights, k_up=desk_weights.k_up[:-1])
        with pytest.raises(Exception):
            gqck.write_checkpoint(tmp_path / "bad.gqck", "gqla", desk_config, bad)

    def test_unknown_kind(self, tmp_path, desk_config, desk_weights):
        with pytest.raises(CheckpointFormatError, match="kind"):
            gqck.write_checkpoint(tmp_path / "x.gqck", "mha", desk_config, desk_weights)


class TestResultTable:
    def test_empty_rows_render_header_only(self):
        table = gqck.make_table(["a", "b"], [])
        assert gqck.emit_table(table, "text") == "a  b\n"
        assert gqck.emit_table(table, "csv") == "a,b\n"

    def test_rectangularity_enforced(self):
        with pytest.raises(CheckpointFormatError):
            gqck.make_table(["a", "b"], [[1]])

    def test_csv_round_trip(self):
        table = gqck.make_table(["name", "value"],
                                [["plain", "1.5"], ["with,comma", "2"]])
        text = gqck.emit_table(table, "csv")
        parsed = gqck.parse_csv(text)
        assert parsed.columns == table.columns
        assert parsed.rows == table.rows
        assert '"with,comma"' in text

    def test_text_is_fixed_width_aligned(self):
        table = gqck.make_table(["col", "x"], [["aa", "1"], ["b", "22"]])
        lines = gqck.emit_table(table, "text").splitlines()
        assert lines[0] == "col   x"
        assert lines[1] == " aa   1"
        assert lines[2] == "  b  22"

    def test_planner_table_is_eight_by_ten(self):
        from gqla import roofline as R
        from gqla.cli import operating_points_table
        points = R.operating_table([R.H100, R.H20], M.canonical_config())
        table = operating_points_table(points)
        assert len(table.columns) == 10
        assert len(table.rows) == 8
