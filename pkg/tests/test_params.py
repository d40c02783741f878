import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedforge.params import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointVersionError,
    LayoutEntry,
    LayoutManifest,
    ParamError,
    ParamVector,
    axpy,
    decode_sections,
    encode_sections,
    l2_norm,
    read_checkpoint,
    write_checkpoint,
)


def scalar_loop_norm(values):
    # independent oracle: plain python accumulation in 64-bit
    acc = 0.0
    for v in values:
        acc += float(v) * float(v)
    return math.sqrt(acc)


class TestParamVector:
    def test_rejects_empty(self):
        with pytest.raises(ParamError):
            ParamVector(np.array([], dtype=np.float32))

    def test_rejects_nan_naming_index(self):
        arr = np.array([1.0, float("nan"), 3.0], dtype=np.float32)
        with pytest.raises(ParamError, match="index 1"):
            ParamVector(arr)

    def test_rejects_inf(self):
        with pytest.raises(ParamError, match="index 2"):
            ParamVector(np.array([0.0, 1.0, float("inf")], dtype=np.float32))

    def test_immutable(self):
        v = ParamVector(np.array([1.0, 2.0], dtype=np.float32))
        with pytest.raises(ValueError):
            v.data[0] = 5.0

    def test_bytes_round_trip_bitwise(self, rng):
        v = ParamVector(rng.normal(size=257).astype(np.float32))
        assert ParamVector.from_bytes(v.to_bytes()).bitwise_equal(v)


class TestL2Norm:
    def test_zero_vector(self):
        assert l2_norm(ParamVector.zeros(3)) == 0.0

    def test_pythagorean(self):
        assert l2_norm(ParamVector(np.array([3.0, 4.0], dtype=np.float32))) == 5.0

    def test_matches_scalar_loop_oracle(self, rng):
        values = rng.normal(size=1000).astype(np.float32)
        expected = scalar_loop_norm(values)
        got = l2_norm(ParamVector(values))
        assert abs(got - expected) <= 1e-12 * expected

    def test_nonfinite_names_index(self):
        arr = np.array([1.0, 2.0, np.inf], dtype=np.float64)
        with pytest.raises(ParamError, match="index 2"):
            l2_norm(arr)

    @given(st.floats(-1e3, 1e3), st.integers(1, 50), st.integers(0, 2**32 - 1))
    def test_absolute_homogeneity(self, a, n, seed):
        v = np.random.default_rng(seed).normal(size=n).astype(np.float32)
        scaled = (a * v.astype(np.float64)).astype(np.float32)
        lhs = l2_norm(ParamVector(scaled))
        rhs = abs(a) * l2_norm(ParamVector(v))
        assert lhs == pytest.approx(rhs, rel=1e-6, abs=1e-6)


class TestAxpy:
    def test_a_zero_is_identity(self, rng):
        x = ParamVector(rng.normal(size=16).astype(np.float32))
        y = ParamVector(rng.normal(size=16).astype(np.float32))
        assert axpy(0.0, x, y).bitwise_equal(y)

    def test_addition(self):
        x = ParamVector(np.array([1.0, 2.0], dtype=np.float32))
        y = ParamVector(np.array([3.0, 4.0], dtype=np.float32))
        assert axpy(1.0, x, y).data.tolist() == [4.0, 6.0]

    def test_cancellation(self):
        x = ParamVector(np.array([2.0, 2.0], dtype=np.float32))
        y = ParamVector(np.array([1.0, 1.0], dtype=np.float32))
        assert axpy(-0.5, x, y).data.tolist() == [0.0, 0.0]

    def test_length_mismatch_carries_both_lengths(self):
        x = ParamVector(np.ones(3, dtype=np.float32))
        y = ParamVector(np.ones(4, dtype=np.float32))
        with pytest.raises(ParamError, match="3.*4"):
            axpy(1.0, x, y)

    def test_exact_for_unit_scalars(self, rng):
        # representable inputs, a in {-1, 0, 1}: exact float32 results
        x32 = ParamVector((rng.integers(-64, 64, size=32) * 0.25).astype(np.float32))
        y32 = ParamVector((rng.integers(-64, 64, size=32) * 0.5).astype(np.float32))
        for a in (-1.0, 0.0, 1.0):
            expect = y32.as_f64() + a * x32.as_f64()
            assert np.array_equal(axpy(a, x32, y32).data, expect.astype(np.float32))


class TestLayoutManifest:
    def test_contiguity_enforced(self):
        with pytest.raises(ParamError, match="offset"):
            LayoutManifest((LayoutEntry("a", (2, 2), 0), LayoutEntry("b", (3,), 5)))

    def test_total_len(self):
        m = LayoutManifest((LayoutEntry("a", (2, 2), 0), LayoutEntry("b", (3,), 4)))
        assert m.total_len == 7

    def test_json_round_trip(self):
        m = LayoutManifest((LayoutEntry("w", (4, 8), 0), LayoutEntry("b", (8,), 32)))
        assert LayoutManifest.from_json_dict(m.to_json_dict()) == m


class TestCheckpointFormat:
    def sections(self, rng):
        return {
            "round": 7,
            "global": ParamVector(rng.normal(size=33).astype(np.float32)),
            "delta": rng.normal(size=33).astype(np.float64),
            "eta": 0.1,
            "manifest": {"entries": [{"name": "w", "shape": [33], "offset": 0}]},
        }

    def test_round_trip_bitwise(self, rng, tmp_path):
        sections = self.sections(rng)
        path = tmp_path / "state.ckpt"
        n = write_checkpoint(sections, path)
        assert n == path.stat().st_size
        back = read_checkpoint(path)
        assert back["round"] == 7
        assert back["global"].bitwise_equal(sections["global"])
        assert np.array_equal(
            back["delta"].view(np.uint64), sections["delta"].view(np.uint64)
        )
        assert back["eta"] == 0.1
        assert back["manifest"] == sections["manifest"]

    def test_empty_optional_sections(self):
        # e.g. no momentum yet: the section simply is not written
        blob = encode_sections({"round": 0})
        back = decode_sections(blob)
        assert back == {"round": 0}
        header = struct.unpack("<4sII", blob[:12])
        assert header == (MAGIC, FORMAT_VERSION, 1)

    def test_blob_size_arithmetic(self):
        # header + one f32 vector section + one manifest JSON section
        n = 1_000_000
        vec = ParamVector.zeros(n)
        manifest = {"entries": [{"name": "w", "shape": [n], "offset": 0}]}
        blob = encode_sections({"params": vec, "manifest": manifest})
        manifest_payload = len(
            bytes(__import__("json").dumps(manifest, sort_keys=True), "utf-8")
        )
        # per section: name_len u16 + name + kind u8 + payload_len u64 + payload + crc u32
        expected = (
            12
            + (2 + 6 + 9 + 4 * n + 4)
            + (2 + 8 + 9 + manifest_payload + 4)
        )
        assert len(blob) == expected

    def test_corrupted_payload_byte_is_checksum_error(self, rng):
        blob = bytearray(encode_sections({"v": ParamVector(rng.normal(size=9).astype(np.float32))}))
        blob[-10] ^= 0x01  # inside the payload
        with pytest.raises(CheckpointChecksumError):
            decode_sections(bytes(blob))

    def test_wrong_magic_is_format_error(self):
        blob = bytearray(encode_sections({"round": 1}))
        blob[0] = ord("X")
        with pytest.raises(CheckpointFormatError):
            decode_sections(bytes(blob))

    def test_wrong_version_is_version_error(self):
        blob = bytearray(encode_sections({"round": 1}))
        blob[4] = 99
        with pytest.raises(CheckpointVersionError):
            decode_sections(bytes(blob))

    def test_truncated_is_format_error(self):
        blob = encode_sections({"round": 1})
        with pytest.raises(CheckpointFormatError):
            decode_sections(blob[:-3])

    def test_no_partial_file_on_crash(self, tmp_path, monkeypatch, rng):
        # a failing rename leaves no destination file and no temp litter
        path = tmp_path / "sub" / "x.ckpt"
        path.parent.mkdir()
        import fedforge.params as params_mod

        def boom(src, dst):
            raise OSError("disk gone")

        monkeypatch.setattr(params_mod.os, "replace", boom)
        with pytest.raises(OSError):
            write_checkpoint({"round": 1}, path)
        assert list(path.parent.iterdir()) == []

    @given(st.integers(1, 64), st.integers(0, 2**32 - 1))
    def test_property_vector_round_trip(self, n, seed):
        v = ParamVector(np.random.default_rng(seed).normal(size=n).astype(np.float32))
        back = decode_sections(encode_sections({"v": v}))["v"]
        assert back.bitwise_equal(v)
