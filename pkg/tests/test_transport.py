import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedforge.comm import NetworkModel, transfer_time
from fedforge.messages import (
    FrameCrcError,
    FrameLengthError,
    Heartbeat,
    Join,
    Leave,
    TrainTask,
    UnknownTagError,
    UpdateReady,
    WireVersionError,
    decode_message,
    encode_message,
)
from fedforge.params import ParamError
from fedforge.store import (
    BadKeyError,
    BlobExistsError,
    BlobNotFoundError,
    FileBlobStore,
    MemoryBlobStore,
    client_update_key,
    global_model_key,
    parse_key,
    server_checkpoint_key,
)

ALL_MESSAGES = [
    TrainTask(round=3, client_id=1, local_steps=50, schedule_offset=100,
              batch_size=16, micro_batches=2, seeds={"data": 99}, blob_key="round-3/global"),
    UpdateReady(round=3, client_id=1, n_k=925, blob_key="round-3/client-1"),
    Join(node_manager_id="nm-4", worker_slots=1),
    Leave(node_manager_id="nm-4"),
    Heartbeat(id="nm-2", round=3),
]


class TestKeys:
    def test_round_trip_parse(self):
        assert parse_key(global_model_key(5)) == parse_key("round-5/global")
        parsed = parse_key(client_update_key(5, 3))
        assert (parsed.kind, parsed.round, parsed.client_id) == ("client", 5, 3)
        assert parse_key(server_checkpoint_key(2)).round == 2

    def test_bad_key_rejected(self):
        with pytest.raises(BadKeyError):
            parse_key("what/is/this")


class StoreContract:
    def make(self, tmp_path):
        raise NotImplementedError

    def test_put_get_round_trip(self, tmp_path):
        store = self.make(tmp_path)
        store.put("round-1/global", b"abc")
        assert store.get("round-1/global") == b"abc"

    def test_get_unknown_is_not_found(self, tmp_path):
        store = self.make(tmp_path)
        with pytest.raises(BlobNotFoundError):
            store.get("round-9/global")

    def test_duplicate_put_conflicts(self, tmp_path):
        store = self.make(tmp_path)
        store.put("ckpt/server-1", b"one")
        with pytest.raises(BlobExistsError):
            store.put("ckpt/server-1", b"two")
        assert store.get("ckpt/server-1") == b"one"

    def test_list_sorted_under_prefix(self, tmp_path):
        store = self.make(tmp_path)
        for k in (2, 0, 1):
            store.put(f"round-5/client-{k}", bytes([k]))
        store.put("round-6/client-0", b"x")
        assert store.list("round-5/") == [
            "round-5/client-0",
            "round-5/client-1",
            "round-5/client-2",
        ]

    def test_exists(self, tmp_path):
        store = self.make(tmp_path)
        assert not store.exists("a/b")
        store.put("a/b", b"1")
        assert store.exists("a/b")

    def test_malformed_key(self, tmp_path):
        store = self.make(tmp_path)
        with pytest.raises(BadKeyError):
            store.put("../escape", b"x")
        with pytest.raises(BadKeyError):
            store.put("round-1//global", b"x")


class TestMemoryStore(StoreContract):
    def make(self, tmp_path):
        return MemoryBlobStore()


class TestFileStore(StoreContract):
    def make(self, tmp_path):
        return FileBlobStore(tmp_path / "blobs")


class TestBackendEquivalence:
    def test_randomized_op_sequence_matches(self, tmp_path, rng):
        mem = MemoryBlobStore()
        fs = FileBlobStore(tmp_path / "eq")
        keys = [f"round-{r}/client-{c}" for r in range(3) for c in range(3)]
        for step in range(200):
            op = rng.choice(["put", "get", "list", "exists"])
            key = keys[int(rng.integers(len(keys)))]
            if op == "put":
                data = bytes(rng.integers(0, 256, size=5).astype(np.uint8))
                results = []
                for s in (mem, fs):
                    try:
                        results.append(("ok", s.put(key, data)))
                    except BlobExistsError:
                        results.append(("exists", None))
                assert results[0] == results[1]
            elif op == "get":
                results = []
                for s in (mem, fs):
                    try:
                        results.append(s.get(key))
                    except BlobNotFoundError:
                        results.append(None)
                assert results[0] == results[1]
            elif op == "list":
                prefix = str(rng.choice(["", "round-0/", "round-1/"]))
                assert mem.list(prefix) == fs.list(prefix)
            else:
                assert mem.exists(key) == fs.exists(key)


class TestMessageCodec:
    @pytest.mark.parametrize("msg", ALL_MESSAGES, ids=lambda m: type(m).__name__)
    def test_every_variant_round_trips(self, msg):
        assert decode_message(encode_message(msg)) == msg

    def test_truncated_frame_is_length_error(self):
        frame = encode_message(Leave(node_manager_id="nm-1"))
        with pytest.raises(FrameLengthError):
            decode_message(frame[:-2])
        with pytest.raises(FrameLengthError):
            decode_message(frame[:3])

    def test_flipped_payload_bit_is_crc_error(self):
        frame = bytearray(encode_message(Heartbeat(id="x", round=1)))
        frame[8] ^= 0x20
        with pytest.raises(FrameCrcError):
            decode_message(bytes(frame))

    def test_unknown_tag(self):
        frame = bytearray(encode_message(Leave(node_manager_id="nm-1")))
        frame[0] = 99
        with pytest.raises(UnknownTagError):
            decode_message(bytes(frame))

    def test_bad_version(self):
        frame = bytearray(encode_message(Leave(node_manager_id="nm-1")))
        frame[1] = 9
        with pytest.raises(WireVersionError):
            decode_message(bytes(frame))


class TestTransferTime:
    def test_paper_arithmetic_1p3b_fp16_100mbps(self):
        # 1.3e9 params * 2 bytes = 20.8 Gbit; at 100 Mbps -> 208 s
        net = NetworkModel(bandwidth_bps=100e6, latency_s=0.0, bytes_per_param=2)
        assert transfer_time(1_300_000_000, net) == pytest.approx(208.0, rel=1e-9)

    def test_double_bandwidth_halves_time(self):
        slow = NetworkModel(bandwidth_bps=1e6, bytes_per_param=4)
        fast = NetworkModel(bandwidth_bps=2e6, bytes_per_param=4)
        assert transfer_time(1000, slow) == pytest.approx(2 * transfer_time(1000, fast))

    def test_latency_floor(self):
        net = NetworkModel(bandwidth_bps=1e15, latency_s=0.25, bytes_per_param=2)
        assert transfer_time(1, net) == pytest.approx(0.25, abs=1e-6)

    @given(st.integers(1, 10**10), st.floats(1e3, 1e12), st.floats(1e3, 1e12))
    def test_monotone_decreasing_in_bandwidth(self, n, bw1, bw2):
        lo, hi = sorted((bw1, bw2))
        t_lo = transfer_time(n, NetworkModel(bandwidth_bps=lo))
        t_hi = transfer_time(n, NetworkModel(bandwidth_bps=hi))
        assert t_hi <= t_lo

    @given(st.integers(1, 10**9), st.integers(1, 10**9))
    def test_monotone_increasing_in_params(self, n1, n2):
        lo, hi = sorted((n1, n2))
        net = NetworkModel(bandwidth_bps=1e8)
        assert transfer_time(lo, net) <= transfer_time(hi, net)

    def test_validation(self):
        with pytest.raises(ParamError):
            NetworkModel(bandwidth_bps=0)
        with pytest.raises(ParamError):
            transfer_time(0, NetworkModel(bandwidth_bps=1e6))
