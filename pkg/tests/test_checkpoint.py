import struct

import numpy as np
import pytest

from tnasnn import snn
from tnasnn.checkpoint import (MAGIC, Checkpoint, Entry, export_network, from_bytes, load_checkpoint,
                               load_network, pack_ternary, save_checkpoint, to_bytes, unpack_ternary)
from tnasnn.config import TrainConfig
from tnasnn.errors import ConfigurationError, FormatError
from tnasnn.ternary import TernaryPolicy, activate_compression
from tnasnn.training import OptimizerState, adam_step


def small_network(seed=0, ternary=True):
    spec = snn.parse_architecture("12FC-10FC-Out", (1, 4, 4), 3)
    params = snn.kaiming_init(spec, seed)
    state = None
    if ternary:
        state = activate_compression(spec, params, TernaryPolicy(delta=0.05, start_epoch=0), 0)
    return spec, params, state


def sample_checkpoint(with_optimizer=True):
    spec, params, state = small_network()
    opt = None
    if with_optimizer:
        opt = OptimizerState(lr=0.01)
        adam_step(params, {k: np.ones_like(p.data) for k, p in params.items()}, opt)
        state.refresh()
    cfg = TrainConfig(dataset="fashion_mnist", arch=spec.arch)
    return export_network(spec, params, state, cfg, epoch=7, optimizer=opt)


class TestPacking:
    def test_bit_layout(self):
        # codes 01, 10, 00, 01 from the lowest bits up
        assert pack_ternary(np.array([1, -1, 0, 1])) == bytes([0b01_00_10_01])
        assert pack_ternary(np.array([-1])) == bytes([0b10])

    @pytest.mark.parametrize("n", [1, 3, 4, 5, 1001])
    def test_round_trip(self, n, rng):
        values = rng.integers(-1, 2, size=n).astype(np.float32)
        packed = pack_ternary(values)
        assert len(packed) == (n + 3) // 4
        np.testing.assert_array_equal(unpack_ternary(packed, n), values)

    def test_reserved_code_rejected(self):
        with pytest.raises(FormatError, match="reserved"):
            unpack_ternary(bytes([0b11]), 1)

    def test_non_ternary_rejected(self):
        with pytest.raises(ValueError):
            pack_ternary(np.array([0.5]))

    def test_every_byte_decodes_to_ternary_or_fails(self):
        for b in range(256):
            try:
                out = unpack_ternary(bytes([b]), 4)
            except FormatError:
                continue
            assert set(out.tolist()) <= {-1.0, 0.0, 1.0}


class TestRoundTrip:
    def test_save_load_save_identical(self, tmp_path):
        ck = sample_checkpoint()
        save_checkpoint(ck, tmp_path / "a.ckpt")
        again = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(again, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert again.epoch == 7 and again.optimizer["step_count"] == 1

    def test_header_layout(self):
        ck = sample_checkpoint(with_optimizer=False)
        raw = to_bytes(ck)
        assert raw[:8] == MAGIC
        assert struct.unpack("<H", raw[8:10]) == (1,)
        assert raw[10:42] == TrainConfig(dataset="fashion_mnist", arch="12FC-10FC-Out").digest()
        assert struct.unpack("<I", raw[42:46]) == (7,)

    def test_dtypes_and_values(self):
        spec, params, state = small_network()
        ck = from_bytes(to_bytes(export_network(spec, params, state)))
        weighted = [snn.weight_name(spec, i) for i in spec.weighted_layers()]
        dtypes = ck.layer_dtypes()
        assert dtypes[weighted[1]] == "ternary2bit"
        assert dtypes[weighted[0]] == dtypes[weighted[-1]] == "f32"
        assert all(dtypes[n] == "f32" for n in dtypes if n.endswith(".bias"))
        _, loaded = load_network(ck)
        np.testing.assert_array_equal(loaded[weighted[1]].data, state.views[weighted[1]].deployed)
        np.testing.assert_array_equal(loaded[weighted[0]].data, params[weighted[0]].data)

    def test_full_precision_export(self):
        spec, params, _ = small_network(ternary=False)
        ck = from_bytes(to_bytes(export_network(spec, params)))
        assert set(ck.layer_dtypes().values()) == {"f32"}
        spec2, loaded = load_network(ck)
        assert spec2.arch == spec.arch
        for name in params:
            np.testing.assert_array_equal(loaded[name].data, params[name].data)


class TestRejection:
    def test_corrupt_magic(self, tmp_path):
        raw = bytearray(to_bytes(sample_checkpoint()))
        raw[0] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_version_mismatch(self):
        raw = bytearray(to_bytes(sample_checkpoint()))
        raw[8:10] = struct.pack("<H", 2)
        with pytest.raises(FormatError, match="version 2"):
            from_bytes(bytes(raw))

    def test_truncation(self):
        raw = to_bytes(sample_checkpoint())
        for cut in (5, 40, len(raw) // 2, len(raw) - 1):
            with pytest.raises(FormatError):
                from_bytes(raw[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(FormatError, match="trailing"):
            from_bytes(to_bytes(sample_checkpoint()) + b"\x00")

    def test_payload_length_mismatch(self):
        ck = sample_checkpoint(with_optimizer=False)
        ck.entries[0] = Entry(ck.entries[0].name, ck.entries[0].shape, ck.entries[0].dtype,
                              ck.entries[0].payload[:-4])
        with pytest.raises(FormatError, match="payload"):
            from_bytes(to_bytes(ck))

    def test_architecture_mismatch(self):
        ck = sample_checkpoint(with_optimizer=False)
        ck.meta["arch"] = "12FC-Out"
        with pytest.raises(ConfigurationError, match="do not match"):
            load_network(ck)


def test_cifarnet_ternary_payload_ratio():
    spec = snn.parse_architecture(snn.CIFARNET, (3, 32, 32), 10)
    shapes = spec.param_shapes()
    weighted = [snn.weight_name(spec, i) for i in spec.weighted_layers()]
    ternary_bytes = f32_bytes = 0
    for name in weighted[1:-1]:
        entry = Entry.ternary(name, np.zeros(shapes[name], dtype=np.int8))
        ternary_bytes += len(entry.payload)
        f32_bytes += 4 * int(np.prod(shapes[name]))
    assert ternary_bytes * 12 <= f32_bytes
    assert ternary_bytes / f32_bytes == pytest.approx(1 / 16, rel=1e-3)


def test_checkpoint_is_plain_dataclass():
    ck = Checkpoint(bytes(32), 0, {}, [])
    assert from_bytes(to_bytes(ck)) == ck
