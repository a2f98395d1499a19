import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snnergy.data import (
    DatasetSpec,
    SnrgFormatError,
    class_patterns,
    decode_tensor,
    directory_digest,
    encode_tensor,
    generate_dataset,
    generate_sample,
    load_checkpoint,
    load_manifest,
    load_split,
    make_splits,
    read_tensor,
    save_checkpoint,
    save_dataset,
    split_indices,
    write_tensor,
)
from snnergy.tensor import SpikeTensor, Tensor

SMALL = DatasetSpec(samples_per_class=10, hw=(16, 16))


def random_shape(rng, max_ndim=4, max_dim=6):
    return tuple(int(d) for d in rng.integers(1, max_dim + 1, size=rng.integers(1, max_ndim + 1)))


class TestFormat:
    def test_header_layout(self):
        buf = encode_tensor(np.ones((2, 3), dtype=np.float32))
        assert buf[:4] == b"SNRG"
        assert struct.unpack_from("<HBB2I", buf, 4) == (1, 0, 2, 2, 3)
        assert len(buf) == 8 + 8 + 6 * 4

    def test_binary_is_one_byte_per_element(self):
        buf = encode_tensor(SpikeTensor(np.eye(3)))
        assert buf[6] == 1 and len(buf) == 8 + 8 + 9

    def test_binary_rejects_real_values(self):
        with pytest.raises(ValueError):
            encode_tensor(np.array([0.5]), "binary")

    def test_file_round_trip_keeps_spike_type(self, tmp_path, rng):
        s = SpikeTensor((rng.random((3, 4)) < 0.5).astype(np.float32))
        write_tensor(tmp_path / "s.snrg", s)
        back = read_tensor(tmp_path / "s.snrg")
        assert isinstance(back, SpikeTensor)
        np.testing.assert_array_equal(back.data, s.data)

    def test_f32_bit_exact_including_nan_payloads(self, rng):
        bits = rng.integers(0, 2**32, size=(5, 7), dtype=np.uint64).astype(np.uint32)
        arr = bits.view(np.float32)
        back, code, used = decode_tensor(encode_tensor(arr, "f32"))
        assert code == 0 and used == 8 + 8 + 35 * 4
        assert back.tobytes() == arr.tobytes()

    @pytest.mark.parametrize(
        "mutate,reason",
        [
            (lambda b: b"XXXX" + b[4:], "bad magic"),
            (lambda b: b[:6], "truncated header"),
            (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
            (lambda b: b[:6] + b"\x07" + b[7:], "dtype"),
            (lambda b: b[:7] + b"\x11" + b[8:], "ndim"),
            (lambda b: b[:10], "dimension list"),
            (lambda b: b[:8] + struct.pack("<I", 0) + b[12:], "zero"),
            (lambda b: b[:-1], "payload truncated"),
            (lambda b: b + b"\x00", "trailing"),
        ],
    )
    def test_structured_errors(self, mutate, reason):
        buf = encode_tensor(np.ones((2, 3), dtype=np.float32))
        with pytest.raises(SnrgFormatError, match=reason) as info:
            decode_tensor(mutate(buf))
        assert isinstance(info.value.offset, int) and info.value.offset >= 0

    def test_overflowing_dims(self):
        buf = b"SNRG" + struct.pack("<HBB", 1, 0, 3) + struct.pack("<3I", 2**31, 2**31, 2**31)
        with pytest.raises(SnrgFormatError, match="overflows"):
            decode_tensor(buf)

    def test_bad_binary_byte(self):
        buf = bytearray(encode_tensor(SpikeTensor(np.ones(4))))
        buf[-2] = 7
        with pytest.raises(SnrgFormatError, match="not 0 or 1") as info:
            decode_tensor(bytes(buf))
        assert info.value.offset == len(buf) - 2

    def test_round_trip_1000_random_tensors(self, rng):
        for i in range(1000):
            shape = random_shape(rng)
            if i % 2:
                arr = (rng.random(shape) < 0.3).astype(np.float32)
                buf = encode_tensor(SpikeTensor(arr))
            else:
                arr = rng.standard_normal(shape).astype(np.float32)
                buf = encode_tensor(arr)
            back, _, _ = decode_tensor(buf)
            assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


class TestFuzz:
    def test_header_mutations_never_crash(self, rng):
        seeds = [encode_tensor(rng.standard_normal(random_shape(rng)).astype(np.float32)) for _ in range(8)]
        seeds += [encode_tensor(SpikeTensor((rng.random(random_shape(rng)) < 0.5).astype(np.float32))) for _ in range(8)]
        outcomes = {"ok": 0, "error": 0}
        for i in range(10_000):
            buf = bytearray(seeds[i % len(seeds)])
            header_len = 8 + 4 * buf[7]
            for _ in range(rng.integers(1, 4)):
                pos = int(rng.integers(0, header_len))
                buf[pos] = int(rng.integers(0, 256))
            if rng.random() < 0.1:
                buf = buf[: int(rng.integers(0, len(buf) + 1))]
            try:
                decode_tensor(bytes(buf))
                outcomes["ok"] += 1
            except SnrgFormatError as err:
                assert err.reason and 0 <= err.offset <= len(buf)
                outcomes["error"] += 1
        assert outcomes["error"] > 0

    @settings(max_examples=300, deadline=None)
    @given(st.binary(max_size=64))
    def test_arbitrary_bytes(self, blob):
        try:
            decode_tensor(blob)
        except SnrgFormatError:
            pass


class TestDataset:
    def test_class_balance_exact(self):
        ds = generate_dataset(SMALL)
        assert np.bincount(ds.labels).tolist() == [10] * 4

    def test_shapes(self):
        ds = generate_dataset(SMALL)
        assert ds.video.shape == (40, 2, 3, 16, 16)
        assert ds.audio.shape == (40, 2, 1, 16, 16)

    def test_sample_is_order_independent(self):
        full = generate_dataset(SMALL)
        v, a, label, _ = generate_sample(SMALL, 17)
        np.testing.assert_array_equal(full.video[17], v)
        np.testing.assert_array_equal(full.audio[17], a)
        assert full.labels[17] == label

    def test_deterministic(self):
        a, b = generate_dataset(SMALL), generate_dataset(SMALL)
        assert a.video.tobytes() == b.video.tobytes()

    def test_seed_changes_data(self):
        a = generate_dataset(SMALL)
        b = generate_dataset(DatasetSpec(samples_per_class=10, hw=(16, 16), seed=1))
        assert a.video.tobytes() != b.video.tobytes()

    def test_full_correlation_aligns_audio(self):
        ds = generate_dataset(DatasetSpec(samples_per_class=10, hw=(16, 16), cross_modal_correlation=1.0))
        np.testing.assert_array_equal(ds.labels, ds.audio_labels)

    def test_correlation_rate(self):
        ds = generate_dataset(DatasetSpec(samples_per_class=250, hw=(16, 16), cross_modal_correlation=0.5))
        agree = (ds.labels == ds.audio_labels).mean()
        # ρ + (1 − ρ)/K agreement in expectation.
        assert abs(agree - 0.625) < 0.05

    def test_noise_free_sample_is_template(self):
        spec = DatasetSpec(samples_per_class=2, hw=(16, 16), noise_sigma=0.0, cross_modal_correlation=1.0)
        pv, pa, sched = class_patterns(spec)
        v, a, label, _ = generate_sample(spec, 3)
        np.testing.assert_allclose(v, sched[label][:, None, None, None] * pv[label], rtol=1e-6)

    def test_odd_classes_carry_a_temporal_signal(self):
        _, _, sched = class_patterns(DatasetSpec(timesteps=4))
        assert (sched[0::2] == 1.0).all()
        assert set(np.unique(sched[1::2])) == {0.25, 1.0}
        assert not np.array_equal(sched[1], sched[3])

    @pytest.mark.parametrize("kwargs", [{"cross_modal_correlation": 1.5}, {"noise_sigma": -1}, {"num_classes": 1}])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ValueError):
            DatasetSpec(**kwargs)


class TestSplits:
    def test_sizes(self):
        splits = make_splits(DatasetSpec())
        assert {k: len(v) for k, v in splits.items()} == {"train": 140, "val": 32, "test": 28}

    def test_disjoint_and_balanced(self):
        labels = np.arange(200) % 4
        idx = split_indices(labels)
        assert not set(idx["train"]) & set(idx["val"])
        assert not set(idx["val"]) & set(idx["test"])
        assert sum(len(v) for v in idx.values()) == 200
        assert np.bincount(labels[idx["val"]]).tolist() == [8] * 4

    def test_save_and_load(self, tmp_path):
        save_dataset(tmp_path, SMALL)
        val = load_split(tmp_path, "val")
        expect = make_splits(SMALL)["val"]
        np.testing.assert_array_equal(val.labels, expect.labels)
        np.testing.assert_array_equal(val.video, expect.video)
        assert load_manifest(tmp_path) == SMALL

    def test_digest_is_reproducible(self, tmp_path):
        save_dataset(tmp_path / "a", SMALL)
        save_dataset(tmp_path / "b", SMALL)
        assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")

    def test_missing_split(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_split(tmp_path, "val")


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        state = {"a.weight": rng.normal(size=(3, 2)).astype(np.float32), "b": np.ones(4, dtype=np.float32)}
        save_checkpoint(tmp_path / "m.ckpt", state, {"config": {"x": 1}})
        header, back = load_checkpoint(tmp_path / "m.ckpt")
        assert header == {"config": {"x": 1}}
        for k, v in state.items():
            assert back[k].tobytes() == v.tobytes()

    def test_corrupt_record_names_tensor(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", {"w": np.ones(3, dtype=np.float32)}, {})
        buf = bytearray((tmp_path / "m.ckpt").read_bytes())
        buf[-16] = ord("Z")
        (tmp_path / "m.ckpt").write_bytes(bytes(buf))
        with pytest.raises(SnrgFormatError, match="'w'"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.ckpt").write_bytes(b"nope")
        with pytest.raises(SnrgFormatError):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_tensor_input_types(self):
        assert decode_tensor(encode_tensor(Tensor(np.ones(2))))[0].tolist() == [1.0, 1.0]
