import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ept.config import ProtocolSpec
from ept.embedding_store import (
    HEADER,
    MAGIC,
    EmbeddingDataset,
    SynthSpec,
    encode_embeddings,
    generate_synthetic,
    load_embeddings,
    save_embeddings,
    split_protocol,
)
from ept.errors import EmbeddingIOError, FormatError, ProtocolError, ValidationError


class TestEptbFile:
    def test_save_and_load(self, tmp_path, hand_dataset):
        path = tmp_path / "hand.eptb"
        save_embeddings(hand_dataset, path)
        loaded = load_embeddings(path)
        assert_array_equal(loaded.features, hand_dataset.features)
        assert_array_equal(loaded.labels, hand_dataset.labels)
        assert loaded.num_classes == 2

    def test_layout(self, hand_dataset):
        payload = encode_embeddings(hand_dataset)
        assert payload[:4] == MAGIC
        assert struct.unpack_from("<IIII", payload, 4) == (1, 4, 2, 2)
        assert len(payload) == HEADER.size + 4 * 2 * 4 + 4 * 4
        assert_array_equal(np.frombuffer(payload[-16:], dtype="<u4"), [0, 0, 1, 1])

    def test_loaded_arrays_are_read_only(self, tmp_path, hand_dataset):
        path = tmp_path / "hand.eptb"
        save_embeddings(hand_dataset, path)
        loaded = load_embeddings(path)
        with pytest.raises(ValueError):
            loaded.features[0, 0] = 9.0

    def test_bad_magic(self, tmp_path, hand_dataset):
        path = tmp_path / "bad.eptb"
        path.write_bytes(b"NOPE" + encode_embeddings(hand_dataset)[4:])
        with pytest.raises(FormatError):
            load_embeddings(path)

    def test_bad_version(self, tmp_path, hand_dataset):
        payload = bytearray(encode_embeddings(hand_dataset))
        payload[4:8] = struct.pack("<I", 2)
        path = tmp_path / "v2.eptb"
        path.write_bytes(bytes(payload))
        with pytest.raises(FormatError):
            load_embeddings(path)

    def test_truncated(self, tmp_path, hand_dataset):
        path = tmp_path / "short.eptb"
        path.write_bytes(encode_embeddings(hand_dataset)[:-3])
        with pytest.raises(EmbeddingIOError):
            load_embeddings(path)
        path.write_bytes(MAGIC)
        with pytest.raises(EmbeddingIOError):
            load_embeddings(path)

    def test_trailing_bytes(self, tmp_path, hand_dataset):
        path = tmp_path / "long.eptb"
        path.write_bytes(encode_embeddings(hand_dataset) + b"\x00")
        with pytest.raises(FormatError):
            load_embeddings(path)

    def test_missing_file_is_an_os_error(self, tmp_path):
        with pytest.raises(OSError):
            load_embeddings(tmp_path / "missing.eptb")

    def test_label_out_of_range(self, tmp_path, hand_dataset):
        payload = bytearray(encode_embeddings(hand_dataset))
        payload[-4:] = struct.pack("<I", 7)
        path = tmp_path / "label.eptb"
        path.write_bytes(bytes(payload))
        with pytest.raises(ValidationError):
            load_embeddings(path)

    def test_non_finite_feature(self):
        dataset = EmbeddingDataset([[0.0, np.nan]], [0], num_classes=1)
        with pytest.raises(ValidationError, match="row 0"):
            dataset.validate()


class TestSynthetic:
    def test_counts(self):
        dataset = generate_synthetic(SynthSpec(num_classes=20, dim=32, samples_per_class=150), seed=1)
        assert dataset.size == 3000
        assert dataset.dim == 32
        assert_array_equal(dataset.label_histogram(), np.full(20, 150))

    def test_deterministic(self):
        spec = SynthSpec(num_classes=5, dim=4, samples_per_class=10)
        first = encode_embeddings(generate_synthetic(spec, seed=7))
        assert first == encode_embeddings(generate_synthetic(spec, seed=7))
        assert first != encode_embeddings(generate_synthetic(spec, seed=8))

    def test_means_on_sphere(self):
        spec = SynthSpec(num_classes=6, dim=16, samples_per_class=400, mean_scale=10.0, noise_std=0.5)
        dataset = generate_synthetic(spec, seed=2)
        for class_id in range(6):
            mean = dataset.features[dataset.rows_of(class_id)].mean(axis=0)
            assert np.linalg.norm(mean) == pytest.approx(10.0, abs=0.2)

    def test_bias_needs_protocol(self):
        with pytest.raises(ValidationError):
            generate_synthetic(SynthSpec(num_classes=8, dim=6, samples_per_class=20, bias_shift=1.5), seed=0)

    def test_bias_moves_only_incremental_support(self, tiny_protocol):
        plain = generate_synthetic(SynthSpec(num_classes=8, dim=6, samples_per_class=20), seed=4)
        biased = generate_synthetic(
            SynthSpec(num_classes=8, dim=6, samples_per_class=20, bias_shift=1.5), seed=4, protocol=tiny_protocol
        )
        plan = split_protocol(plain, tiny_protocol, seed=4)
        moved = np.flatnonzero(np.any(plain.features != biased.features, axis=1))
        expected = np.sort(np.concatenate([stage.support_indices for stage in plan.stages[1:]]))
        assert_array_equal(moved, expected)
        shifts = np.linalg.norm(biased.features[moved].astype(np.float64) - plain.features[moved], axis=1)
        assert_allclose(shifts, 1.5, rtol=1e-5)

    def test_invalid_spec(self):
        with pytest.raises(ValidationError):
            generate_synthetic(SynthSpec(num_classes=0, dim=4, samples_per_class=3), seed=0)


class TestSplitProtocol:
    def test_stage_layout(self, tiny_dataset, tiny_protocol):
        plan = split_protocol(tiny_dataset, tiny_protocol, seed=0)
        assert len(plan) == 3
        assert plan[0].class_ids == [0, 1, 2, 3]
        assert plan[1].class_ids == [4, 5]
        assert plan[2].class_ids == [6, 7]
        for stage in plan.stages[1:]:
            counts = np.bincount(tiny_dataset.labels[stage.support_indices], minlength=8)
            assert_array_equal(counts[stage.class_ids], [3, 3])
        # base support keeps everything that is not test
        assert len(plan[0].support_indices) == 4 * (20 - 5)

    def test_cumulative_test_sets(self, tiny_dataset, tiny_protocol):
        plan = split_protocol(tiny_dataset, tiny_protocol, seed=0)
        for index, stage in enumerate(plan.stages):
            assert set(tiny_dataset.labels[stage.test_indices].tolist()) == set(plan.seen_classes(index))
            assert len(stage.test_indices) == 5 * len(plan.seen_classes(index))
            assert np.all(np.diff(stage.test_indices) > 0)
            assert not np.isin(stage.support_indices, plan[-1].test_indices).any()

    def test_deterministic_and_label_only(self, tiny_dataset, tiny_protocol):
        plan = split_protocol(tiny_dataset, tiny_protocol, seed=5)
        shuffled_features = EmbeddingDataset(tiny_dataset.features[::-1], tiny_dataset.labels, 8)
        again = split_protocol(shuffled_features, tiny_protocol, seed=5)
        for a, b in zip(plan.stages, again.stages):
            assert_array_equal(a.support_indices, b.support_indices)
            assert_array_equal(a.test_indices, b.test_indices)
        other = split_protocol(tiny_dataset, tiny_protocol, seed=6)
        assert not np.array_equal(plan[1].support_indices, other[1].support_indices)

    def test_all_remaining_as_test(self, tiny_dataset):
        proto = ProtocolSpec(base_classes=4, stages=2, ways=2, shots=3, test_per_class="all")
        plan = split_protocol(tiny_dataset, proto, seed=0)
        # base classes hold out 20%, incremental classes test on every non-support sample
        assert len(plan[0].test_indices) == 4 * 4
        assert len(plan[2].test_indices) == 4 * 4 + 4 * 17

    def test_preset_stage_counts(self):
        labels = np.repeat(np.arange(200), 7)
        dataset = EmbeddingDataset(np.zeros((len(labels), 2)), labels, 200)
        assert len(split_protocol(dataset, ProtocolSpec.preset("cub200"), seed=0)) == 11
        assert len(split_protocol(dataset, ProtocolSpec.preset("vtab"), seed=0)) == 10

    def test_not_enough_classes(self, tiny_dataset):
        with pytest.raises(ProtocolError):
            split_protocol(tiny_dataset, ProtocolSpec(base_classes=4, stages=3, ways=2, shots=3), seed=0)

    def test_not_enough_samples(self, tiny_dataset):
        with pytest.raises(ProtocolError):
            split_protocol(tiny_dataset, ProtocolSpec(base_classes=4, stages=2, ways=2, shots=18, test_per_class=5), seed=0)


class TestWorkedExamples:
    def test_single_sample_file_size(self, tmp_path):
        path = tmp_path / "one.eptb"
        save_embeddings(EmbeddingDataset([[0.0]], [0], num_classes=1), path)
        assert path.stat().st_size == HEADER.size + 4 + 4

    def test_nan_rejected_before_write(self, tmp_path):
        path = tmp_path / "nan.eptb"
        with pytest.raises(ValidationError):
            save_embeddings(EmbeddingDataset([[np.nan]], [0], num_classes=1), path)
        assert not path.exists()

    def test_resave_is_byte_identical(self, tmp_path):
        dataset = generate_synthetic(SynthSpec(num_classes=3, dim=5, samples_per_class=4), seed=7)
        first, second = tmp_path / "a.eptb", tmp_path / "b.eptb"
        save_embeddings(dataset, first)
        save_embeddings(load_embeddings(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_zero_noise(self):
        dataset = generate_synthetic(SynthSpec(num_classes=2, dim=3, samples_per_class=3, noise_std=0.0), seed=0)
        for class_id in range(2):
            rows = dataset.features[dataset.rows_of(class_id)]
            assert np.all(rows == rows[0])

    def test_within_class_spread(self):
        dataset = generate_synthetic(SynthSpec(num_classes=2, dim=32, samples_per_class=1000), seed=0)
        for class_id in range(2):
            std = dataset.features[dataset.rows_of(class_id)].std(axis=0)
            assert np.all(np.abs(std - 1.0) < 0.1)

    def test_twenty_class_schedule(self):
        dataset = generate_synthetic(SynthSpec(num_classes=20, dim=4, samples_per_class=60), seed=0)
        plan = split_protocol(dataset, ProtocolSpec(base_classes=10, stages=5, ways=2, shots=5), seed=0)
        assert [len(stage.class_ids) for stage in plan.stages] == [10, 2, 2, 2, 2, 2]
        assert [len(set(dataset.labels[s.test_indices].tolist())) for s in plan.stages] == [10, 12, 14, 16, 18, 20]
        with pytest.raises(ProtocolError):
            split_protocol(dataset, ProtocolSpec(base_classes=11, stages=5, ways=2, shots=5), seed=0)
