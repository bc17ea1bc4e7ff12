import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpmmad import (
    AnomalyMap,
    Checkpoint,
    EmbeddingBatch,
    FormatError,
    ShardRecord,
    SufficientStats,
    anomaly_scores,
    read_checkpoint,
    read_map,
    read_mask_pgm,
    read_shard,
    render_map_pgm,
    write_checkpoint,
    write_map,
    write_mask_pgm,
    write_shard,
)

from util import random_model


def f32_records(rng, n_records, dim):
    records = []
    for i in range(n_records):
        gh, gw = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        data = rng.normal(size=(gh * gw, dim)).astype(np.float32).astype(np.float64)
        mask = f"masks/rec{i}.pgm" if rng.random() < 0.5 else None
        records.append(ShardRecord(f"img/{i:03d}.png", gh, gw, data, mask))
    return records


class TestShardRoundTrip:
    def test_round_trip_preserves_everything(self, tmp_path):
        rng = np.random.default_rng(0)
        records = f32_records(rng, 5, 7)
        path = tmp_path / "data.adne"
        write_shard(path, records, normalized=True)
        loaded = read_shard(path)
        assert loaded.normalized
        assert len(loaded.records) == 5
        for original, read in zip(records, loaded.records):
            assert read.image_id == original.image_id
            assert (read.grid_h, read.grid_w) == (original.grid_h, original.grid_w)
            assert read.mask_path == original.mask_path
            assert np.array_equal(read.data, original.data)

    def test_empty_shard_is_24_byte_header(self, tmp_path):
        path = tmp_path / "empty.adne"
        write_shard(path, [])
        assert os.path.getsize(path) == 24
        loaded = read_shard(path)
        assert loaded.records == []
        assert not loaded.normalized

    @settings(max_examples=50, deadline=None)
    @given(st.data())
    def test_random_round_trips(self, tmp_path_factory, data):
        rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
        dim = data.draw(st.integers(1, 16))
        records = f32_records(rng, data.draw(st.integers(0, 6)), dim)
        normalized = data.draw(st.booleans())
        path = tmp_path_factory.mktemp("shards") / "r.adne"
        write_shard(path, records, normalized=normalized)
        loaded = read_shard(path)
        assert loaded.normalized == normalized
        assert len(loaded.records) == len(records)
        for original, read in zip(records, loaded.records):
            assert np.array_equal(read.data, original.data)
            assert read.image_id == original.image_id
            assert read.mask_path == original.mask_path

    def test_unicode_ids_survive(self, tmp_path):
        rec = ShardRecord("bild-äöü/片", 1, 1, np.zeros((1, 2)))
        path = tmp_path / "u.adne"
        write_shard(path, [rec])
        assert read_shard(path).records[0].image_id == "bild-äöü/片"

    def test_mixed_dimensions_rejected_on_write(self, tmp_path):
        records = [
            ShardRecord("a", 1, 1, np.zeros((1, 2))),
            ShardRecord("b", 1, 1, np.zeros((1, 3))),
        ]
        with pytest.raises(ValueError, match="dimensionality"):
            write_shard(tmp_path / "bad.adne", records)

    def test_corrupted_magic_gives_structured_error(self, tmp_path):
        path = tmp_path / "bad.adne"
        write_shard(path, [ShardRecord("a", 1, 1, np.zeros((1, 2)))])
        raw = bytearray(path.read_bytes())
        raw[:4] = b"WHAT"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="bad magic"):
            read_shard(path)

    def test_truncation_gives_structured_error(self, tmp_path):
        path = tmp_path / "t.adne"
        write_shard(path, [ShardRecord("abc", 2, 2, np.ones((4, 3)))])
        raw = path.read_bytes()
        for cut in (3, 10, 23, 30, len(raw) - 5):
            path.write_bytes(raw[:cut])
            with pytest.raises(FormatError, match="truncated"):
                read_shard(path)

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "v.adne"
        write_shard(path, [])
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="unsupported"):
            read_shard(path)


class TestCheckpointRoundTrip:
    def test_round_trip_with_stats_is_bitwise(self, tmp_path):
        rng = np.random.default_rng(1)
        model = random_model(rng, 6, 4)
        p = rng.dirichlet(np.ones(6))
        stats = SufficientStats(p, rng.normal(size=(6, 4)), rng.uniform(1, 2, (6, 4)), 37)
        path = tmp_path / "m.dpmm"
        write_checkpoint(path, Checkpoint(model, stats))
        loaded = read_checkpoint(path)
        assert np.array_equal(loaded.model.means, model.means)
        assert np.array_equal(loaded.model.vars, model.vars)
        assert np.array_equal(loaded.model.sticks, model.sticks)
        assert loaded.model.alpha == model.alpha
        assert loaded.model.normalized_input == model.normalized_input
        assert np.array_equal(loaded.stats.p_bar, stats.p_bar)
        assert np.array_equal(loaded.stats.m_bar, stats.m_bar)
        assert np.array_equal(loaded.stats.c_bar, stats.c_bar)
        assert loaded.stats.batch_size == 37

    def test_write_read_write_is_byte_stable(self, tmp_path):
        rng = np.random.default_rng(2)
        model = random_model(rng, 3, 5, normalized=True)
        p1 = tmp_path / "a.dpmm"
        p2 = tmp_path / "b.dpmm"
        write_checkpoint(p1, Checkpoint(model))
        write_checkpoint(p2, read_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_stats_free_checkpoint_scores_but_rejects_resume(self, tmp_path):
        rng = np.random.default_rng(3)
        model = random_model(rng, 4, 3)
        path = tmp_path / "nostats.dpmm"
        write_checkpoint(path, Checkpoint(model))
        loaded = read_checkpoint(path)
        scores = anomaly_scores(
            EmbeddingBatch(rng.normal(size=(5, 3))), loaded.model, "cosine"
        )
        assert scores.shape == (5,)
        with pytest.raises(ValueError, match="resume"):
            loaded.require_stats()

    def test_unknown_version_rejected(self, tmp_path):
        rng = np.random.default_rng(4)
        path = tmp_path / "v.dpmm"
        write_checkpoint(path, Checkpoint(random_model(rng, 2, 2)))
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="unsupported"):
            read_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        rng = np.random.default_rng(5)
        path = tmp_path / "t.dpmm"
        write_checkpoint(path, Checkpoint(random_model(rng, 2, 2)))
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError, match="truncated"):
            read_checkpoint(path)


class TestMapAndMaskRoundTrip:
    def test_map_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(6)
        scores = rng.normal(size=(9, 13)).astype(np.float32).astype(np.float64)
        path = tmp_path / "m.amap"
        write_map(path, AnomalyMap(scores, image_id="x"))
        loaded = read_map(path, image_id="x")
        assert np.array_equal(loaded.scores, scores)
        assert loaded.image_id == "x"

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31))
    def test_random_map_round_trips(self, tmp_path_factory, h, w, seed):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=(h, w)).astype(np.float32).astype(np.float64)
        path = tmp_path_factory.mktemp("maps") / "m.amap"
        write_map(path, AnomalyMap(scores))
        assert np.array_equal(read_map(path).scores, scores)

    def test_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        mask = rng.random((11, 4)) < 0.3
        path = tmp_path / "m.pgm"
        write_mask_pgm(path, mask)
        assert np.array_equal(read_mask_pgm(path), mask)

    def test_all_anomalous_mask(self, tmp_path):
        path = tmp_path / "ones.pgm"
        write_mask_pgm(path, np.ones((3, 5), dtype=bool))
        assert read_mask_pgm(path).all()

    def test_values_above_127_read_as_anomalous(self, tmp_path):
        path = tmp_path / "gray.pgm"
        body = bytes([0, 127, 128, 255])
        path.write_bytes(b"P5\n4 1\n255\n" + body)
        np.testing.assert_array_equal(read_mask_pgm(path), [[False, False, True, True]])

    def test_pgm_with_comment_parses(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 1\n255\n\xff\x00")
        np.testing.assert_array_equal(read_mask_pgm(path), [[True, False]])

    def test_malformed_pgm_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P6\n2 1\n255\n\x00\x00")
        with pytest.raises(FormatError, match="bad magic"):
            read_mask_pgm(path)
        path.write_bytes(b"P5\n2 x\n255\n\x00\x00")
        with pytest.raises(FormatError):
            read_mask_pgm(path)
        path.write_bytes(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(FormatError, match="truncated"):
            read_mask_pgm(path)

    def test_constant_map_renders_all_zero(self, tmp_path):
        path = tmp_path / "flat.pgm"
        render_map_pgm(AnomalyMap(np.full((2, 3), 4.2)), path)
        raw = path.read_bytes()
        assert raw.endswith(b"\x00" * 6)

    def test_render_spans_full_gray_range(self, tmp_path):
        path = tmp_path / "g.pgm"
        render_map_pgm(AnomalyMap(np.array([[0.0, 0.5, 1.0]])), path)
        assert path.read_bytes().endswith(bytes([0, 128, 255]))

    def test_map_truncation_rejected(self, tmp_path):
        path = tmp_path / "t.amap"
        write_map(path, AnomalyMap(np.zeros((4, 4))))
        raw = path.read_bytes()
        path.write_bytes(raw[:20])
        with pytest.raises(FormatError, match="truncated"):
            read_map(path)
