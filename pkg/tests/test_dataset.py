"""Dataset generation, normalization, encoding, and file roundtrips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fblalloc import dataset as ds
from fblalloc import solver
from fblalloc.config import with_nodes
from fblalloc.errors import DatasetFormatError


@pytest.fixture(scope="module")
def small_run(cfg):
    sim = with_nodes(cfg, 4)
    records, meta = ds.generate_dataset(sim, seed=505, frames=40)
    return sim, records, meta


class TestGenerate:
    def test_single_frame_self_consistency(self, cfg):
        sim = with_nodes(cfg, 3)
        records, meta = ds.generate_dataset(sim, seed=7, frames=1)
        assert len(records) + len(meta.skipped_frames) == 1
        if records:
            rec = records[0]
            again = solver.solve_network(rec.gains, sim)
            np.testing.assert_array_equal(again.m, rec.m_opt)

    def test_reproducible_records(self, small_run):
        sim, records, meta = small_run
        records2, meta2 = ds.generate_dataset(sim, seed=505, frames=40)
        assert len(records) == len(records2)
        for a, b in zip(records, records2):
            np.testing.assert_array_equal(a.gains, b.gains)
            np.testing.assert_array_equal(a.m_opt, b.m_opt)

    def test_blocklengths_within_global_bounds(self, small_run):
        sim, records, meta = small_run
        m = np.stack([r.m_opt for r in records])
        assert m.min() >= meta.m_lo
        assert m.max() <= meta.m_hi == 100  # delay budget caps at 100 symbols

    def test_every_record_reverifies(self, small_run):
        sim, records, meta = small_run
        for rec in records[:10]:
            again = solver.solve_network(rec.gains, sim)
            np.testing.assert_array_equal(again.m, rec.m_opt)


class TestNormalization:
    def test_mean_maps_to_zero(self, small_run):
        _, _, meta = small_run
        g = 10.0 ** (meta.cond_mean_db / 10.0)
        np.testing.assert_allclose(ds.normalize_condition(g, meta),
                                   np.zeros(meta.n), atol=1e-12)

    def test_one_sigma_maps_to_one(self, small_run):
        _, _, meta = small_run
        g = 10.0 ** ((meta.cond_mean_db + meta.cond_std_db) / 10.0)
        np.testing.assert_allclose(ds.normalize_condition(g, meta),
                                   np.ones(meta.n), rtol=1e-12)

    def test_roundtrip(self, small_run):
        _, records, meta = small_run
        g = records[0].gains
        back = ds.denormalize_condition(ds.normalize_condition(g, meta), meta)
        np.testing.assert_allclose(back, g, rtol=1e-12)

    def test_rejects_nonpositive(self, small_run):
        _, _, meta = small_run
        with pytest.raises(ValueError):
            ds.normalize_condition(np.zeros(meta.n), meta)


class TestEncoding:
    def test_endpoints_and_midpoint(self, small_run):
        _, _, meta = small_run
        assert ds.encode_blocklength(meta.m_lo, meta) == -1.0
        assert ds.encode_blocklength(meta.m_hi, meta) == 1.0
        mid = (meta.m_lo + meta.m_hi) / 2
        assert ds.encode_blocklength(mid, meta) == pytest.approx(0.0, abs=1e-15)
        assert ds.decode_blocklength(-1.0, meta) == meta.m_lo
        assert ds.decode_blocklength(1.0, meta) == meta.m_hi

    def test_exact_roundtrip_every_integer(self, small_run):
        _, _, meta = small_run
        m = np.arange(meta.m_lo, meta.m_hi + 1)
        np.testing.assert_array_equal(
            ds.decode_blocklength(ds.encode_blocklength(m, meta), meta), m)

    @given(st.floats(min_value=-5, max_value=5, allow_nan=False))
    @settings(max_examples=100, deadline=None)
    def test_decode_always_clamps(self, y):
        meta = ds.DatasetMeta(n=1, frames=1, seed=0, cfg={},
                              cond_mean_db=np.zeros(1), cond_std_db=np.ones(1),
                              m_lo=1, m_hi=100)
        m = int(ds.decode_blocklength(y, meta))
        assert 1 <= m <= 100


class TestFileRoundtrip:
    def test_lossless(self, small_run, tmp_path):
        sim, records, meta = small_run
        path = str(tmp_path / "d.csv")
        ds.write_dataset(records, meta, path)
        records2, meta2 = ds.read_dataset(path)
        assert len(records) == len(records2)
        for a, b in zip(records, records2):
            assert a.frame_index == b.frame_index
            np.testing.assert_array_equal(a.gains, b.gains)
            np.testing.assert_array_equal(a.m_opt, b.m_opt)
        np.testing.assert_array_equal(meta.cond_mean_db, meta2.cond_mean_db)
        assert meta2.m_lo == meta.m_lo and meta2.m_hi == meta.m_hi

    def test_byte_identical_rewrite(self, small_run, tmp_path):
        sim, records, meta = small_run
        p1, p2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        ds.write_dataset(records, meta, p1)
        ds.write_dataset(records, meta, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_sidecar_stats_match_recomputation(self, small_run, tmp_path):
        sim, records, meta = small_run
        path = str(tmp_path / "d.csv")
        ds.write_dataset(records, meta, path)
        records2, meta2 = ds.read_dataset(path)
        mean, std = ds.conditioning_stats(np.stack([r.gains for r in records2]))
        np.testing.assert_allclose(mean, meta2.cond_mean_db, rtol=1e-9)
        np.testing.assert_allclose(std, meta2.cond_std_db, rtol=1e-9)

    def test_truncated_row_names_line(self, small_run, tmp_path):
        sim, records, meta = small_run
        path = str(tmp_path / "d.csv")
        ds.write_dataset(records, meta, path)
        lines = open(path).read().splitlines()
        lines[3] = lines[3].rsplit(",", 1)[0]  # drop last cell of row 3
        open(path, "w").write("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match=":4:"):
            ds.read_dataset(path)

    def test_sidecar_width_mismatch(self, small_run, tmp_path):
        sim, records, meta = small_run
        path = str(tmp_path / "d.csv")
        ds.write_dataset(records, meta, path)
        import json
        meta_doc = json.load(open(path + ".meta.json"))
        meta_doc["n"] = meta.n + 1
        json.dump(meta_doc, open(path + ".meta.json", "w"))
        with pytest.raises(DatasetFormatError, match="header"):
            ds.read_dataset(path)

    def test_version_mismatch(self, small_run, tmp_path):
        sim, records, meta = small_run
        path = str(tmp_path / "d.csv")
        ds.write_dataset(records, meta, path)
        import json
        meta_doc = json.load(open(path + ".meta.json"))
        meta_doc["format_version"] = 999
        json.dump(meta_doc, open(path + ".meta.json", "w"))
        with pytest.raises(DatasetFormatError, match="version"):
            ds.read_dataset(path)

    def test_missing_sidecar(self, tmp_path):
        path = str(tmp_path / "orphan.csv")
        open(path, "w").write("frame,g_1,m_1\n")
        with pytest.raises(DatasetFormatError, match="sidecar"):
            ds.read_dataset(path)
