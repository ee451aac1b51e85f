"""Synthetic generation, splits, batching and the dataset file format."""

import numpy as np
import pytest

from xmodal.data import (SampleRecord, SynthConfig, TupleDataset, batch_iter,
                         generate_synthetic, load_dataset, save_dataset, split,
                         stack_features)
from xmodal.errors import ContractError, DatasetFormatError

CFG = SynthConfig(num_classes=5, num_tuples=100, input_dim=12, latent_dim=6,
                  noise_sigma=0.05, seed=3)


class TestGenerateSynthetic:
    def test_counts(self):
        ds = generate_synthetic(CFG)
        assert len(ds) == 100
        assert sum(len(g) for g in ds.tuples) == 200
        assert all(max(g[0].labels) < 5 for g in ds.tuples)

    def test_same_seed_bit_identical(self):
        d1, d2 = generate_synthetic(CFG), generate_synthetic(CFG)
        for g1, g2 in zip(d1.tuples, d2.tuples):
            for r1, r2 in zip(g1, g2):
                np.testing.assert_array_equal(r1.features, r2.features)
                assert r1.labels == r2.labels

    def test_different_seed_differs(self):
        other = SynthConfig(**{**CFG.__dict__, "seed": 4})
        d1, d2 = generate_synthetic(CFG), generate_synthetic(other)
        assert any(not np.array_equal(r1.features, r2.features)
                   for g1, g2 in zip(d1.tuples, d2.tuples)
                   for r1, r2 in zip(g1, g2))

    def test_within_class_clustering_noiseless(self):
        cfg = SynthConfig(num_classes=4, num_tuples=80, input_dim=16, latent_dim=8,
                          noise_sigma=0.0, seed=5)
        ds = generate_synthetic(cfg)
        feats = stack_features(ds.tuples, 0)
        labels = [next(iter(g[0].labels)) for g in ds.tuples]
        within, cross = [], []
        for i in range(len(ds)):
            for j in range(i + 1, len(ds)):
                d = np.linalg.norm(feats[i] - feats[j])
                (within if labels[i] == labels[j] else cross).append(d)
        assert np.mean(within) < np.mean(cross)

    def test_multi_label_sizes(self):
        cfg = SynthConfig(num_classes=6, num_tuples=50, multi_label=True,
                          labels_per_tuple=(1, 3), seed=6)
        ds = generate_synthetic(cfg)
        sizes = {len(g[0].labels) for g in ds.tuples}
        assert sizes <= {1, 2, 3} and len(sizes) > 1

    def test_alignment_invariant(self):
        ds = generate_synthetic(CFG)
        for group in ds.tuples:
            assert group[0].labels == group[1].labels
            assert group[0].tuple_id == group[1].tuple_id


class TestSplit:
    def test_paper_ratios(self):
        ds = generate_synthetic(CFG)
        tr, va, te = split(ds, (0.52, 0.24, 0.24), seed=0)
        assert (len(tr), len(va), len(te)) == (52, 24, 24)

    def test_partition_property(self):
        ds = generate_synthetic(CFG)
        tr, va, te = split(ds, (0.5, 0.25, 0.25), seed=1)
        ids = [set(p.tuple_ids()) for p in (tr, va, te)]
        assert ids[0] | ids[1] | ids[2] == set(ds.tuple_ids())
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])

    def test_remainder_goes_to_train(self):
        ds = generate_synthetic(SynthConfig(num_tuples=101, seed=7))
        tr, va, te = split(ds, (0.52, 0.24, 0.24), seed=0)
        assert (len(tr), len(va), len(te)) == (53, 24, 24)

    def test_degenerate_rejected(self):
        ds = generate_synthetic(CFG)
        with pytest.raises(ContractError):
            split(ds, (1.0, 0.0, 0.0), seed=0)
        with pytest.raises(ContractError):
            split(ds, (0.5, 0.3, 0.3), seed=0)

    def test_deterministic(self):
        ds = generate_synthetic(CFG)
        a = split(ds, (0.52, 0.24, 0.24), seed=9)
        b = split(ds, (0.52, 0.24, 0.24), seed=9)
        for pa, pb in zip(a, b):
            assert pa.tuple_ids() == pb.tuple_ids()


class TestBatchIter:
    def test_sizes_with_partial_batch(self):
        ds = generate_synthetic(SynthConfig(num_tuples=10, seed=8))
        sizes = [len(b) for b in batch_iter(ds, 4, seed=0, epoch=0)]
        assert sizes == [4, 4, 2]

    def test_trailing_singleton_dropped(self):
        ds = generate_synthetic(SynthConfig(num_tuples=13, seed=8))
        sizes = [len(b) for b in batch_iter(ds, 4, seed=0, epoch=0)]
        assert sizes == [4, 4, 4]

    def test_same_key_same_order(self):
        ds = generate_synthetic(CFG)
        order = lambda e: [g[0].tuple_id for b in batch_iter(ds, 8, 1, e) for g in b]
        assert order(3) == order(3)
        assert order(3) != order(4)

    def test_epoch_covers_each_tuple_once(self):
        ds = generate_synthetic(CFG)
        seen = [g[0].tuple_id for b in batch_iter(ds, 8, 0, 0) for g in b]
        assert len(seen) == len(set(seen))

    def test_single_batch(self):
        ds = generate_synthetic(SynthConfig(num_tuples=256, seed=9))
        assert [len(b) for b in batch_iter(ds, 256, 0, 0)] == [256]

    def test_t1_rejected(self):
        ds = generate_synthetic(CFG)
        with pytest.raises(ContractError):
            list(batch_iter(ds, 1, 0, 0))


class TestFileRoundTrip:
    def test_save_load_value_identical(self, tmp_path):
        ds = generate_synthetic(CFG)
        path = tmp_path / "ds.txt"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        assert loaded.num_modalities == ds.num_modalities
        assert len(loaded) == len(ds)
        for g1, g2 in zip(ds.tuples, loaded.tuples):
            for r1, r2 in zip(g1, g2):
                np.testing.assert_array_equal(r1.features, r2.features)
                assert r1.labels == r2.labels

    def test_byte_identical_rewrites(self, tmp_path):
        ds = generate_synthetic(CFG)
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        save_dataset(ds, p1)
        save_dataset(ds, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_extra_field_rejected_with_line(self, tmp_path):
        ds = generate_synthetic(SynthConfig(num_tuples=10, seed=1))
        path = tmp_path / "ds.txt"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        lines[3] += "\tunexpected"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match="line 4"):
            load_dataset(path)

    def test_truncated_file_names_last_good_line(self, tmp_path):
        ds = generate_synthetic(SynthConfig(num_tuples=10, seed=1))
        path = tmp_path / "ds.txt"
        save_dataset(ds, path)
        text = path.read_text()
        path.write_text(text[:len(text) // 2])  # cut mid-record
        with pytest.raises(DatasetFormatError, match="last good line"):
            load_dataset(path)

    def test_missing_modality_rejected(self, tmp_path):
        ds = generate_synthetic(SynthConfig(num_tuples=10, seed=1))
        path = tmp_path / "ds.txt"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        del lines[2]  # drop one record of a tuple
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match="modalities"):
            load_dataset(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "ds.txt"
        path.write_text("not a dataset\n")
        with pytest.raises(DatasetFormatError, match="line 1"):
            load_dataset(path)

    def test_mismatched_labels_rejected(self, tmp_path):
        recs = [SampleRecord(0, 0, np.ones(2), {1}), SampleRecord(0, 1, np.ones(2), {1})]
        path = tmp_path / "ds.txt"
        save_dataset(TupleDataset(2, [recs], ["a", "b"]), path)
        text = path.read_text().replace("\t1\n", "\t0\n", 1)
        path.write_text(text)
        with pytest.raises(DatasetFormatError, match="mismatched label"):
            load_dataset(path)


class TestSynthConfig:
    def test_from_file_with_overrides(self, tmp_path):
        cfg_file = tmp_path / "synth.cfg"
        cfg_file.write_text("# comment\nnum_classes = 6\nnum_tuples = 40\nseed = 2\n")
        cfg = SynthConfig.from_file(cfg_file, {"seed": "5"})
        assert cfg.num_classes == 6 and cfg.num_tuples == 40 and cfg.seed == 5

    def test_unknown_key_rejected(self, tmp_path):
        cfg_file = tmp_path / "synth.cfg"
        cfg_file.write_text("numclasses=6\n")
        with pytest.raises(ContractError, match="numclasses"):
            SynthConfig.from_file(cfg_file)

    def test_validation(self):
        with pytest.raises(ContractError):
            SynthConfig(num_classes=1)
        with pytest.raises(ContractError):
            SynthConfig(num_tuples=5)
        with pytest.raises(ContractError):
            SynthConfig(noise_sigma=-0.1)
