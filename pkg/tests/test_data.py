"""Corpus metadata, synthetic generation, and evaluation tests."""

import numpy as np
import pytest

from flexinet import data as D
from flexinet.data import (ClipRecord, EvalReport, SCENES, SyntheticCorpusSpec,
                           energy_histogram, evaluate, generate_synthetic_corpus,
                           load_tau_metadata)
from flexinet.features import Waveform, log_mel, read_wav


class TestClipRecord:
    def test_unseen_device_never_in_train(self):
        with pytest.raises(ValueError, match="test-only"):
            ClipRecord("x", None, "airport", "S4", split="train")

    def test_unknown_device_rejected(self):
        with pytest.raises(ValueError, match="device token"):
            ClipRecord("x", None, "airport", "Z9")

    def test_unknown_scene_rejected(self):
        with pytest.raises(ValueError, match="scene"):
            ClipRecord("x", None, "volcano", "A")


class TestMetadata:
    def test_tab_separated_roundtrip(self, tmp_path):
        meta = tmp_path / "meta.csv"
        meta.write_text(
            "filename\tscene_label\tdevice\tcity\tsplit\n"
            "audio/airport-city0-0-a.wav\tairport\tA\tcity0\ttrain\n"
            "audio/bus-city1-0-s4.wav\tbus\tS4\tcity1\ttest\n"
        )
        recs = load_tau_metadata(meta)
        assert len(recs) == 2
        assert recs[0].device == "A" and recs[0].split == "train"
        assert recs[1].device == "S4" and recs[1].split == "test"

    def test_device_from_filename(self, tmp_path):
        meta = tmp_path / "meta.csv"
        meta.write_text(
            "filename\tscene_label\tidentifier\n"
            "audio/airport-lisbon-1000-40000-a.wav\tairport\tlisbon-1000\n"
        )
        recs = load_tau_metadata(meta, default_split="train")
        assert recs[0].device == "A"
        assert recs[0].city == "lisbon"

    def test_empty_file_warns(self, tmp_path):
        meta = tmp_path / "meta.csv"
        meta.write_text("")
        with pytest.warns(UserWarning, match="empty"):
            assert load_tau_metadata(meta) == []

    def test_unknown_device_token_reports_line(self, tmp_path):
        meta = tmp_path / "meta.csv"
        meta.write_text(
            "filename\tscene_label\tdevice\n"
            "audio/a.wav\tairport\tA\n"
            "audio/b.wav\tbus\tQ7\n"
        )
        with pytest.raises(ValueError, match=r"meta.csv:3.*'Q7'"):
            load_tau_metadata(meta)

    def test_malformed_row_reports_line(self, tmp_path):
        meta = tmp_path / "meta.csv"
        meta.write_text("filename\tscene_label\tdevice\naudio/a.wav\tairport\n")
        with pytest.raises(ValueError, match="meta.csv:2"):
            load_tau_metadata(meta)

    def test_split_counts(self):
        recs = [ClipRecord("a", None, "airport", "A", split="train"),
                ClipRecord("b", None, "bus", "B", split="test")]
        counts = D.split_counts(recs)
        assert counts == {"train": 1, "test": 1, "unused": 0}


class TestSyntheticCorpus:
    @pytest.fixture(scope="class")
    def corpus(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("corpus")
        spec = SyntheticCorpusSpec(train_clips_per_cell=2, test_clips_per_cell=1, seed=3)
        records = generate_synthetic_corpus(spec, root)
        return root, spec, records

    def test_layout(self, corpus):
        _, spec, records = corpus
        trains = [r for r in records if r.split == "train"]
        tests = [r for r in records if r.split == "test"]
        assert len(trains) == 10 * 6 * spec.train_clips_per_cell
        assert len(tests) == 10 * 9 * spec.test_clips_per_cell
        assert all(r.device in D.SEEN_DEVICES for r in trains)
        assert {r.device for r in tests} == set(D.DEVICES)

    def test_clips_are_canonical(self, corpus):
        _, _, records = corpus
        w = read_wav(records[0].path)
        assert w.sample_rate == 32000
        assert len(w.samples) == 32000

    def test_meta_roundtrip(self, corpus):
        root, _, records = corpus
        loaded = load_tau_metadata(root / "meta.csv")
        assert len(loaded) == len(records)
        by_id = {r.clip_id: r for r in records}
        for r in loaded:
            orig = by_id[r.clip_id]
            assert (r.scene_label, r.device, r.split) == (
                orig.scene_label, orig.device, orig.split)

    def test_determinism(self, corpus, tmp_path):
        root, spec, records = corpus
        again = generate_synthetic_corpus(spec, tmp_path / "again")
        for a, b in zip(records[:20], again[:20]):
            assert a.clip_id == b.clip_id
            assert a.path.read_bytes() == b.path.read_bytes()

    def test_zero_cell_spec_empty(self, tmp_path):
        spec = SyntheticCorpusSpec(train_clips_per_cell=0, test_clips_per_cell=0)
        records = generate_synthetic_corpus(spec, tmp_path / "empty")
        assert records == []

    def test_nearest_centroid_oracle_on_device_a(self, corpus):
        _, _, records = corpus
        device_a = [r for r in records if r.device == "A"]
        feats = {r.clip_id: log_mel(read_wav(r.path)).mean(axis=3).reshape(-1)
                 for r in device_a}
        centroids = {}
        for si in range(10):
            train_f = [feats[r.clip_id] for r in device_a
                       if r.split == "train" and r.label_index == si]
            centroids[si] = np.mean(train_f, axis=0)
        test_recs = [r for r in device_a if r.split == "test"]
        correct = sum(
            min(centroids, key=lambda s: np.linalg.norm(feats[r.clip_id] - centroids[s]))
            == r.label_index
            for r in test_recs
        )
        assert correct / len(test_recs) >= 0.9


class _OracleModel:
    """Predicts the true label passed at construction (for report tests)."""

    def __init__(self, labels):
        self.labels = np.asarray(labels)

    def predict(self, feats):
        logits = np.zeros((len(self.labels), 10), dtype=np.float32)
        logits[np.arange(len(self.labels)), self.labels] = 10.0
        return logits


class _RandomModel:
    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)

    def predict(self, feats):
        return self.rng.standard_normal((feats.shape[0], 10)).astype(np.float32)


def _fake_records(n_per_device=30, split="test"):
    records = []
    rng = np.random.default_rng(5)
    for d in D.DEVICES:
        for i in range(n_per_device):
            scene = SCENES[rng.integers(0, 10)]
            records.append(ClipRecord(f"{scene}-{d}-{i}", None, scene, d, split=split))
    return records


class TestEvaluate:
    def test_perfect_model_all_ones_diagonal_confusion(self):
        records = _fake_records(10)
        labels = [r.label_index for r in records]
        feats = np.zeros((len(records), 1, 4, 4), dtype=np.float32)
        report = evaluate(_OracleModel(labels), records, feats)
        assert report.macro_acc == 1.0
        assert all(v == 1.0 for v in report.per_device.values())
        assert report.confusion.sum() == report.confusion.trace()

    def test_random_model_near_chance(self):
        records = _fake_records(120)
        feats = np.zeros((len(records), 1, 4, 4), dtype=np.float32)
        report = evaluate(_RandomModel(), records, feats)
        for d, acc in report.per_device.items():
            assert abs(acc - 0.10) <= 0.06, (d, acc)
        assert abs(report.macro_acc - 0.10) <= 0.03

    def test_confusion_rows_sum_to_class_counts(self):
        records = _fake_records(20)
        feats = np.zeros((len(records), 1, 4, 4), dtype=np.float32)
        report = evaluate(_RandomModel(seed=1), records, feats)
        true = np.array([r.label_index for r in records])
        for si in range(10):
            assert report.confusion[si].sum() == (true == si).sum()

    def test_table_layout_matches_device_columns(self):
        records = _fake_records(5)
        labels = [r.label_index for r in records]
        feats = np.zeros((len(records), 1, 4, 4), dtype=np.float32)
        report = evaluate(_OracleModel(labels), records, feats)
        header, values = report.device_row()
        assert header == ["A", "B", "C", "S1", "S2", "S3", "S4", "S5", "S6", "ACC"]
        assert len(values) == 10

    def test_macro_is_unweighted_device_mean(self):
        records = _fake_records(15)
        feats = np.zeros((len(records), 1, 4, 4), dtype=np.float32)
        report = evaluate(_RandomModel(seed=2), records, feats)
        assert report.macro_acc == pytest.approx(
            np.mean(list(report.per_device.values())))

    def test_order_invariance(self):
        records = _fake_records(10)
        labels = [r.label_index for r in records]
        feats = np.zeros((len(records), 1, 4, 4), dtype=np.float32)
        r1 = evaluate(_OracleModel(labels), records, feats)
        perm = np.random.default_rng(3).permutation(len(records))
        r2 = evaluate(_OracleModel([labels[i] for i in perm]),
                      [records[i] for i in perm], feats[perm])
        assert r1.per_device == r2.per_device
        assert r1.macro_acc == r2.macro_acc

    def test_empty_records_raise(self):
        with pytest.raises(ValueError, match="empty"):
            evaluate(_RandomModel(), [], np.zeros((0, 1, 4, 4)))


class TestEnergyHistogram:
    def test_silent_corpus(self):
        waves = [Waveform(np.zeros(100, dtype=np.float32)) for _ in range(3)]
        hist = energy_histogram([None] * 3, bins=5, waveforms=waves)
        assert hist.mean == 0.0
        assert hist.counts.sum() == 3

    def test_two_clip_mean(self):
        waves = [Waveform(np.ones(1, dtype=np.float32)),
                 Waveform(np.sqrt(3.0) * np.ones(1, dtype=np.float32))]
        hist = energy_histogram([None, None], bins=4, waveforms=waves)
        assert hist.mean == pytest.approx(2.0)
