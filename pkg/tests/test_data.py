import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protodoctor.data import (ClinicalRecord, DatasetSplit, NormalizationStats, compute_stats,
                              encode_partitions, impute_series, preprocess_record, read_records,
                              record_from_json, record_to_json, split_dataset, write_records)
from protodoctor.errors import SchemaError
from protodoctor.schema import Variable, default_schema, parse_schema, synthetic_schema

MINI_SCHEMA = """
[demo.Age]
kind = numeric
normal = 60

[physio.Temp]
kind = numeric
normal = 37.0
system = other
upper = 38.0
lower = 36.0

[physio.GCS]
kind = categorical
categories = 3|9|15
normal = 15
system = neurological
threshold = 15
"""


def _record(aid="A1", pid="P1", temp=(36.5, None, 38.0), gcs=("15", "9", None), age=50.0, label=0):
    T = len(temp)
    values = np.empty((T, 2), dtype=object)
    observed = np.zeros((T, 2), dtype=bool)
    for t in range(T):
        values[t, 0], observed[t, 0] = temp[t], temp[t] is not None
        values[t, 1], observed[t, 1] = gcs[t], gcs[t] is not None
    return ClinicalRecord(aid, pid, {"Age": age}, ("Temp", "GCS"), values, observed, label)


class TestSchema:
    def test_default_schema_width_is_76(self):
        s = default_schema()
        assert s.physio_width == 76
        assert len(s.physiology) == 17

    def test_default_schema_demographic_width(self):
        assert default_schema().demo_width == 10

    def test_gcs_total_threshold_lives_in_schema(self):
        gcs_t = [v for v in default_schema().physiology if v.threshold is not None]
        assert any(v.threshold == 15 for v in gcs_t)

    def test_round_trip_text(self):
        s = default_schema()
        again = parse_schema(s.to_text(), name=s.name)
        assert again.fingerprint() == s.fingerprint()

    def test_channel_groups_partition_columns(self):
        s = default_schema()
        flat = sorted(c for g in s.channel_groups() for c in g)
        assert flat == list(range(s.physio_width))

    def test_unknown_kind_rejected(self):
        with pytest.raises(SchemaError):
            Variable("x", "vector", 0.0)

    def test_categorical_normal_must_be_category(self):
        with pytest.raises(SchemaError):
            Variable("x", "categorical", "7", categories=("1", "2"))

    def test_category_matches_numeric_reading(self):
        v = Variable("x", "categorical", "15", categories=("3", "9", "15"))
        assert v.category_index(15) == v.category_index("15.0") == 2


class TestImputation:
    def test_locf_fills_gap(self):
        assert impute_series([1.0, None, 3.0], [True, False, True], 0.0) == [1.0, 1.0, 3.0]

    def test_normal_value_before_first_observation(self):
        assert impute_series([None, None], [False, False], 37.0) == [37.0, 37.0]

    def test_mask_marks_missing_hour(self):
        schema = parse_schema(MINI_SCHEMA)
        rec = _record()
        stats = NormalizationStats({"Temp": 0.0}, {"Temp": 1.0}, {"Age": 0.0}, {"Age": 1.0})
        enc = preprocess_record(rec, stats, schema)
        # columns: Temp, Temp mask, GCS one-hot (3), GCS mask
        assert enc.physiology_encoded[:, 1].tolist() == [1.0, 0.0, 1.0]
        assert enc.physiology_encoded[1, 0] == 36.5
        assert enc.physiology_encoded[2, 2:5].tolist() == [0.0, 1.0, 0.0]  # carried "9"
        assert enc.physiology_encoded[:, 5].tolist() == [1.0, 1.0, 0.0]

    def test_never_observed_uses_normal(self):
        schema = parse_schema(MINI_SCHEMA)
        rec = _record(temp=(None, None, None))
        stats = NormalizationStats({"Temp": 0.0}, {"Temp": 1.0}, {"Age": 0.0}, {"Age": 1.0})
        enc = preprocess_record(rec, stats, schema)
        assert enc.physiology_encoded[:, 0].tolist() == [37.0] * 3
        assert enc.physiology_encoded[:, 1].tolist() == [0.0] * 3


class TestPreprocessing:
    def test_unknown_variable_is_schema_error(self):
        schema = parse_schema(MINI_SCHEMA)
        rec = ClinicalRecord("A", "P", {"Age": 1}, ("Temp", "GCS", "Extra"),
                             np.ones((1, 3), dtype=object), np.ones((1, 3), bool), 0)
        stats = compute_stats([_record()], schema)
        with pytest.raises(SchemaError):
            preprocess_record(rec, stats, schema)

    def test_unknown_category_is_schema_error(self):
        schema = parse_schema(MINI_SCHEMA)
        with pytest.raises(SchemaError):
            preprocess_record(_record(gcs=("4", None, None)), compute_stats([_record()], schema), schema)

    def test_zero_std_warns_and_uses_one(self):
        schema = parse_schema(MINI_SCHEMA)
        recs = [_record(aid=f"A{i}", temp=(37.0, 37.0, 37.0), age=50.0) for i in range(3)]
        stats = compute_stats(recs, schema)
        with pytest.warns(RuntimeWarning, match="zero standard deviation"):
            enc = preprocess_record(recs[0], stats, schema)
        assert enc.physiology_encoded[:, 0].tolist() == [0.0, 0.0, 0.0]

    def test_training_channels_are_standardized(self, small_batches):
        _, tr, _, _ = small_batches
        schema = synthetic_schema()
        value_cols = [g[0] for g in schema.channel_groups()]
        x = tr.physiology[:, :, value_cols].reshape(-1, len(value_cols))
        assert np.all(np.abs(x.mean(0)) < 0.05)
        assert np.all(np.abs(x.std(0) - 1.0) < 0.05)

    def test_masks_are_binary(self, small_batches):
        _, tr, _, _ = small_batches
        masks = tr.physiology[:, :, synthetic_schema().mask_columns()]
        assert set(np.unique(masks)) <= {0.0, 1.0}

    @pytest.mark.filterwarnings("ignore:zero standard deviation")
    def test_complete_record_is_idempotent(self):
        schema = parse_schema(MINI_SCHEMA)
        rec = _record(temp=(36.0, 37.0, 38.0), gcs=("3", "9", "15"))
        stats = compute_stats([rec], schema)
        enc = preprocess_record(rec, stats, schema)
        raw = np.array([36.0, 37.0, 38.0])
        np.testing.assert_allclose(enc.physiology_encoded[:, 0], (raw - raw.mean()) / raw.std(), atol=1e-12)
        assert enc.physiology_encoded[:, 1].tolist() == [1.0] * 3

    def test_hours_pads_with_carried_values(self):
        schema = parse_schema(MINI_SCHEMA)
        rec = _record()
        stats = NormalizationStats({"Temp": 0.0}, {"Temp": 1.0}, {"Age": 0.0}, {"Age": 1.0})
        enc = preprocess_record(rec, stats, schema, hours=5)
        assert enc.physiology_encoded.shape == (5, 6)
        assert enc.physiology_encoded[4, 0] == 38.0
        assert enc.physiology_encoded[3:, 1].tolist() == [0.0, 0.0]


class TestClinicalRecord:
    def test_label_must_be_binary(self):
        with pytest.raises(SchemaError):
            _record(label=2)

    def test_rows_must_match_variables(self):
        with pytest.raises(SchemaError):
            ClinicalRecord("A", "P", {}, ("a",), np.ones((2, 2), dtype=object), np.ones((2, 2), bool), 0)

    def test_json_round_trip(self, tmp_path):
        recs = [_record(aid="A1"), _record(aid="A2", pid="P2", label=1)]
        write_records(tmp_path / "r.jsonl", recs)
        back = read_records(tmp_path / "r.jsonl")
        assert [record_to_json(r) for r in back] == [record_to_json(r) for r in recs]

    def test_duplicate_admission_rejected(self, tmp_path):
        line = json.dumps(record_to_json(_record()))
        (tmp_path / "r.jsonl").write_text(line + "\n" + line + "\n")
        with pytest.raises(SchemaError, match="duplicate"):
            read_records(tmp_path / "r.jsonl")

    def test_malformed_line_is_schema_error(self, tmp_path):
        (tmp_path / "r.jsonl").write_text("{not json\n")
        with pytest.raises(SchemaError):
            read_records(tmp_path / "r.jsonl")

    def test_from_json_reads_observed_flags(self):
        d = record_to_json(_record())
        back = record_from_json(d)
        assert back.observed.tolist() == _record().observed.tolist()


class TestSplit:
    def _records(self, n_patients, per_patient=1):
        out = []
        for p in range(n_patients):
            for a in range(per_patient):
                out.append(_record(aid=f"A{p:03d}_{a}", pid=f"P{p:03d}"))
        return out

    def test_ten_patients_sizes(self):
        for seed in range(5):
            s = split_dataset(self._records(10), (0.7, 0.15, 0.15), seed)
            sizes = (len(s.train), len(s.validation), len(s.test))
            assert sizes[0] == 7 and sizes[1] in (1, 2) and sizes[2] in (1, 2) and sum(sizes) == 10

    def test_patient_admissions_stay_together(self):
        recs = [_record(aid=f"A{i}", pid="P0") for i in range(5)]
        s = split_dataset(recs, (0.7, 0.15, 0.15), 0)
        assert sorted(len(p) for p in (s.train, s.validation, s.test)) == [0, 0, 5]

    def test_disjoint_and_exact(self):
        recs = self._records(60, per_patient=2)
        s = split_dataset(recs, (0.7, 0.15, 0.15), 1)
        all_ids = s.train + s.validation + s.test
        assert sorted(all_ids) == sorted(r.admission_id for r in recs)
        for part in (s.train, s.validation, s.test):
            patients = {i.split("_")[0] for i in part}
            for other in (s.train, s.validation, s.test):
                if other is not part:
                    assert not patients & {i.split("_")[0] for i in other}

    def test_realized_fractions_within_three_points(self):
        recs = self._records(200)
        s = split_dataset(recs, (0.7, 0.15, 0.15), 7)
        for part, target in zip((s.train, s.validation, s.test), (0.7, 0.15, 0.15)):
            assert abs(len(part) / 200 - target) <= 0.03

    def test_reference_cohort_ratio(self):
        # 14,681 / 3,222 / 3,236 of 21,139 admissions
        ratios = [n / 21139 for n in (14681, 3222, 3236)]
        assert [round(r, 3) for r in ratios] == [0.694, 0.152, 0.153]
        assert all(abs(r - t) <= 0.03 for r, t in zip(ratios, (0.7, 0.15, 0.15)))

    def test_same_seed_same_bytes(self):
        recs = self._records(50)
        a = split_dataset(recs, (0.7, 0.15, 0.15), 3).to_json()
        b = split_dataset(recs, (0.7, 0.15, 0.15), 3).to_json()
        assert a == b
        assert DatasetSplit.from_json(a).to_json() == a

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError):
            split_dataset([], (0.7, 0.15, 0.15), 0)

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            split_dataset(self._records(3), (0.5, 0.3, 0.3), 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 10_000))
    def test_every_admission_assigned_once(self, n, seed):
        recs = self._records(n)
        s = split_dataset(recs, (0.7, 0.15, 0.15), seed)
        assert sorted(s.train + s.validation + s.test) == sorted(r.admission_id for r in recs)


class TestEncodePartitions:
    def test_stats_from_training_only(self, small_records):
        records, _ = small_records
        ids = [r.admission_id for r in records]
        split = DatasetSplit(ids[:10], ids[10:20], ids[20:], 0)
        stats, tr, va, te = encode_partitions(records, split, synthetic_schema(), hours=4)
        from protodoctor.data import compute_stats as cs
        direct = cs(records[:10], synthetic_schema(), 4)
        assert stats.to_dict() == direct.to_dict()
        assert (len(tr), len(va), len(te)) == (10, 10, 20)

    def test_unknown_split_id_rejected(self, small_records):
        records, _ = small_records
        with pytest.raises(SchemaError):
            encode_partitions(records, DatasetSplit(["nope"], [], [], 0), synthetic_schema())

    def test_empty_partition_is_none(self, small_records):
        records, _ = small_records
        ids = [r.admission_id for r in records]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, _, va, te = encode_partitions(records, DatasetSplit(ids, [], [], 0), synthetic_schema(), hours=4)
        assert va is None and te is None
