import logging

import numpy as np
import pytest

from micron.cohort import (
    Cohort, DDIMatrix, GeneratorConfig, PatientRecord, Visit, Vocabulary, generate_cohort,
    generate_ddi_matrix, hidden_rules, load_cohort, save_cohort, split_cohort,
)
from micron.errors import ConfigError, ParseError
from micron.metrics import consecutive_jaccard_stats


def small_cohort(seed=3, **kw):
    cfg = GeneratorConfig(n_patients=kw.pop("n_patients", 12), **kw)
    return generate_cohort(cfg, seed)


class TestGenerate:
    def test_deterministic(self, tmp_path):
        a, b = generate_cohort(GeneratorConfig(), 7), generate_cohort(GeneratorConfig(), 7)
        assert a == b
        save_cohort(a, tmp_path / "a.ehr")
        save_cohort(b, tmp_path / "b.ehr")
        assert (tmp_path / "a.ehr").read_bytes() == (tmp_path / "b.ehr").read_bytes()

    def test_seed_changes_output(self):
        assert generate_cohort(GeneratorConfig(), 7) != generate_cohort(GeneratorConfig(), 8)

    def test_noiseless_rule_image(self):
        cfg = GeneratorConfig(n_patients=30, noise_rate=0.0, med_rule_fanout=1, med_carryover=0.0,
                              diag_per_visit_min=1, diag_per_visit_max=1)
        cohort = generate_cohort(cfg, 11)
        rules = hidden_rules(cfg, 11)
        for p in cohort.patients:
            for v in p.visits:
                assert len(v.diagnoses) == 1
                assert v.medications == rules[v.diagnoses[0]]

    def test_invariants(self, default_cohort):
        v = default_cohort.vocabulary
        for p in default_cohort.patients:
            assert len(p.visits) >= 2
            for visit in p.visits:
                assert visit.medications
                assert all(0 <= m < v.n_med for m in visit.medications)
                assert set(visit.diag_vector(v).tolist()) <= {0.0, 1.0}

    def test_medication_overlap_exceeds_diagnosis_overlap(self, default_cohort):
        st = consecutive_jaccard_stats(default_cohort)
        assert st.med_mean > st.diag_mean

    @pytest.mark.parametrize("seed", [1, 2, 3, 4, 5])
    def test_overlap_asymmetry_other_seeds(self, seed):
        st = consecutive_jaccard_stats(generate_cohort(GeneratorConfig(n_patients=60), seed))
        assert st.med_mean >= st.diag_mean

    @pytest.mark.parametrize("bad", [
        dict(n_diag=0), dict(visits_min=5, visits_max=3), dict(noise_rate=1.5),
        dict(ddi_density=-0.1), dict(visits_min=1), dict(med_rule_fanout=99),
    ])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            GeneratorConfig(**bad)

    def test_from_mapping(self):
        cfg = GeneratorConfig.from_mapping({"n_patients": "9", "noise_rate": "0.1"})
        assert cfg.n_patients == 9 and cfg.noise_rate == 0.1
        with pytest.raises(ConfigError):
            GeneratorConfig.from_mapping({"bogus": 1})


class TestDDI:
    def test_zero_density(self):
        assert not generate_ddi_matrix(8, 0.0, 1).entries.any()

    def test_full_density(self):
        a = generate_ddi_matrix(6, 1.0, 1).entries
        np.testing.assert_array_equal(a, 1 - np.eye(6))

    def test_symmetric_zero_trace(self):
        a = generate_ddi_matrix(10, 0.2, 3).entries
        np.testing.assert_array_equal(a, a.T)
        assert np.trace(a) == 0

    def test_density_roughly_matches(self):
        a = generate_ddi_matrix(200, 0.2, 5).entries
        frac = a.sum() / (200 * 199)
        assert abs(frac - 0.2) < 0.01

    def test_n_med_zero(self):
        with pytest.raises(ConfigError):
            generate_ddi_matrix(0, 0.5, 1)

    @pytest.mark.parametrize("m", [np.array([[0, 1], [0, 0]]), np.array([[1, 0], [0, 0]]), np.array([[0, 2], [2, 0]])])
    def test_validation(self, m):
        with pytest.raises(ConfigError):
            DDIMatrix(m)


class TestFileFormat:
    def test_round_trip(self, tmp_path, default_cohort):
        path = tmp_path / "c.ehr"
        save_cohort(default_cohort, path)
        assert load_cohort(path) == default_cohort

    def test_round_trip_small_variants(self, tmp_path):
        for seed in range(5):
            c = small_cohort(seed, ddi_density=0.3)
            save_cohort(c, tmp_path / "x.ehr")
            assert load_cohort(tmp_path / "x.ehr") == c

    def test_medication_out_of_range(self, tmp_path):
        c = small_cohort()
        path = tmp_path / "c.ehr"
        save_cohort(c, path)
        lines = path.read_text().splitlines()
        k = 1 + c.vocabulary.n_med + 2
        cols = lines[k].split(",")
        cols[4] = str(c.vocabulary.n_med)
        lines[k] = ",".join(cols)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match=f"line {k + 1}"):
            load_cohort(path)

    def test_truncated(self, tmp_path):
        c = small_cohort()
        path = tmp_path / "c.ehr"
        save_cohort(c, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(ParseError, match="truncated"):
            load_cohort(path)
        path.write_text("\n".join(lines[:5]) + "\n")
        with pytest.raises(ParseError):
            load_cohort(path)

    def test_malformed_line(self, tmp_path):
        c = small_cohort()
        path = tmp_path / "c.ehr"
        save_cohort(c, path)
        lines = path.read_text().splitlines()
        lines[-1] = "garbage"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match=f"line {len(lines)}"):
            load_cohort(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "c.ehr"
        path.write_text("hello\n")
        with pytest.raises(ParseError, match="line 1"):
            load_cohort(path)

    def test_single_visit_patient_dropped(self, tmp_path, caplog):
        v = Vocabulary(3, 2, 2)
        pats = (PatientRecord("a", (Visit.of([0], [1], [0]), Visit.of([1], [], [1]))),
                PatientRecord("b", (Visit.of([2], [0], [1]),)))
        c = Cohort(v, pats, DDIMatrix(np.zeros((2, 2))))
        save_cohort(c, tmp_path / "c.ehr")
        with caplog.at_level(logging.WARNING):
            loaded = load_cohort(tmp_path / "c.ehr")
        assert [p.patient_id for p in loaded.patients] == ["a"]
        assert "single-visit" in caplog.text


class TestSplit:
    def test_sizes(self):
        c = small_cohort(n_patients=10)
        tr, va, te = split_cohort(c, (0.6, 0.2, 0.2), seed=1)
        assert (len(tr), len(va), len(te)) == (6, 2, 2)

    def test_remainder_goes_to_train(self):
        c = small_cohort(n_patients=13)
        tr, va, te = split_cohort(c, (0.6, 0.2, 0.2), seed=1)
        assert (len(tr), len(va), len(te)) == (9, 2, 2)

    def test_all_train(self):
        c = small_cohort(n_patients=10)
        tr, va, te = split_cohort(c, (1.0, 0.0, 0.0), seed=1)
        assert len(tr) == 10 and len(va) == 0 and len(te) == 0

    def test_partition(self, default_cohort):
        parts = split_cohort(default_cohort, seed=4)
        ids = [p.patient_id for part in parts for p in part.patients]
        assert len(ids) == len(set(ids)) == len(default_cohort)
        assert set(ids) == {p.patient_id for p in default_cohort.patients}

    def test_deterministic(self, default_cohort):
        assert split_cohort(default_cohort, seed=2) == split_cohort(default_cohort, seed=2)

    @pytest.mark.parametrize("ratios", [(0.5, 0.2, 0.2), (0.6, 0.6, -0.2), (1.0,)])
    def test_invalid(self, default_cohort, ratios):
        with pytest.raises(ConfigError):
            split_cohort(default_cohort, ratios)
