import io
import json

import pytest

from micron.cli import run

GEN = ["--patients", "14", "--n-diag", "12", "--n-proc", "6", "--n-med", "8"]
FAST = ["--epochs", "3", "--embed-size", "8", "--hidden", "16"]


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert call("generate", "-o", str(d / "c.ehr"), "--seed", "3", *GEN)[0] == 0
    assert call("train", "--cohort", str(d / "c.ehr"), "-o", str(d / "m.ckpt"), *FAST)[0] == 0
    return d


class TestGenerate:
    def test_repeatable(self, tmp_path):
        for name in ("a", "b"):
            code, out, _ = call("generate", "-o", str(tmp_path / name), "--seed", "5", *GEN)
            assert code == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        assert json.loads(out)["patients"] == 14

    def test_config_file_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "g.cfg"
        cfg.write_text("patients = 9\nn_med = 7  # comment\nseed = 2\n")
        call("generate", "-o", str(tmp_path / "a"), "--config", str(cfg))
        code, out, _ = call("generate", "-o", str(tmp_path / "b"), "--config", str(cfg), "--patients", "11")
        assert code == 0
        assert json.loads(out)["patients"] == 11
        assert json.loads(out)["config"]["n_med"] == 7

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "g.cfg"
        cfg.write_text("colour = blue\n")
        code, _, err = call("generate", "-o", str(tmp_path / "a"), "--config", str(cfg))
        assert code == 1 and err.startswith("ERROR(config)")

    def test_invalid_generator_value(self, tmp_path):
        code, _, err = call("generate", "-o", str(tmp_path / "a"), "--noise-rate", "3")
        assert code == 1 and "ERROR(config)" in err


class TestPipeline:
    def test_evaluate_without_sidecar(self, workdir):
        code, _, err = call("evaluate", "--cohort", str(workdir / "c.ehr"), "--checkpoint",
                            str(workdir / "m.ckpt"), "--thresholds", str(workdir / "missing"))
        assert code == 1 and err.startswith("ERROR(config)")

    def test_calibrate_evaluate_predict(self, workdir):
        code, out, _ = call("calibrate", "--cohort", str(workdir / "c.ehr"), "--checkpoint", str(workdir / "m.ckpt"))
        assert code == 0
        th = json.loads(out)
        assert 1 >= th["delta1"] >= th["delta2"] >= 0
        assert (workdir / "m.ckpt.thresholds").is_file()

        base = ["--cohort", str(workdir / "c.ehr"), "--checkpoint", str(workdir / "m.ckpt")]
        code, table, _ = call("evaluate", *base)
        assert code == 0 and "jaccard" in table
        code, js, _ = call("evaluate", *base, "--format", "json")
        report = json.loads(js)
        for line in table.splitlines()[1:6]:
            name, value = line.split()
            assert float(value) == pytest.approx(report["means"][name], abs=1e-6)
        code, js_smart, _ = call("evaluate", *base, "--format", "json", "--mode", "smart")
        assert json.loads(js_smart)["means"] == report["means"]

        code, out, _ = call("predict", *base)
        assert code == 0
        recs = [json.loads(line) for line in out.splitlines()]
        assert recs and set(recs[0]) == {"patient_id", "t", "add", "remove", "set"}
        assert all(r["t"] >= 2 for r in recs)

    def test_ablation_flags(self, workdir):
        base = ["--cohort", str(workdir / "c.ehr"), "--checkpoint", str(workdir / "m.ckpt"), "--format", "json"]
        for extra in (["--delta", "0.5"], ["--no-memory", "--delta", "0.5"], ["--normalization", "evaluated"]):
            code, out, _ = call("evaluate", *base, *extra)
            assert code == 0, extra
            assert "means" in json.loads(out)

    def test_copy_forward(self, workdir):
        code, out, _ = call("evaluate", "--cohort", str(workdir / "c.ehr"), "--baseline", "copy-forward",
                            "--format", "json")
        assert code == 0
        assert json.loads(out)["config"]["model"] == "copy-forward"

    @pytest.mark.parametrize("kind", ["simnn", "dualnn"])
    def test_baselines(self, workdir, kind):
        ckpt = workdir / f"{kind}.ckpt"
        assert call("train", "--cohort", str(workdir / "c.ehr"), "-o", str(ckpt), "--model", kind, *FAST)[0] == 0
        code, out, _ = call("evaluate", "--cohort", str(workdir / "c.ehr"), "--checkpoint", str(ckpt),
                            "--format", "json")
        assert code == 0 and json.loads(out)["config"]["model"] == kind

    def test_log_json(self, workdir, tmp_path):
        code, out, _ = call("train", "--cohort", str(workdir / "c.ehr"), "-o", str(tmp_path / "m"),
                            "--log-json", *FAST)
        epochs = [json.loads(line) for line in out.splitlines()]
        assert [e["epoch"] for e in epochs] == [1, 2, 3]

    def test_train_repeatable(self, workdir, tmp_path):
        for name in ("a", "b"):
            call("train", "--cohort", str(workdir / "c.ehr"), "-o", str(tmp_path / name), *FAST)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_sweep(self, workdir):
        code, out, _ = call("sweep", "--cohort", str(workdir / "c.ehr"), "--seeds", "1,2", "--format", "json", *FAST)
        assert code == 0
        res = json.loads(out)
        assert res["seeds"] == [1, 2] and len(res["runs"]) == 2
        assert set(res["summary"]["f1"]) == {"mean", "std"}


class TestStats:
    def test_table_and_csv(self, workdir, tmp_path):
        code, out, _ = call("stats", "--cohort", str(workdir / "c.ehr"), "--bins", "5", "--csv", str(tmp_path / "h.csv"))
        assert code == 0 and "medication" in out
        rows = (tmp_path / "h.csv").read_text().splitlines()
        assert rows[0] == "bin_lo,bin_hi,diagnosis_count,medication_count"
        assert len(rows) == 6

    def test_json(self, workdir):
        code, out, _ = call("stats", "--cohort", str(workdir / "c.ehr"), "--format", "json")
        data = json.loads(out)
        assert sum(data["diag_hist"]) == data["pairs"]


class TestErrors:
    def test_usage(self):
        code, _, err = call("train", "--bogus")
        assert code == 1 and err.startswith("ERROR(usage)")

    def test_missing_cohort(self, tmp_path):
        code, _, err = call("stats", "--cohort", str(tmp_path / "nope"))
        assert code == 1 and "ERROR(config)" in err

    def test_parse_error_exit_two(self, tmp_path):
        (tmp_path / "bad.ehr").write_text("not a cohort\n")
        code, _, err = call("stats", "--cohort", str(tmp_path / "bad.ehr"))
        assert code == 2 and err.startswith("ERROR(parse)")

    def test_bad_lam(self, workdir, tmp_path):
        code, _, err = call("train", "--cohort", str(workdir / "c.ehr"), "-o", str(tmp_path / "m"), "--lam", "1,2")
        assert code == 1 and "ERROR(config)" in err
