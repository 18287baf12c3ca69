import csv
import json
import statistics

import jsonschema
import pytest

from passmark.cli import default_config, load_schema, main
from passmark.model import read_manifest

TINY = {
    "version": 1,
    "model": {"width": 32, "n_layers": 2, "n_heads": 2, "max_len": 64},
    "pretrain": {"max_steps": 200, "seq_len": 32, "log_every": 50},
    "watermark": {"omega": "0,1", "max_steps": 30, "seq_len": 32, "log_every": 10, "probe_size": 8},
    "verify": {"n_candidates": 40, "prompt_len": 16, "gen_len": 8},
    "attack": {"steps": 10, "calibration_size": 32, "seq_len": 32},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err: str) -> dict:
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(json.dumps(TINY))
    assert main(["pretrain", "--config", str(d / "tiny.json"), "--out-dir", str(d / "host")]) == 0
    assert main(["watermark", "--config", str(d / "tiny.json"), "--checkpoint", str(d / "host" / "checkpoint.bin"),
                 "--out-dir", str(d / "wm")]) == 0
    return d


class TestConfig:
    def test_default_config_is_valid(self):
        jsonschema.validate(default_config(), load_schema("config"))

    def test_unknown_field_is_named(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text(json.dumps({"version": 1, "watermark": {"lrr": 0.1}}))
        code, _, err = run(capsys, "pretrain", "--config", tmp_path / "bad.json", "--out-dir", tmp_path / "o")
        e = error_of(err)
        assert code != 0 and e["status"] == "error" and e["field"] == "watermark.lrr"

    def test_wrong_type_is_named(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text(json.dumps({"version": 1, "pretrain": {"lr": "fast"}}))
        code, _, err = run(capsys, "pretrain", "--config", tmp_path / "bad.json", "--out-dir", tmp_path / "o")
        assert code != 0 and error_of(err)["field"] == "pretrain.lr"

    def test_missing_version(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text("{}")
        code, _, err = run(capsys, "pretrain", "--config", tmp_path / "bad.json", "--out-dir", tmp_path / "o")
        assert code != 0 and "version" in error_of(err)["message"]

    def test_missing_corpus(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"version": 1, "corpus": {"path": str(tmp_path / "none.txt")}}))
        code, _, err = run(capsys, "pretrain", "--config", tmp_path / "c.json", "--out-dir", tmp_path / "o")
        assert code != 0 and error_of(err)["field"] == "corpus.path"

    def test_bad_flag_is_json(self, capsys):
        code, _, err = run(capsys, "pretrain", "--bogus")
        assert code != 0 and error_of(err)["status"] == "error"


class TestPretrain:
    def test_layout_and_learning(self, workdir):
        d = workdir / "host"
        assert {p.name for p in d.iterdir()} == {"manifest.json", "checkpoint.bin", "curves.jsonl", "result.json"}
        res = json.loads((d / "result.json").read_text())
        assert res["val_ce"] <= 0.7 * res["initial_val_ce"]

    def test_same_seed_same_hash(self, workdir, tmp_path, capsys):
        code, _, _ = run(capsys, "pretrain", "--config", workdir / "tiny.json", "--out-dir", tmp_path / "again")
        assert code == 0
        first = json.loads((workdir / "host" / "manifest.json").read_text())["checkpoint_sha256"]
        second = json.loads((tmp_path / "again" / "manifest.json").read_text())["checkpoint_sha256"]
        assert first == second

    def test_refuses_to_overwrite(self, workdir, capsys):
        code, _, err = run(capsys, "pretrain", "--config", workdir / "tiny.json", "--out-dir", workdir / "host")
        assert code != 0 and error_of(err)["field"] == "--out-dir"


class TestWatermark:
    def test_omega_parsed(self, workdir):
        assert read_manifest(workdir / "wm" / "checkpoint.bin")["omega"] == [0, 1]
        assert json.loads((workdir / "wm" / "manifest.json").read_text())["omega"] == [0, 1]

    def test_secret_file_kept_out_of_outputs(self, workdir):
        key = (workdir / "wm.key").read_text().strip()
        assert len(key) == 6
        for f in (workdir / "wm").iterdir():
            assert key.encode() not in f.read_bytes(), f.name

    def test_curve_has_both_entropies(self, workdir):
        lines = [json.loads(x) for x in (workdir / "wm" / "curves.jsonl").read_text().splitlines()]
        assert [r["step"] for r in lines] == [0, 10, 20, 30]
        assert all(isinstance(r["clean_entropy"], float) and isinstance(r["key_entropy"], float) for r in lines)

    def test_omega_length_mismatch(self, workdir, tmp_path, capsys):
        code, _, err = run(capsys, "watermark", "--config", workdir / "tiny.json", "--omega", "0,1,0,0",
                           "--checkpoint", workdir / "host" / "checkpoint.bin", "--out-dir", tmp_path / "w")
        assert code != 0 and error_of(err)["field"] == "--omega"

    def test_existing_key_file_is_used(self, workdir, tmp_path, capsys):
        (tmp_path / "k").write_text("00ff00\n")
        cfg = dict(TINY, watermark=dict(TINY["watermark"], max_steps=2, log_every=0))
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        code, _, _ = run(capsys, "watermark", "--config", tmp_path / "c.json", "--key-file", tmp_path / "k",
                         "--checkpoint", workdir / "host" / "checkpoint.bin", "--out-dir", tmp_path / "w")
        assert code == 0 and (tmp_path / "k").read_text() == "00ff00\n"


class TestVerifyAndAttack:
    def test_verify_writes_valid_result(self, workdir, tmp_path, capsys):
        code, _, _ = run(capsys, "verify", "--config", workdir / "tiny.json", "--checkpoint",
                         workdir / "wm" / "checkpoint.bin", "--key-file", workdir / "wm.key",
                         "--out-dir", tmp_path / "v")
        assert code == 0
        res = json.loads((tmp_path / "v" / "result.json").read_text())
        jsonschema.validate(res, load_schema("verification_result"))
        assert res["n_pos"] == 10
        reports = (tmp_path / "v" / "entropies.jsonl").read_text().splitlines()
        assert len(reports) == 20

    def test_verify_needs_key(self, workdir, tmp_path, capsys):
        code, _, err = run(capsys, "verify", "--config", workdir / "tiny.json", "--checkpoint",
                           workdir / "wm" / "checkpoint.bin", "--out-dir", tmp_path / "v")
        assert code != 0 and error_of(err)["field"] == "--key-file"

    def test_layer_removal_without_layers(self, workdir, tmp_path, capsys):
        code, _, err = run(capsys, "attack", "--config", workdir / "tiny.json", "--kind", "layer-removal",
                           "--checkpoint", workdir / "host" / "checkpoint.bin", "--key-file", workdir / "wm.key",
                           "--out-dir", tmp_path / "a")
        assert code != 0 and "no passthrough layers" in error_of(err)["message"]

    def test_fine_prune_report(self, workdir, tmp_path, capsys):
        code, _, _ = run(capsys, "attack", "--config", workdir / "tiny.json", "--kind", "fine-prune",
                         "--prune-ratio", "0.5", "--checkpoint", workdir / "wm" / "checkpoint.bin",
                         "--key-file", workdir / "wm.key", "--out-dir", tmp_path / "a")
        assert code == 0
        rep = json.loads((tmp_path / "a" / "result.json").read_text())
        jsonschema.validate(rep, load_schema("attack_report"))
        assert rep["spec"]["prune_ratio"] == 0.5 and rep["spec"]["kind"] == "fine-prune"


def fake_run(path, seed, value, schema_version=1):
    path.mkdir(parents=True)
    (path / "manifest.json").write_text(json.dumps({"schema_version": schema_version, "command": "verify",
                                                    "seed": seed, "omega": [0, 1, 0, 0]}))
    (path / "result.json").write_text(json.dumps({"wacc": value, "roc": [[0, 0]]}))


class TestReport:
    def rows(self, out):
        with open(out / "report.csv") as f:
            return list(csv.DictReader(f))

    def test_single_run_has_empty_std(self, tmp_path, capsys):
        fake_run(tmp_path / "r0", 0, 0.9)
        assert run(capsys, "report", tmp_path / "r0", "--out-dir", tmp_path / "out")[0] == 0
        (row,) = self.rows(tmp_path / "out")
        assert row["metric"] == "wacc" and row["std"] == "" and float(row["mean"]) == 0.9

    def test_sample_std_over_seeds(self, tmp_path, capsys):
        vals = [0.9, 1.0, 0.95]
        for s, v in enumerate(vals):
            fake_run(tmp_path / f"r{s}", s, v)
        run(capsys, "report", *[tmp_path / f"r{s}" for s in range(3)], "--out-dir", tmp_path / "out")
        (row,) = self.rows(tmp_path / "out")
        assert float(row["std"]) == pytest.approx(statistics.stdev(vals), rel=1e-12)
        assert float(row["mean"]) == pytest.approx(statistics.mean(vals), rel=1e-12)
        assert row["n"] == "3" and row["placement"] == "0,1,0,0"

    def test_missing_manifest_names_directory(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        code, _, err = run(capsys, "report", tmp_path / "empty", "--out-dir", tmp_path / "out")
        assert code != 0 and str(tmp_path / "empty") in error_of(err)["message"]

    def test_inconsistent_schema_versions(self, tmp_path, capsys):
        fake_run(tmp_path / "a", 0, 0.5)
        fake_run(tmp_path / "b", 1, 0.5, schema_version=2)
        code, _, err = run(capsys, "report", tmp_path / "a", tmp_path / "b", "--out-dir", tmp_path / "out")
        assert code != 0 and "schema versions" in error_of(err)["message"]

    def test_real_runs_without_key_material(self, workdir, tmp_path, capsys):
        code, _, _ = run(capsys, "report", workdir / "host", workdir / "wm", "--out-dir", tmp_path / "out")
        assert code == 0
        key = (workdir / "wm.key").read_text().strip()
        for f in (tmp_path / "out").iterdir():
            assert key not in f.read_text()
