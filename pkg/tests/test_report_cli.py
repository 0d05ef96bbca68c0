import json

import numpy as np
import pytest

from corrobust.checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from corrobust.cli import parse_grid, run_cli, UsageError
from corrobust.corruptions import KINDS
from corrobust.data import Dataset, write_cifar10_binary, write_manifest
from corrobust.report import (
    COLUMNS,
    ReportError,
    emit_report,
    load_results,
    make_results,
    parse_csv_report,
    save_results,
)
from corrobust.training import TrainConfig, train


def method_result(name, rng):
    return {
        "method": name,
        "clean_accuracy": float(rng.uniform(0.8, 1)),
        "corruption_accuracy": float(rng.uniform(0.5, 0.8)),
        "ece": float(rng.uniform(0, 0.2)),
        "ece_rescaled": float(rng.uniform(0, 0.1)),
        "temperature": float(rng.uniform(0.5, 2)),
        "errors": {k: [float(v) for v in rng.uniform(0, 0.5, 5)] for k in KINDS},
    }


class TestReport:
    def test_empty_header_only(self):
        assert emit_report(make_results([])) == ",".join(COLUMNS) + "\n"

    def test_row_counts(self, rng):
        doc = make_results([method_result("standard", rng), method_result("rlat", rng)])
        rows = parse_csv_report(emit_report(doc))
        assert len(rows) == 92
        assert sum(r["kind"] == "summary" for r in rows) == 2

    def test_roundtrip_four_places(self, rng, tmp_path):
        doc = make_results([method_result("standard", rng)])
        save_results(doc, tmp_path / "r.json")
        rows = parse_csv_report(emit_report(load_results(tmp_path / "r.json")))
        m = doc["tables"]["methods"][0]
        summary = [r for r in rows if r["kind"] == "summary"][0]
        for f in ("clean_accuracy", "corruption_accuracy", "ece", "ece_rescaled", "temperature"):
            assert round(float(summary[f]), 4) == round(m[f], 4)
        for r in rows:
            if r["kind"] != "summary":
                e = m["errors"][r["kind"]][int(r["severity"]) - 1]
                assert round(float(r["accuracy"]), 4) == round(1 - e, 4)

    def test_markdown(self, rng):
        md = emit_report(make_results([method_result("standard", rng)]), "md")
        lines = md.splitlines()
        assert lines[0].startswith("| method |") and len(lines) == 2 + 46

    @pytest.mark.parametrize("doc", [
        [], {"schema_version": 2}, {"schema_version": 1, "tables": {"methods": {}}},
        {"schema_version": 1, "tables": {"methods": [{"method": 3}]}},
        {"schema_version": 1, "tables": {"methods": [{"method": "a", "ece": "high"}]}},
        {"schema_version": 1, "tables": {"methods": [{"method": "a", "errors": {"k": [0.1]}}]}},
    ])
    def test_schema_violations(self, doc):
        with pytest.raises(ReportError):
            emit_report(doc)

    def test_unknown_format(self):
        with pytest.raises(ReportError):
            emit_report(make_results([]), "xlsx")


class TestGrid:
    def test_range_inclusive(self):
        assert parse_grid("0:0.2:0.05") == [0.0, 0.05, 0.1, 0.15, 0.2]

    def test_list(self):
        assert parse_grid("0.1,0.3") == [0.1, 0.3]

    @pytest.mark.parametrize("bad", ["a:b:c", "0:1:0", "1:0:0.1", "x"])
    def test_bad(self, bad):
        with pytest.raises(UsageError):
            parse_grid(bad)


@pytest.fixture(scope="module")
def fixture_files(tmp_path_factory):
    """Trivially separable data (dark vs bright images) and a model that fits it."""
    d = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    labels = np.arange(64) % 2
    imgs = np.where(labels[:, None, None, None] == 1, 0.8, 0.2) + rng.uniform(-0.05, 0.05, (64, 3, 8, 8))
    ds = Dataset(imgs.astype(np.float32), labels, 2, "split")
    data = d / "data.bin"
    write_cifar10_binary(data, ds)
    write_manifest(str(data) + ".json", ds)
    cfg = {"epochs": 3, "batch_size": 16, "widths": [4, 4], "lr": 0.05, "decay_epochs": []}
    (d / "cfg.json").write_text(json.dumps(cfg))
    model, _ = train(TrainConfig.from_dict(cfg), ds)
    save_checkpoint(model, CheckpointMeta("standard", 0, 3), d / "m.ckpt")
    return d


class TestCli:
    def test_unknown_flag(self, capsys):
        assert run_cli(["eval", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_no_command(self):
        assert run_cli([]) == 1

    def test_eval_perfect(self, fixture_files, capsys):
        d = fixture_files
        assert run_cli(["eval", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "data.bin")]) == 0
        assert "clean accuracy: 1.0000" in capsys.readouterr().out

    def test_missing_checkpoint(self, fixture_files):
        d = fixture_files
        assert run_cli(["eval", "--ckpt", str(d / "none.ckpt"), "--data", str(d / "data.bin")]) == 2

    def test_bad_checkpoint(self, fixture_files, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"JUNKJUNK")
        assert run_cli(["eval", "--ckpt", str(bad), "--data", str(fixture_files / "data.bin")]) == 2

    def test_bad_results(self, tmp_path):
        p = tmp_path / "r.json"
        p.write_text('{"schema_version": 9}')
        assert run_cli(["report", "--in", str(p)]) == 2

    def test_eval_report_rows(self, fixture_files, tmp_path, capsys):
        d = fixture_files
        out = tmp_path / "eval.json"
        assert run_cli(["eval", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "data.bin"),
                        "--corruptions", "all", "--out", str(out)]) == 0
        csv_path = tmp_path / "r.csv"
        assert run_cli(["report", "--in", str(out), "--out", str(csv_path)]) == 0
        rows = parse_csv_report(csv_path.read_text())
        breakdown = {(r["kind"], r["severity"]) for r in rows if r["kind"] != "summary"}
        assert len(breakdown) == len([r for r in rows if r["kind"] != "summary"]) == 45

    def test_validation_split(self, fixture_files, tmp_path):
        d = fixture_files
        out = tmp_path / "v.json"
        assert run_cli(["eval", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "data.bin"),
                        "--validation-split", "--out", str(out)]) == 0
        assert set(load_results(out)["tables"]["methods"][0]["errors"]) == {"motion_blur", "elastic"}

    def test_sweep_counts(self, fixture_files, tmp_path):
        d = fixture_files
        out = tmp_path / "sweep.json"
        code = run_cli(["sweep", "--config", str(d / "cfg.json"), "--data", str(d / "data.bin"),
                        "--param", "epochs", "--grid", "1,2,3", "--seeds", "2", "--out", str(out)])
        assert code == 0
        doc = load_results(out)
        assert len(doc["tables"]["runs"]) == 6
        assert [r["seed"] for r in doc["tables"]["runs"]] == [0, 1] * 3

    def test_sweep_unknown_param(self, fixture_files, tmp_path):
        d = fixture_files
        assert run_cli(["sweep", "--config", str(d / "cfg.json"), "--data", str(d / "data.bin"),
                        "--param", "colour", "--grid", "1", "--out", str(tmp_path / "s.json")]) == 1

    def test_train_reproducible(self, fixture_files, tmp_path):
        d = fixture_files
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.ckpt"
            assert run_cli(["train", "--config", str(d / "cfg.json"), "--data", str(d / "data.bin"),
                            "--out", str(out), "--seed", "4"]) == 0
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]
        assert load_checkpoint(tmp_path / "a.ckpt")[1].seed == 4

    def test_train_bad_config(self, fixture_files, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"method": "mixup"}')
        assert run_cli(["train", "--config", str(cfg), "--data", str(fixture_files / "data.bin"),
                        "--out", str(tmp_path / "x.ckpt")]) == 1
        assert run_cli(["train", "--config", str(tmp_path / "missing.json"), "--data", "synthetic",
                        "--out", str(tmp_path / "x.ckpt")]) == 2

    @pytest.mark.parametrize("method", ["fgm", "fgsm", "pgd", "lpa"])
    def test_attack(self, fixture_files, method, capsys):
        d = fixture_files
        code = run_cli(["attack", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "data.bin"), "--method", method,
                        "--eps", "0.1", "--steps", "2"])
        assert code == 0
        assert "robust accuracy" in capsys.readouterr().out

    def test_probe_sigma_seeded(self, fixture_files, tmp_path):
        d = fixture_files
        outs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.csv"
            assert run_cli(["probe-sigma", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "data.bin"),
                            "--grid", "0:0.2:0.1", "--seed", "3", "--out", str(out)]) == 0
            outs.append(out.read_text())
        assert outs[0] == outs[1]
        assert outs[0].splitlines()[0] == "sigma,loss" and len(outs[0].splitlines()) == 4

    def test_distances(self, fixture_files, tmp_path):
        d = fixture_files
        out = tmp_path / "d.csv"
        assert run_cli(["distances", "--data", str(d / "data.bin"), "--metric", "lpips",
                        "--lpips-ckpt", str(d / "m.ckpt"), "--corruptions", "contrast", "--out", str(out)]) == 0
        assert len(out.read_text().splitlines()) == 6
        assert run_cli(["distances", "--data", str(d / "data.bin"), "--metric", "lpips"]) == 1

    def test_calibrate(self, fixture_files, capsys):
        d = fixture_files
        assert run_cli(["calibrate", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "data.bin")]) == 0
        assert "temperature" in capsys.readouterr().out

    def test_gen_and_export(self, tmp_path):
        out = tmp_path / "s.bin"
        assert run_cli(["gen-data", "--data", "synthetic:samples_per_class=2,size=8", "--out", str(out)]) == 0
        assert out.stat().st_size == 8 * (1 + 192)
        assert run_cli(["export-corruptions", "--data", "synthetic:samples_per_class=2,size=8",
                        "--out", str(tmp_path / "c"), "--corruptions", "brightness"]) == 0
        assert len(json.loads((tmp_path / "c" / "manifest.json").read_text())["shards"]) == 5

    def test_unknown_kind(self, fixture_files):
        d = fixture_files
        assert run_cli(["eval", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "data.bin"),
                        "--corruptions", "fog"]) == 1

    def test_gradcheck_exit_codes(self, capsys):
        assert run_cli(["gradcheck", "--graphs", "1"]) == 0
        assert run_cli(["gradcheck", "--graphs", "1", "--tolerance", "1e-30"]) == 3
