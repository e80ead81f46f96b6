import csv
import hashlib
import json

import pytest

from canopy.cli import main


def files_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_synth")
    assert main(["synth", "--n", "40", "--points-per-m2", "1.0", "--seed", "3", "--out-dir", str(out)]) == 0
    return out


class TestArgs:
    def test_unknown_flag(self, tmp_path, capsys):
        assert main(["synth", "--n", "2", "--bogus", "--out-dir", str(tmp_path)]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_command(self):
        assert main([]) == 1

    def test_bad_threads(self, tmp_path):
        assert main(["synth", "--n", "2", "--threads", "0", "--out-dir", str(tmp_path)]) == 1

    def test_seed_from_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CANOPY_SEED", "17")
        assert main(["synth", "--n", "2", "--points-per-m2", "0.5", "--out-dir", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "run.json").read_text())["seed"] == 17

    def test_bad_seed_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CANOPY_SEED", "x")
        assert main(["synth", "--n", "2", "--out-dir", str(tmp_path)]) == 1

    def test_missing_manifest(self, tmp_path):
        assert main(["features", "--manifest", str(tmp_path / "none.jsonl"), "--out-dir", str(tmp_path)]) == 1


class TestCommands:
    def test_run_json(self, synth_dir):
        run = json.loads((synth_dir / "run.json").read_text())
        assert run["command"] == "synth" and run["n"] == 40 and run["seed"] == 3

    def test_synth_reproducible(self, synth_dir, tmp_path):
        assert main(["synth", "--n", "40", "--points-per-m2", "1.0", "--seed", "3", "--out-dir", str(tmp_path)]) == 0
        assert files_hash(tmp_path) == files_hash(synth_dir)

    def test_features(self, synth_dir, tmp_path):
        assert main(["features", "--manifest", str(synth_dir / "manifest.jsonl"), "--out-dir", str(tmp_path)]) == 0
        with open(tmp_path / "features.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows[0]) == 30 and len(rows) > 1

    def test_baseline_eval_predict_compare(self, synth_dir, tmp_path):
        man = str(synth_dir / "manifest.jsonl")
        reports = []
        for kind in ("power", "linear"):
            out = tmp_path / kind
            assert main(["fit-baseline", kind, "--manifest", man, "--out-dir", str(out)]) == 0
            assert (out / "model.cnpy").exists()
            ev = tmp_path / f"eval_{kind}"
            assert main(["eval", "--model", str(out / "model.cnpy"), "--manifest", man,
                         "--out-dir", str(ev)]) == 0
            reports.append(str(ev / "report.json"))
        pr = tmp_path / "pred"
        assert main(["predict", "--model", str(tmp_path / "power" / "model.cnpy"), "--manifest", man,
                     "--out-dir", str(pr)]) == 0
        with open(pr / "predictions.csv") as fh:
            header = next(csv.reader(fh))
        assert header == ["plot_id", "cloud_path", "split", "agb", "volume", "carbon"]
        assert main(["compare", "--reports", *reports, "--out-dir", str(tmp_path / "cmp")]) == 0
        assert (tmp_path / "cmp" / "compare.csv").exists()

    def test_train_tiny(self, synth_dir, tmp_path):
        man = str(synth_dir / "manifest.jsonl")
        assert main(["train", "pointnet", "--manifest", man, "--epochs", "2", "--batch-size", "16",
                     "--tiny", "4", "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "checkpoint.cnpy").exists()
        assert len((tmp_path / "history.csv").read_text().splitlines()) == 3
        assert main(["eval", "--model", str(tmp_path / "checkpoint.cnpy"), "--manifest", man,
                     "--out-dir", str(tmp_path / "ev")]) == 0

    def test_bad_model_file(self, synth_dir, tmp_path):
        (tmp_path / "junk.cnpy").write_bytes(b"junk")
        assert main(["eval", "--model", str(tmp_path / "junk.cnpy"), "--manifest",
                     str(synth_dir / "manifest.jsonl"), "--out-dir", str(tmp_path)]) == 1

    def test_gradcheck(self, tmp_path, capsys):
        assert main(["gradcheck", "--all", "--out-dir", str(tmp_path)]) == 0
        assert "FAIL" not in capsys.readouterr().out


def test_console_entry_exit_code(tmp_path):
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "canopy.cli", "synth", "--nope"], cwd=tmp_path,
                         capture_output=True, text=True)
    assert res.returncode == 1 and "usage" in res.stderr
