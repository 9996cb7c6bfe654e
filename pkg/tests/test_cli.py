"""Command-line interface: subcommands, config overrides, outputs and exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from mulcon.cli import main
from mulcon.data import load_dataset
from mulcon.evaluate import read_embeddings_csv, read_pgm

TINY = [
    "model.embed_dim=16", "model.heads=4", "model.proj_dim=8", "model.encoder.channels=[4,8,8,8]",
    "data.n_train=64", "data.n_test=24", "step1.epochs=1", "step1.batch_size=16", "step1.lr=0.002",
    "step2.epochs=1", "step2.batch_size=8", "step2.lr=0.003",
]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--out", str(out), "--seed", "1", *TINY]) == 0
    return out


class TestGenData:
    def test_same_seed_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            code, out, _ = run(capsys, "gen-data", "--out", tmp_path / name, "--seed", 3,
                               "data.n_train=20", "data.n_test=5")
            assert code == 0 and json.loads(out)["train"] == 20
        for part in ("train.mlgd", "test.mlgd"):
            assert (tmp_path / "a" / part).read_bytes() == (tmp_path / "b" / part).read_bytes()
        assert json.loads((tmp_path / "a" / "config.json").read_text())["data"]["seed"] == 3

    def test_seed_changes_data(self, tmp_path, capsys):
        run(capsys, "gen-data", "--out", tmp_path / "a", "--seed", 1, "data.n_train=5", "data.n_test=5")
        run(capsys, "gen-data", "--out", tmp_path / "b", "--seed", 2, "data.n_train=5", "data.n_test=5")
        a, b = load_dataset(tmp_path / "a" / "train.mlgd"), load_dataset(tmp_path / "b" / "train.mlgd")
        assert not np.array_equal(a.images, b.images)


class TestTrainAndEval:
    def test_train_outputs(self, trained):
        cfg = json.loads((trained / "config.json").read_text())
        assert cfg["seed"] == 1 and cfg["model"]["embed_dim"] == 16
        for name in ("final.ckpt", "step1.ckpt", "metrics.json", "metrics.ndjson"):
            assert (trained / name).exists()
        records = [json.loads(line) for line in (trained / "metrics.ndjson").read_text().splitlines()]
        assert {r["phase"] for r in records} == {1, 2}

    def test_eval(self, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", "--checkpoint", trained / "final.ckpt", "--out", tmp_path)
        assert code == 0
        m = json.loads((tmp_path / "metrics.json").read_text())
        assert 0 <= m["mAP"] <= 1 and json.loads(out)["mAP"] == m["mAP"]
        assert m["mAP"] == json.loads((trained / "metrics.json").read_text())["mAP"]

    def test_retrieve(self, trained, tmp_path, capsys):
        code, _, _ = run(capsys, "retrieve", "--checkpoint", trained / "final.ckpt", "--out", tmp_path,
                         "--index", 2, "-k", 5)
        doc = json.loads((tmp_path / "retrieval.json").read_text())
        assert code == 0 and doc["query_id"] == 2 and len(doc["hits"]) == 5
        assert all(h["image_id"] != 2 for h in doc["hits"])
        d = [h["distance"] for h in doc["hits"]]
        assert d == sorted(d)

    def test_export_embeddings(self, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "export-embeddings", "--checkpoint", trained / "final.ckpt", "--out", tmp_path)
        ids, labels, vecs = read_embeddings_csv(tmp_path / "embeddings_test.csv")
        assert code == 0 and json.loads(out)["rows"] == len(ids) and vecs.shape[1] == 16

    def test_export_attention(self, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "export-attention", "--checkpoint", trained / "final.ckpt", "--out", tmp_path,
                           "--index", 0, "--head-label", 0)
        files = json.loads(out)["files"]
        assert code == 0 and files
        for f in files:
            assert read_pgm(f).shape == (64, 64)

    def test_train_variant_override(self, tmp_path, capsys):
        code, out, _ = run(capsys, "train", "--out", tmp_path, "variant=backbone-bce", *TINY)
        assert code == 0 and json.loads(out)["variant"] == "backbone-bce"
        code, _, _ = run(capsys, "export-attention", "--checkpoint", tmp_path / "final.ckpt", "--out", tmp_path / "x")
        assert code == 2


class TestErrors:
    def error_of(self, err):
        doc = json.loads(err.strip().splitlines()[-1])
        assert set(doc) == {"error", "message"}
        return doc

    @pytest.mark.parametrize("argv", [
        ["frobnicate"],
        ["train", "step1.lrr=0.1"],
        ["train", "notakeyvalue"],
        ["train", "variant=resnet"],
        ["train", "--seed", "-1"],
        ["train", "tau=0"],
        ["eval"],
    ])
    def test_usage_errors_exit_2(self, argv, tmp_path, capsys):
        code, _, err = run(capsys, *argv, "--out", tmp_path)
        assert code == 2
        assert self.error_of(err)["error"] == "usage"

    def test_missing_config_file(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--config", tmp_path / "nope.json", "--out", tmp_path)
        assert code == 2 and self.error_of(err)

    def test_runtime_error_exit_1(self, tmp_path, capsys):
        (tmp_path / "bad.ckpt").write_bytes(b"garbage")
        code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "bad.ckpt", "--out", tmp_path, *TINY)
        assert code == 1 and self.error_of(err)["error"] != "usage"

    def test_mismatched_checkpoint_exit_1(self, trained, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--checkpoint", trained / "final.ckpt", "--out", tmp_path,
                           "model.num_labels=6", "data.num_labels=6")
        assert code == 1 and "U" in self.error_of(err)["message"]

    def test_config_file_and_override_precedence(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"tau": 0.5, "gamma": 0.3}))
        run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "o", "gamma=0.7", "data.n_train=4", "data.n_test=4")
        written = json.loads((tmp_path / "o" / "config.json").read_text())
        assert written["tau"] == 0.5 and written["gamma"] == 0.7


class TestEntryPoint:
    def test_gradcheck_subprocess(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "mulcon.cli", "gradcheck", "--instances", "2",
                               "--out", str(tmp_path)], capture_output=True, text=True, timeout=600)
        assert proc.returncode == 0, proc.stderr
        assert "all passed" in proc.stdout
        report = json.loads((tmp_path / "gradcheck.json").read_text())
        assert report["passed"]

    def test_bad_args_subprocess(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "mulcon.cli", "train", "bogus.key=1", "--out", str(tmp_path)],
                              capture_output=True, text=True, timeout=60)
        assert proc.returncode == 2 and json.loads(proc.stderr)["error"] == "usage"
