import json
import shutil
import subprocess

import numpy as np
import pytest

from define_embed.analysis import read_map_csv
from define_embed.cli import main
from define_embed.config import RunConfig
from define_embed.embedder import read_cache

TOY = {"model.vocab_size": 10, "model.n": 4, "model.k": 16, "model.m": 4, "model.N": 2,
       "model.g_max": 2, "model.dims": [4, 8, 16], "model.hidden": 0}


def write_config(tmp_path, values, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(values))
    return str(path)


@pytest.fixture
def corpus(tmp_path):
    # three word types plus <unk>/<eos> pad the vocabulary to V=4 after folding
    train = "a b c a b c\n" * 30
    (tmp_path / "train.txt").write_text(train)
    (tmp_path / "valid.txt").write_text("a c b a\n" * 10)
    return tmp_path


def run_train(tmp_path, corpus, out="run", **extra):
    cfg = {"data.train": "train.txt", "data.valid": "valid.txt", "data.min_count": 1,
           "model.n": 4, "model.k": 8, "model.m": 4, "model.N": 2, "model.g_max": 2,
           "model.hidden": 6, "train.epochs": 1, "train.lr": 1.0, "train.batch_size": 2,
           "train.bptt": 5, "train.eval_batch_size": 2, **extra}
    path = write_config(corpus, cfg)
    outdir = tmp_path / out
    assert main(["train", "--config", path, "--out", str(outdir)]) == 0
    return outdir


class TestParamCount:
    def test_toy_totals(self, tmp_path, capsys):
        path = write_config(tmp_path, TOY)
        assert main(["param-count", "--config", path, "--variant", "HGT,DEFINE"]) == 0
        lines = capsys.readouterr().out.splitlines()
        head = lines[0].split()
        assert head == ["variant", "map", "expansion", "reduce", "context", "classifier", "total"]
        rows = {l.split()[0]: dict(zip(head[1:], map(int, l.split()[1:]))) for l in lines[1:]}
        assert rows["HGT"]["total"] == 248
        assert rows["DEFINE"]["total"] == 312
        assert rows["HGT"]["map"] == 40 and rows["HGT"]["reduce"] == 64

    def test_all_variants(self, tmp_path, capsys):
        path = write_config(tmp_path, TOY)
        assert main(["param-count", "--config", path, "--variant", "all"]) == 0
        assert len(capsys.readouterr().out.splitlines()) == 1 + 7

    def test_with_context(self, tmp_path, capsys):
        path = write_config(tmp_path, {**TOY, "model.hidden": 8})
        assert main(["param-count", "--config", path, "--variant", "HGT"]) == 0
        row = capsys.readouterr().out.splitlines()[1].split()
        assert int(row[4]) == 4 * (4 * 8 + 8 * 8 + 8)
        assert int(row[5]) == 8 * 4
        assert int(row[6]) == 248 + 4 * (4 * 8 + 8 * 8 + 8) + 32

    def test_unknown_variant(self, tmp_path, capsys):
        path = write_config(tmp_path, TOY)
        assert main(["param-count", "--config", path, "--variant", "NOPE"]) == 2
        assert "NOPE" in capsys.readouterr().err


class TestValidation:
    def test_lists_every_problem(self, tmp_path, capsys):
        path = write_config(tmp_path, {**TOY, "model.n": 6, "model.k": 10, "model.g_max": 4,
                                       "model.dims": None, "train.lr": -1.0, "bogus": 1})
        assert main(["param-count", "--config", path]) == 2
        err = capsys.readouterr().err
        assert len(err.strip().splitlines()) == 1
        for frag in ("bogus", "train.lr", "n=6", "k=10"):
            assert frag in err

    def test_type_errors(self):
        errs = RunConfig({"model.n": "four", "train.epochs": 1.5}).problems()
        assert len(errs) == 2

    def test_missing_file(self, tmp_path, capsys):
        assert main(["param-count", "--config", str(tmp_path / "none.json")]) == 2
        assert capsys.readouterr().err.startswith("error: ")

    def test_bad_json(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text("{not json")
        assert main(["param-count", "--config", str(tmp_path / "bad.json")]) == 2
        assert "invalid JSON" in capsys.readouterr().err

    def test_bad_threads(self, tmp_path, corpus, monkeypatch, capsys):
        out = run_train(tmp_path, corpus, **{"train.epochs": 0})
        monkeypatch.setenv("DEFINE_THREADS", "zero")
        assert main(["export-cache", str(out / "checkpoint.bin")]) == 2
        assert "DEFINE_THREADS" in capsys.readouterr().err


class TestConfig:
    def test_round_trip(self):
        cfg = RunConfig({"model": {"n": 8, "dims": [8, 16]}, "train.lr": 3.5, "seed": 4})
        again = RunConfig.from_json(cfg.to_json())
        assert again == cfg
        assert again.to_json() == cfg.to_json()

    def test_nested_equals_flat(self):
        assert RunConfig({"model": {"n": 8}}) == RunConfig({"model.n": 8})

    def test_override_ignores_none(self):
        cfg = RunConfig({"seed": 3}).override(seed=None, out="x")
        assert cfg["seed"] == 3 and cfg["out"] == "x"


class TestRuns:
    def test_train_layout(self, tmp_path, corpus, capsys):
        out = run_train(tmp_path, corpus)
        for name in ("config.json", "vocab.txt", "metrics.jsonl", "timing.jsonl", "checkpoint.bin"):
            assert (out / name).exists()
        resolved = RunConfig.from_json((out / "config.json").read_text())
        assert resolved["model.vocab_size"] == 5
        rec = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
        assert set(rec) == {"epoch", "train_ppl", "val_ppl", "lr"}
        printed = json.loads(capsys.readouterr().out.splitlines()[0])
        assert "seconds" in printed

    def test_uniform_eval_is_vocab_size(self, tmp_path, capsys):
        (tmp_path / "train.txt").write_text("a b\n" * 40)
        (tmp_path / "valid.txt").write_text("b a\n" * 20)
        out = run_train(tmp_path, tmp_path, **{"train.epochs": 0, "model.zero_projection": True})
        capsys.readouterr()
        assert main(["eval", str(out / "checkpoint.bin"), str(tmp_path / "valid.txt"),
                     "--batch-size", "2", "--bptt", "5"]) == 0
        assert capsys.readouterr().out.splitlines()[0] == "perplexity 4.000"

    def test_cache_export_and_eval(self, tmp_path, corpus, capsys):
        out = run_train(tmp_path, corpus)
        ckpt = str(out / "checkpoint.bin")
        assert main(["export-cache", ckpt]) == 0
        cache = read_cache(out / "cache.defc")
        assert cache.rows.shape == (5, 4)
        capsys.readouterr()
        valid = str(corpus / "valid.txt")
        main(["eval", ckpt, valid, "--batch-size", "2", "--bptt", "5"])
        live = json.loads(capsys.readouterr().out.splitlines()[1])["perplexity"]
        main(["eval", ckpt, valid, "--batch-size", "2", "--bptt", "5", "--cache",
              str(out / "cache.defc")])
        cached = json.loads(capsys.readouterr().out.splitlines()[1])["perplexity"]
        assert abs(cached - live) / live < 1e-6

    def test_corrupt_cache(self, tmp_path, corpus, capsys):
        out = run_train(tmp_path, corpus, **{"train.epochs": 0})
        (out / "bad.defc").write_bytes(b"DEFC\x01\x00")
        rc = main(["eval", str(out / "checkpoint.bin"), str(corpus / "valid.txt"),
                   "--cache", str(out / "bad.defc"), "--batch-size", "2", "--bptt", "5"])
        assert rc == 2
        assert "offset 6" in capsys.readouterr().err

    def test_corr_map(self, tmp_path, corpus):
        out = run_train(tmp_path, corpus)
        for stage in ("map", "layer1", "reduce"):
            assert main(["corr-map", str(out / "checkpoint.bin"), "--stage", stage]) == 0
            text = (out / "maps" / f"{stage}.csv").read_text()
            width = 4 if stage != "layer1" else 6
            assert text.splitlines()[0] == f"m={width}"
            M = read_map_csv(out / "maps" / f"{stage}.csv")
            np.testing.assert_allclose(M, M.T, atol=1e-12)
            assert (out / "maps" / f"{stage}.pgm").read_bytes().startswith(b"P5\n")

    def test_corr_map_bad_stage(self, tmp_path, corpus, capsys):
        out = run_train(tmp_path, corpus, **{"train.epochs": 0})
        assert main(["corr-map", str(out / "checkpoint.bin"), "--stage", "nope"]) == 2
        assert "layer1" in capsys.readouterr().err

    def test_seed_override_and_determinism(self, tmp_path, corpus):
        a = run_train(tmp_path, corpus, out="a")
        b = run_train(tmp_path, corpus, out="b")
        assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()
        assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
        path = write_config(corpus, json.loads((a / "config.json").read_text()), "again.json")
        assert main(["train", "--config", path, "--out", str(tmp_path / "c"), "--seed", "5"]) == 0
        assert (tmp_path / "c" / "checkpoint.bin").read_bytes() != (a / "checkpoint.bin").read_bytes()
        assert RunConfig.from_json((tmp_path / "c" / "config.json").read_text())["seed"] == 5

    def test_train_requires_paths(self, tmp_path, capsys):
        path = write_config(tmp_path, {"model.hidden": 4})
        assert main(["train", "--config", path]) == 2
        err = capsys.readouterr().err
        assert "data.train" in err and "data.valid" in err and "out" in err


@pytest.mark.parametrize("variant", ["DEFINE", "HGT", "GLT_SHUFFLE"])
def test_grad_check_command(tmp_path, capsys, variant):
    path = write_config(tmp_path, {"model.vocab_size": 8, "model.n": 4, "model.k": 8, "model.m": 4,
                                   "model.N": 2, "model.g_max": 2, "model.hidden": 8})
    assert main(["grad-check", "--config", path, "--variant", variant]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("PASS")


def test_console_script(tmp_path):
    exe = shutil.which("define-embed")
    if exe is None:
        pytest.skip("console script not installed")
    path = write_config(tmp_path, TOY)
    res = subprocess.run([exe, "param-count", "--config", path], capture_output=True, text=True)
    assert res.returncode == 0 and "312" in res.stdout
    res = subprocess.run([exe, "eval", str(tmp_path / "x.bin"), path], capture_output=True, text=True)
    assert res.returncode != 0 and res.stderr.startswith("error: ")
