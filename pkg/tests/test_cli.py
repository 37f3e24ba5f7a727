import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from actvae.cli import main, manifest_path
from actvae.data import load_sequences, read_header
from actvae.training import load_checkpoint

QUICK = ["--d-z", "4", "--enc-hidden", "8", "--max-steps", "12", "--batch", "8"]


def run(*argv):
    return main([str(a) for a in argv])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def manifest(path):
    return json.loads(manifest_path(path).read_text())


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen", "default", d / "train.jsonl", "--seed", 3, "--n", 40, "--frames", 12) == 0
    assert run("gen", "default", d / "test.jsonl", "--seed", 4, "--n", 6, "--frames", 12,
               "--id-prefix", "test") == 0
    assert run("train", d / "train.jsonl", "--out", d / "m.ckpt", "--seed", 1, *QUICK) == 0
    return d


def assert_manifest_valid(artifact, command):
    m = manifest(artifact)
    assert m["command"] == command and m["complete"] is True
    assert m["argv"][0] == command
    for entry in m["inputs"] + m["outputs"]:
        if Path(entry["path"]).is_file():
            assert entry["sha256"] == sha(Path(entry["path"]))
    return m


class TestGen:
    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen", "default", tmp_path / f"{name}.jsonl", "--seed", 7, "--n", 5) == 0
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        m = assert_manifest_valid(tmp_path / "a.jsonl", "gen")
        assert m["seed"] == 7 and m["config"]["n"] == 5

    def test_empty_dataset(self, tmp_path):
        assert run("gen", "default", tmp_path / "e.jsonl", "--n", 0) == 0
        assert load_sequences(tmp_path / "e.jsonl") == []
        assert read_header(tmp_path / "e.jsonl")["format"] == "actvae-pose-sequences"

    def test_spec_file(self, tmp_path):
        from actvae.data import default_synthetic_spec

        (tmp_path / "s.json").write_text(json.dumps(default_synthetic_spec().to_dict()))
        assert run("gen", tmp_path / "s.json", tmp_path / "x.jsonl", "--n", 2, "--seed", 1) == 0
        assert run("gen", "default", tmp_path / "y.jsonl", "--n", 2, "--seed", 1) == 0
        assert (tmp_path / "x.jsonl").read_bytes() == (tmp_path / "y.jsonl").read_bytes()

    def test_bad_spec(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text('{"categories": [], "colour": 1}')
        assert run("gen", tmp_path / "bad.json", tmp_path / "o.jsonl") == 2
        assert "bad synthetic spec" in capsys.readouterr().err
        assert not (tmp_path / "o.jsonl").exists()
        assert run("gen", tmp_path / "missing.json", tmp_path / "o.jsonl") == 2

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ACTVAE_SEED", "11")
        assert run("gen", "default", tmp_path / "env.jsonl", "--n", 3) == 0
        monkeypatch.delenv("ACTVAE_SEED")
        assert run("gen", "default", tmp_path / "flag.jsonl", "--n", 3, "--seed", 11) == 0
        assert sha(tmp_path / "env.jsonl") == sha(tmp_path / "flag.jsonl")
        assert manifest(tmp_path / "env.jsonl")["seed"] == 11


class TestTrain:
    def test_outputs(self, work):
        m = assert_manifest_valid(work / "m.ckpt", "train")
        assert m["config"]["model"]["d_z"] == 4 and m["config"]["hyper"]["max_steps"] == 12
        assert m["config"]["model"]["dec_hidden"] == 8  # built-in desk default survives
        log = (work / "m.ckpt.metrics.jsonl").read_text().splitlines()
        assert len(log) == 12
        assert set(json.loads(log[0])) == {"step", "dis", "div", "total", "wall_ms"}
        assert load_checkpoint(work / "m.ckpt").step == 12

    def test_deterministic(self, work, tmp_path):
        assert run("train", work / "train.jsonl", "--out", tmp_path / "again.ckpt", "--seed", 1,
                   *QUICK) == 0
        assert sha(tmp_path / "again.ckpt") == sha(work / "m.ckpt")

    def test_reproducible_from_manifest(self, work, tmp_path):
        argv = manifest(work / "m.ckpt")["argv"]
        argv[argv.index("--out") + 1] = str(tmp_path / "re.ckpt")
        argv[argv.index("--metrics") + 1] = str(tmp_path / "re.metrics")
        assert main(argv) == 0
        assert sha(tmp_path / "re.ckpt") == sha(work / "m.ckpt")

    def test_resume_equivalence(self, work, tmp_path):
        base = ["train", work / "train.jsonl", "--seed", 1, "--d-z", 4, "--enc-hidden", 8,
                "--batch", 8]
        assert run(*base, "--max-steps", 5, "--out", tmp_path / "half.ckpt") == 0
        assert run(*base, "--max-steps", 12, "--resume", tmp_path / "half.ckpt",
                   "--out", tmp_path / "resumed.ckpt") == 0
        assert sha(tmp_path / "resumed.ckpt") == sha(work / "m.ckpt")

    def test_config_file_and_precedence(self, work, tmp_path):
        cfg = {"model": {"d_z": 6, "enc_hidden": 8}, "hyper": {"max_steps": 3, "lr": 0.001}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert run("train", work / "train.jsonl", "--out", tmp_path / "c.ckpt",
                   "--config", tmp_path / "c.json", "--max-steps", 2) == 0
        m = manifest(tmp_path / "c.ckpt")["config"]
        assert m["model"]["d_z"] == 6 and m["hyper"]["lr"] == 0.001
        assert m["hyper"]["max_steps"] == 2  # flag beats file

    def test_mismatched_joints(self, work, tmp_path, capsys):
        (tmp_path / "j.json").write_text(json.dumps({"model": {"J": 5}, "hyper": {}}))
        assert run("train", work / "train.jsonl", "--out", tmp_path / "j.ckpt",
                   "--config", tmp_path / "j.json", *QUICK) == 2
        assert "J=5" in capsys.readouterr().err
        assert not (tmp_path / "j.ckpt").exists()

    def test_invalid_data(self, tmp_path, capsys):
        (tmp_path / "d.jsonl").write_text("garbage\n")
        assert run("train", tmp_path / "d.jsonl", "--out", tmp_path / "x.ckpt") == 2
        assert run("train", tmp_path / "none.jsonl", "--out", tmp_path / "x.ckpt") == 2
        assert "error" in capsys.readouterr().err

    def test_divergence_exit_code(self, work, tmp_path):
        with np.errstate(all="ignore"):
            code = run("train", work / "train.jsonl", "--out", tmp_path / "nan.ckpt",
                       "--lr", "1e30", *QUICK)
        assert code == 3
        assert not (tmp_path / "nan.ckpt").exists()
        m = manifest(tmp_path / "nan.ckpt")
        assert m["complete"] is False and "non-finite" in m["error"]


class TestSample:
    def test_records(self, work):
        out = work / "s.jsonl"
        assert run("sample", work / "m.ckpt", "--pose", work / "test.jsonl", "--record", 2,
                   "--k", 4, "--seed", 5, "--out", out) == 0
        recs = load_sequences(out)
        src = load_sequences(work / "test.jsonl")[2]
        assert len(recs) == 4
        for r in recs:
            assert r.n_frames == 9 and r.action_index == src.action_index
            np.testing.assert_array_equal(r.frames[0], src.frames[0])
        assert_manifest_valid(out, "sample")

    def test_deterministic_single(self, work, tmp_path):
        for name, seed in (("a", 1), ("b", 2)):
            assert run("sample", work / "m.ckpt", "--pose", work / "test.jsonl", "--k", 1,
                       "--deterministic", "--seed", seed, "--out", tmp_path / f"{name}.jsonl") == 0
        # the mean rollout ignores the noise seed
        a, b = (load_sequences(tmp_path / f"{n}.jsonl")[0] for n in ("a", "b"))
        np.testing.assert_array_equal(a.frames, b.frames)

    def test_labels_change_output(self, work, tmp_path):
        for lab in (0, 1):
            assert run("sample", work / "m.ckpt", "--pose", work / "test.jsonl", "--label", lab,
                       "--k", 3, "--seed", 9, "--out", tmp_path / f"l{lab}.jsonl") == 0
        a, b = (load_sequences(tmp_path / f"l{lab}.jsonl") for lab in (0, 1))
        assert [r.action_index for r in b] == [1, 1, 1]
        assert any(not np.array_equal(x.frames, y.frames) for x, y in zip(a, b))

    def test_reproducible_from_manifest(self, work, tmp_path):
        assert run("sample", work / "m.ckpt", "--pose", work / "test.jsonl", "--k", 3,
                   "--out", tmp_path / "s.jsonl") == 0
        argv = manifest(tmp_path / "s.jsonl")["argv"]
        argv[argv.index("--out") + 1] = str(tmp_path / "t.jsonl")
        assert main(argv) == 0
        assert sha(tmp_path / "t.jsonl") == sha(tmp_path / "s.jsonl")

    @pytest.mark.parametrize("extra", [["--label", "2"], ["--label", "-1"], ["--k", "0"],
                                       ["--record", "99"], ["--frame", "50"]])
    def test_invalid(self, work, tmp_path, extra):
        assert run("sample", work / "m.ckpt", "--pose", work / "test.jsonl", *extra,
                   "--out", tmp_path / "bad.jsonl") == 2
        assert not (tmp_path / "bad.jsonl").exists()

    def test_checkpoint_pose_mismatch(self, work, tmp_path):
        from actvae.data import PoseSequenceRecord, save_sequences

        save_sequences(tmp_path / "j3.jsonl",
                       [PoseSequenceRecord("x", "a", 0, np.full((3, 3, 2), 5.0), (128, 128))])
        assert run("sample", work / "m.ckpt", "--pose", tmp_path / "j3.jsonl",
                   "--out", tmp_path / "o.jsonl") == 2


class TestEval:
    def test_report(self, work):
        out = work / "rep.jsonl"
        assert run("eval", work / "m.ckpt", work / "test.jsonl", "--k", 8, "--keep", 2,
                   "--seed", 3, "--out", out) == 0
        rows = [json.loads(x) for x in out.read_text().splitlines()]
        seqs, summary = rows[:-1], rows[-1]
        assert len(seqs) == 6 and all(r["kind"] == "sequence" for r in seqs)
        assert summary["kind"] == "summary" and summary["K"] == 8 and summary["n_keep"] == 2
        for key in ("l2_best_of_k", "diversity_std", "baseline_l2"):
            assert summary[key] >= 0
        assert summary["l2_best_of_k"] == pytest.approx(np.mean([r["l2_best_of_k"] for r in seqs]))
        assert "L2 best 2 of 8" in (work / "rep.jsonl.txt").read_text()
        assert_manifest_valid(out, "eval")

    def test_deterministic(self, work, tmp_path):
        for name in ("a", "b"):
            assert run("eval", work / "m.ckpt", work / "test.jsonl", "--k", 5, "--keep", 2,
                       "--seed", 8, "--out", tmp_path / f"{name}.jsonl") == 0
        assert sha(tmp_path / "a.jsonl") == sha(tmp_path / "b.jsonl")

    def test_empty_test_set(self, work, tmp_path, capsys):
        assert run("gen", "default", tmp_path / "empty.jsonl", "--n", 0) == 0
        assert run("eval", work / "m.ckpt", tmp_path / "empty.jsonl",
                   "--out", tmp_path / "r.jsonl") == 2
        assert "empty test set" in capsys.readouterr().err

    def test_bad_keep(self, work, tmp_path):
        assert run("eval", work / "m.ckpt", work / "test.jsonl", "--k", 3, "--keep", 5,
                   "--out", tmp_path / "r.jsonl") == 2


class TestPlot:
    def test_frames_and_filmstrip(self, work, tmp_path):
        assert run("plot", work / "test.jsonl", "--out", tmp_path / "p", "--limit", 2) == 0
        for rid in ("test-000", "test-001"):
            files = sorted(p.name for p in (tmp_path / "p" / rid).iterdir())
            assert files == sorted([f"frame_{t:03d}.png" for t in range(12)] + ["filmstrip.png"])
        m = assert_manifest_valid(tmp_path / "p", "plot")
        assert len(m["outputs"]) == 26

    def test_single_frame(self, work, tmp_path):
        assert run("plot", work / "test.jsonl", "--out", tmp_path / "p", "--record", "test-003",
                   "--max-frames", 1) == 0
        files = sorted(p.name for p in (tmp_path / "p" / "test-003").iterdir())
        assert files == ["filmstrip.png", "frame_000.png"]

    def test_unknown_joint_count(self, tmp_path, capsys):
        from actvae.data import PoseSequenceRecord, save_sequences

        save_sequences(tmp_path / "j5.jsonl",
                       [PoseSequenceRecord("x", "a", 0, np.full((2, 5, 2), 5.0), (64, 64))])
        assert run("plot", tmp_path / "j5.jsonl", "--out", tmp_path / "p") == 2
        assert "explicit skeleton" in capsys.readouterr().err
        (tmp_path / "sk.json").write_text(json.dumps(
            {"name": "five", "n_joints": 5, "edges": [[0, 1], [1, 2], [2, 3], [3, 4]]}))
        assert run("plot", tmp_path / "j5.jsonl", "--out", tmp_path / "p",
                   "--skeleton", tmp_path / "sk.json") == 0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "actvae", "gen", "default",
                           str(tmp_path / "m.jsonl"), "--n", "2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "actvae", "sample", str(tmp_path / "nope.ckpt"),
                           "--pose", str(tmp_path / "m.jsonl"), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "no such checkpoint" in proc.stderr
