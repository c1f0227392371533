import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import write_corpus, write_noise_corpus
from mdpipe.audio import read_wav, to_pcm16
from mdpipe.cli import main
from mdpipe.frontend import read_lmfb


def run(args, capsys):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    return json.loads(err.strip().splitlines()[-1])


def write_policy(path, domains, probs=(0.0, 0.0, 0.0), seed=3, pool=None, noise=None):
    obj = {
        "master_seed": seed,
        "domains": {d: dict(zip(("noise_prob", "bandwidth_prob", "codec_prob"), probs)) for d in domains},
    }
    if pool:
        obj["config_pool_path"] = str(pool)
    if noise:
        obj["noise_manifest_path"] = str(noise)
    path.write_text(json.dumps(obj))
    return path


class TestGenConfigs:
    def test_deterministic_bytes(self, tmp_path, capsys):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert run(["gen-configs", "--seed", 7, "--count", 100, "--out", a], capsys)[0] == 0
        assert run(["gen-configs", "--seed", 7, "--count", 100, "--out", b], capsys)[0] == 0
        assert a.read_bytes() == b.read_bytes()
        assert len(a.read_text().splitlines()) == 100
        assert json.loads((tmp_path / "a.jsonl.meta.json").read_text())["seed"] == 7

    def test_zero_count_usage_error(self, tmp_path, capsys):
        code, _, err = run(["gen-configs", "--seed", 1, "--count", 0, "--out", tmp_path / "x"], capsys)
        assert code == 2
        assert "count" in error_of(err)["error"]

    def test_unwritable(self, tmp_path, capsys):
        (tmp_path / "file").write_text("")
        code, _, err = run(["gen-configs", "--seed", 1, "--count", 1, "--out", tmp_path / "file" / "x"], capsys)
        assert code == 1 and "cannot write" in error_of(err)["error"]

    def test_auto_seed_recorded(self, tmp_path, capsys):
        out = tmp_path / "c.jsonl"
        assert run(["gen-configs", "--count", 3, "--out", out], capsys)[0] == 0
        assert isinstance(json.loads((tmp_path / "c.jsonl.meta.json").read_text())["seed"], int)


class TestAugment:
    def test_zero_policy_identity(self, tmp_path, capsys, corpus):
        policy = write_policy(tmp_path / "p.json", ["voicesearch", "youtube"])
        out = tmp_path / "out"
        args = ["augment", "--manifest", corpus[0], "--manifest", corpus[1], "--policy", policy, "--out-dir", out]
        assert run(args, capsys)[0] == 0
        for man in corpus:
            for line in man.read_text().splitlines():
                rec = json.loads(line)
                src = to_pcm16(read_wav(rec["audio_path"]).samples).astype(int)
                dst = to_pcm16(read_wav(out / f"{rec['id']}.wav").samples).astype(int)
                assert np.max(np.abs(src - dst)) <= 1

    def test_traces_and_replay_bit_exact(self, tmp_path, capsys):
        manifests = write_corpus(tmp_path, {"vs": 20}, seconds=0.3)
        pool = tmp_path / "configs.jsonl"
        run(["gen-configs", "--seed", 5, "--count", 50, "--out", pool], capsys)
        noise = write_noise_corpus(tmp_path)
        policy = write_policy(tmp_path / "p.json", ["vs"], (1.0, 0.5, 0.5), pool=pool, noise=noise)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        base = ["augment", "--manifest", manifests[0], "--policy", policy]
        assert run(base + ["--out-dir", out1, "--seed", 9], capsys)[0] == 0
        lines = [json.loads(l) for l in (out1 / "traces.jsonl").read_text().splitlines()]
        assert lines[0]["header"]["seed"] == 9
        traces = lines[1:]
        assert len(traces) == 20 and all(t["noise_config_index"] is not None for t in traces)
        assert run(base + ["--out-dir", out2, "--replay", out1 / "traces.jsonl"], capsys)[0] == 0
        for t in traces:
            assert (out1 / f"{t['id']}.wav").read_bytes() == (out2 / f"{t['id']}.wav").read_bytes()

    def test_policy_domain_mismatch(self, tmp_path, capsys, corpus):
        policy = write_policy(tmp_path / "p.json", ["voicesearch", "farfield"])
        code, _, err = run(["augment", "--manifest", corpus[0], "--policy", policy, "--out-dir", tmp_path / "o"], capsys)
        assert code == 1 and "farfield" in error_of(err)["error"]


class TestFeaturize:
    def test_stacked_and_raw_shapes(self, tmp_path, capsys):
        manifests = write_corpus(tmp_path, {"A": 2}, seconds=1.0)
        stats = tmp_path / "stats.json"
        assert run(["featurize", "--manifest", manifests[0], "--out-dir", tmp_path / "s", "--fit-stats", stats], capsys)[0] == 0
        assert read_lmfb(tmp_path / "s" / "A-000.lmfb").shape == (33, 512)
        assert run(["featurize", "--manifest", manifests[0], "--out-dir", tmp_path / "r", "--raw"], capsys)[0] == 0
        assert read_lmfb(tmp_path / "r" / "A-000.lmfb").shape == (97, 128)
        assert run(["featurize", "--manifest", manifests[0], "--out-dir", tmp_path / "n", "--stats", stats], capsys)[0] == 0
        np.testing.assert_array_equal(read_lmfb(tmp_path / "n" / "A-001.lmfb"), read_lmfb(tmp_path / "s" / "A-001.lmfb"))

    def test_8k_input_upsampled(self, tmp_path, capsys):
        manifests = write_corpus(tmp_path, {"tel": 1}, seconds=1.0, rate=8000)
        assert run(["featurize", "--manifest", manifests[0], "--out-dir", tmp_path / "o"], capsys)[0] == 0
        assert read_lmfb(tmp_path / "o" / "tel-000.lmfb").shape == (33, 512)

    def test_missing_stats(self, tmp_path, capsys, corpus):
        code, _, err = run(["featurize", "--manifest", corpus[0], "--out-dir", tmp_path / "o",
                            "--stats", tmp_path / "missing.json"], capsys)
        assert code == 1 and "normalization stats not found" in error_of(err)["error"]

    def test_bad_manifest(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"id": "a", "audio_path": "a.wav", "domain": "A", "sample_rate_hz": 44100, "duration_s": 1}\n')
        code, _, err = run(["featurize", "--manifest", bad, "--out-dir", tmp_path / "o"], capsys)
        assert code == 1 and "44100" in error_of(err)["error"]


class TestPipelineCommand:
    def test_report(self, tmp_path, capsys, corpus):
        policy = write_policy(tmp_path / "p.json", ["voicesearch", "youtube"], (0.0, 0.5, 0.5))
        report = tmp_path / "r.json"
        args = ["pipeline", "--manifest", corpus[0], "--manifest", corpus[1], "--policy", policy,
                "--epochs", 2, "--workers", 2, "--capacity", 4, "--seed", 1, "--report", report,
                "--out-dir", tmp_path / "feats"]
        assert run(args, capsys)[0] == 0
        rep = json.loads(report.read_text())
        assert rep["consumed"] == 20 and rep["seed"] == 1 and rep["max_queue_occupancy"] <= 4
        assert len(list((tmp_path / "feats" / "epoch001").glob("*.lmfb"))) == 10
        assert len((tmp_path / "feats" / "traces.jsonl").read_text().splitlines()) == 20


class TestAnalyze:
    def analyze(self, tmp_path, capsys, corpus, extra=()):
        return run(["analyze", "--manifest", corpus[0], "--manifest", corpus[1], "--manifest", corpus[2],
                    "--target", "tel", "--n", 12, "--seed", 4, *extra], capsys)

    @pytest.fixture
    def three(self, tmp_path):
        return write_corpus(tmp_path, {"tel": 12, "vs": 12, "yt": 12}, seconds=0.3)

    def test_two_rows_deterministic(self, tmp_path, capsys, three):
        code, out1, _ = self.analyze(tmp_path, capsys, three, ["--csv", tmp_path / "a.csv"])
        assert code == 0
        _, out2, _ = self.analyze(tmp_path, capsys, three, ["--csv", tmp_path / "b.csv"])
        assert out1 == out2
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = (tmp_path / "a.csv").read_text().splitlines()
        assert rows[0] == "domain,average_silhouette,cluster_similarity"
        assert [r.split(",")[0] for r in rows[1:]] == ["vs", "yt"]
        assert out1.startswith("# ") and "overlap" in out1.splitlines()[0]

    def test_n_too_large_names_domain(self, tmp_path, capsys):
        m = write_corpus(tmp_path, {"tel": 5, "vs": 3}, seconds=0.3)
        code, _, err = run(["analyze", "--manifest", m[0], "--manifest", m[1], "--target", "tel", "--n", 4,
                            "--seed", 0], capsys)
        assert code == 1 and "'vs'" in error_of(err)["error"]

    def test_embeddings_input(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        with open(tmp_path / "e.jsonl", "w") as f:
            for dom, c in (("tel", 0.0), ("x", 4.0)):
                for i in range(6):
                    f.write(json.dumps({"id": f"{dom}{i}", "domain": dom, "vector": (c + rng.normal(size=3)).tolist()}) + "\n")
        code, out, _ = run(["analyze", "--embeddings", tmp_path / "e.jsonl", "--target", "tel", "--n", 6, "--seed", 1], capsys)
        assert code == 0 and out.splitlines()[-1].startswith("x ")

    def test_needs_input(self, capsys):
        code, _, err = run(["analyze", "--target", "tel"], capsys)
        assert code == 2


def test_stats_command(capsys, corpus):
    code, out, _ = run(["stats", "--manifest", corpus[0], "--manifest", corpus[1]], capsys)
    assert code == 0
    lines = out.splitlines()
    assert any(l.startswith("voicesearch") for l in lines) and lines[-1].startswith("Total")


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mdpipe.cli", "gen-configs", "--count", "-1", "--out", str(tmp_path / "x")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip())["type"] == "UsageError"
