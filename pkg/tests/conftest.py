import json
import math
import sys

import numpy as np
import pytest

from mdpipe.audio import AudioBuffer, write_wav


def sine(freq, seconds=1.0, rate=16000, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * rate))) / rate
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t + phase), rate)


def white(seconds=1.0, rate=16000, amp=0.1, seed=0):
    rng = np.random.default_rng(seed)
    return AudioBuffer(np.clip(amp * rng.standard_normal(int(round(seconds * rate))), -1, 1), rate)


def power_db(x):
    return 10 * math.log10(float(np.sum(np.asarray(x) ** 2)))


def speechlike(seconds, rate, seed):
    """Harmonic tone with a syllable-rate envelope plus a little noise."""
    rng = np.random.default_rng(seed)
    n = int(round(seconds * rate))
    t = np.arange(n) / rate
    f0 = rng.uniform(90, 220)
    x = sum(np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 12))
    env = 0.5 * (1 + np.sin(2 * np.pi * rng.uniform(2, 5) * t))
    x = env * x + 0.05 * rng.standard_normal(n)
    return AudioBuffer(0.3 * x / np.max(np.abs(x)), rate)


def write_corpus(root, domains, seconds=0.5, rate=16000, seed=0):
    """Write WAVs for ``{domain: count}`` plus one JSONL manifest per domain.

    Returns the list of manifest paths.
    """
    paths = []
    k = 0
    for domain, count in domains.items():
        man = root / f"{domain}.jsonl"
        with open(man, "w") as f:
            for i in range(count):
                uid = f"{domain}-{i:03d}"
                wav = root / "wav" / f"{uid}.wav"
                write_wav(wav, speechlike(seconds, rate, seed + k))
                k += 1
                f.write(json.dumps({
                    "id": uid, "audio_path": str(wav), "domain": domain,
                    "sample_rate_hz": rate, "duration_s": seconds,
                }) + "\n")
        paths.append(man)
    return paths


def write_noise_corpus(root, count=3, seconds=1.0):
    man = root / "noise.jsonl"
    with open(man, "w") as f:
        for i in range(count):
            wav = root / "noise" / f"n{i}.wav"
            write_wav(wav, white(seconds, amp=0.2, seed=100 + i))
            f.write(json.dumps({
                "id": f"noise-{i}", "audio_path": str(wav), "domain": "noise",
                "sample_rate_hz": 16000, "duration_s": seconds,
            }) + "\n")
    return man


@pytest.fixture
def corpus(tmp_path):
    return write_corpus(tmp_path, {"voicesearch": 6, "youtube": 4})


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
