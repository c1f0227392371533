import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import sine, white
from mdpipe.audio import AudioBuffer
from mdpipe.roomsim import (
    NoiseConfig,
    RoomSimError,
    config_violations,
    generate_config_pool,
    generate_rir,
    load_config_pool,
    measure_snr,
    mix,
    mix_components,
    save_config_pool,
)


def oracle_t60(taps, fs, lo=-5.0, hi=-25.0):
    """Schroeder backward integration with a least-squares fit, written out longhand."""
    e = [float(v) ** 2 for v in taps]
    total = sum(e)
    edc = []
    acc = 0.0
    for v in reversed(e):
        acc += v
        edc.append(acc)
    edc.reverse()
    ts, ds = [], []
    for i, v in enumerate(edc):
        if v <= 0:
            continue
        db = 10 * math.log10(v / total)
        if hi <= db <= lo:
            ts.append(i / fs)
            ds.append(db)
    n = len(ts)
    mt, md = sum(ts) / n, sum(ds) / n
    slope = sum((t - mt) * (d - md) for t, d in zip(ts, ds)) / sum((t - mt) ** 2 for t in ts)
    return -60.0 / slope


def shoebox(rt60=0.0, mic=(2.0, 2.0, 1.5), speech=(5.43, 2.0, 1.5), noises=(), snr=10.0, dims=(8.0, 6.0, 3.0)):
    return NoiseConfig(dims, rt60, mic, speech, tuple(noises), snr)


class TestConfigPool:
    def test_seeded_determinism(self):
        assert generate_config_pool(7, 1000) == generate_config_pool(7, 1000)

    def test_different_seeds_differ(self):
        assert generate_config_pool(7, 10) != generate_config_pool(8, 10)

    def test_count(self):
        with pytest.raises(ValueError):
            generate_config_pool(1, 0)

    def test_invariants_exhaustive(self):
        pool = generate_config_pool(123, 10_000)
        assert len(pool) == 10_000
        for cfg in pool:
            assert config_violations(cfg) == []
            # independent restatement of the ranges
            d = math.dist(cfg.speech_pos, cfg.mic_pos)
            assert 1.0 <= d <= 10.0
            assert 0 <= len(cfg.noise_positions) <= 4
            assert 0 <= cfg.rt60_s <= 0.9 and 0 <= cfg.snr_db <= 30
            for p in (cfg.mic_pos, cfg.speech_pos, *cfg.noise_positions):
                assert all(0 < c < L for c, L in zip(p, cfg.room_dims))

    def test_snr_mean_uniform(self):
        snr = np.array([c.snr_db for c in generate_config_pool(2024, 100_000)])
        assert abs(snr.mean() - 15.0) <= 0.5

    def test_noise_source_counts_cover_range(self):
        counts = {len(c.noise_positions) for c in generate_config_pool(5, 500)}
        assert counts == {0, 1, 2, 3, 4}

    def test_file_roundtrip(self, tmp_path):
        pool = generate_config_pool(3, 50)
        save_config_pool(tmp_path / "c.jsonl", pool)
        assert load_config_pool(tmp_path / "c.jsonl") == pool

    def test_load_rejects_invalid(self, tmp_path):
        bad = shoebox(snr=40.0)
        save_config_pool(tmp_path / "c.jsonl", [bad])
        with pytest.raises(RoomSimError, match=":1:"):
            load_config_pool(tmp_path / "c.jsonl")


class TestRIR:
    def test_anechoic_single_tap(self):
        cfg = shoebox(rt60=0.0)  # 3.43 m apart
        rir = generate_rir(cfg, cfg.speech_pos, 16000)
        nz = np.flatnonzero(rir.taps)
        assert nz.tolist() == [160]
        assert rir.taps[160] == pytest.approx(1 / 3.43)

    def test_inverse_distance(self):
        near = shoebox(speech=(3.5, 2.0, 1.5))
        far = shoebox(speech=(5.0, 2.0, 1.5))
        a = generate_rir(near, near.speech_pos, 16000).taps.max()
        b = generate_rir(far, far.speech_pos, 16000).taps.max()
        assert b == pytest.approx(a / 2)

    def test_schroeder_half_second(self):
        cfg = shoebox(rt60=0.5)
        rir = generate_rir(cfg, cfg.speech_pos, 16000)
        assert len(rir.taps) >= 0.5 * 16000
        assert oracle_t60(rir.taps, 16000) == pytest.approx(0.5, rel=0.2)

    def test_first_tap_is_direct_path(self):
        for cfg in generate_config_pool(9, 20):
            for fs in (8000, 16000):
                rir = generate_rir(cfg, cfg.speech_pos, fs)
                expected = round(math.dist(cfg.speech_pos, cfg.mic_pos) / 343 * fs)
                assert np.flatnonzero(rir.taps)[0] == expected

    def test_coincident_source(self):
        cfg = shoebox()
        with pytest.raises(RoomSimError, match="coincides"):
            generate_rir(cfg, (2.0, 2.0, 1.505), 16000)

    def test_source_outside(self):
        with pytest.raises(RoomSimError):
            generate_rir(shoebox(), (9.0, 1.0, 1.0), 16000)

    def test_unsupported_rate(self):
        with pytest.raises(RoomSimError):
            generate_rir(shoebox(), shoebox().speech_pos, 44100)

    def test_finite(self):
        cfg = generate_config_pool(1, 1)[0]
        assert np.all(np.isfinite(generate_rir(cfg, cfg.speech_pos, 8000).taps))


class TestMeasureSNR:
    def test_identical(self):
        x = white(0.1)
        assert measure_snr(x, x) == pytest.approx(0.0)

    def test_scaled(self):
        x = white(0.1)
        assert measure_snr(x, AudioBuffer(0.1 * x.samples, 16000)) == pytest.approx(20.0)

    def test_power_ratio(self):
        s = np.full(100, math.sqrt(2.0))
        n = np.ones(100)
        assert measure_snr(s, n) == pytest.approx(3.0103, abs=1e-4)

    def test_zero_noise(self):
        with pytest.raises(ValueError):
            measure_snr(np.ones(4), np.zeros(4))


class TestMix:
    def test_no_noise_is_reverberant_speech(self):
        cfg = shoebox(rt60=0.3)
        speech = sine(1000, 0.5, amp=0.3)
        out = mix(speech, [], cfg, np.random.default_rng(0))
        from scipy.signal import fftconvolve

        rev = fftconvolve(speech.samples, generate_rir(cfg, cfg.speech_pos, 16000).taps)[: len(speech)]
        np.testing.assert_array_equal(out.samples, rev)

    def test_snr_sine_plus_white(self):
        cfg = shoebox(rt60=0.4, noises=[(6.0, 4.0, 2.0)], snr=10.0)
        rev, noise = mix_components(sine(1000, 1.0), [white(0.7)], cfg, np.random.default_rng(1))
        snr = 10 * math.log10(np.sum(rev**2) / np.sum(noise**2))
        assert abs(snr - 10.0) <= 0.5

    def test_two_sources_zero_db(self):
        cfg = shoebox(rt60=0.2, noises=[(6.0, 4.0, 2.0), (1.0, 5.0, 1.0)], snr=0.0)
        rev, noise = mix_components(sine(500, 1.0), [white(1, seed=1), white(1, seed=2)], cfg, np.random.default_rng(2))
        assert np.sum(noise**2) == pytest.approx(np.sum(rev**2), rel=0.12)

    def test_output_length_and_bounds(self):
        cfg = shoebox(rt60=0.3, noises=[(6.0, 4.0, 2.0)], snr=0.0)
        speech = sine(300, 0.77, amp=0.99)
        out = mix(speech, [white(0.2, amp=0.9)], cfg, np.random.default_rng(3))
        assert len(out) == len(speech)
        assert np.max(np.abs(out.samples)) <= 1.0

    def test_peak_scaling_keeps_snr(self):
        cfg = shoebox(rt60=0.0, speech=(3.0, 2.0, 1.5), noises=[(6.0, 4.0, 2.0)], snr=5.0)
        speech = sine(300, 0.5, amp=1.0)
        noise = white(0.5, amp=1.0)
        rev, n = mix_components(speech, [noise], cfg, np.random.default_rng(4))
        out = mix(speech, [noise], cfg, np.random.default_rng(4))
        scale = np.max(np.abs(rev + n))
        assert scale > 1
        np.testing.assert_allclose(out.samples, (rev + n) / scale)

    def test_seeded(self):
        cfg = shoebox(rt60=0.3, noises=[(6.0, 4.0, 2.0)], snr=3.0)
        a = mix(sine(700, 0.3), [white(0.5)], cfg, np.random.default_rng(9))
        b = mix(sine(700, 0.3), [white(0.5)], cfg, np.random.default_rng(9))
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_errors(self):
        cfg = shoebox(noises=[(6.0, 4.0, 2.0)])
        rng = np.random.default_rng(0)
        with pytest.raises(RoomSimError, match="SNR"):
            mix(AudioBuffer(np.zeros(100), 16000), [white(0.1)], cfg, rng)
        with pytest.raises(RoomSimError, match="empty"):
            mix(sine(100, 0.1), [AudioBuffer(np.zeros(0), 16000)], cfg, rng)
        with pytest.raises(RoomSimError, match="noise buffers"):
            mix(sine(100, 0.1), [], cfg, rng)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(200, 4000))
    def test_length_preserved_property(self, seed, n):
        cfg = generate_config_pool(seed, 1)[0]
        rng = np.random.default_rng(seed)
        speech = AudioBuffer(0.1 * rng.standard_normal(n), 8000)
        noises = [AudioBuffer(0.1 * rng.standard_normal(300), 8000) for _ in cfg.noise_positions]
        assert len(mix(speech, noises, cfg, rng)) == n
