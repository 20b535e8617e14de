import wave

import numpy as np
import pytest
from scipy import stats

from gradsteer import mixgen
from gradsteer.mixgen import (AnyClasses, DistinctClasses, FixedPair, MixSpec, default_bank, generate_source,
                              make_batch, mix_at_snr)


def _write_wav(path, samples, rate=8000, channels=1, width=2):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(np.asarray(samples, dtype="<i2").tobytes())


@pytest.fixture(scope="module")
def bank():
    return default_bank()


def test_generate_source_deterministic(bank):
    tonal = bank.by_id(0)
    a = generate_source(tonal, 1000, np.random.default_rng(5))
    b = generate_source(tonal, 1000, np.random.default_rng(5))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("class_id", [0, 1, 2, 3])
def test_generate_source_unit_rms(bank, class_id):
    x = generate_source(bank.by_id(class_id), 2048, np.random.default_rng(class_id))
    assert len(x) == 2048
    assert abs(np.sqrt(np.mean(x**2)) - 1.0) < 1e-9


def test_noiseband_energy_in_band():
    cls = mixgen.SourceClass(9, "nb", mixgen.NoiseBand(1000.0, 2000.0))
    x = generate_source(cls, 8000, np.random.default_rng(0))
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(len(x), 1 / 8000)
    inside = power[(freqs >= 1000) & (freqs <= 2000)].sum()
    assert inside / power.sum() >= 0.9


def test_bank_rejects_duplicates_and_aliasing():
    with pytest.raises(mixgen.MixgenError):
        mixgen.ClassBank([mixgen.SourceClass(0, "a", mixgen.Tonal()), mixgen.SourceClass(0, "b", mixgen.Chirp())])
    with pytest.raises(mixgen.MixgenError):
        mixgen.ClassBank([mixgen.SourceClass(0, "a", mixgen.NoiseBand(1000, 5000))], sample_rate=8000)


def test_mix_at_snr_equal_energy():
    rng = np.random.default_rng(1)
    s1 = rng.standard_normal(100)
    s2 = rng.standard_normal(100)
    s2 *= np.linalg.norm(s1) / np.linalg.norm(s2)
    _, _, g = mix_at_snr(s1, s2, 0.0)
    assert g == pytest.approx(1.0, abs=1e-12)


def test_mix_at_snr_hand_example():
    s1 = np.array([2.0, 0.0])  # ||s1|| = 2
    s2 = np.array([0.0, 1.0])  # ||s2|| = 1
    _, _, g = mix_at_snr(s1, s2, 6.0206)
    assert g == pytest.approx(2 * 10 ** (-6.0206 / 20), abs=1e-15)
    assert g == pytest.approx(1.0, abs=1e-4)


def test_mix_at_snr_achieves_requested():
    rng = np.random.default_rng(2)
    for _ in range(200):
        s1, s2 = rng.standard_normal((2, 64))
        snr = rng.uniform(-30, 30)
        mix, scaled, _ = mix_at_snr(s1, s2, snr)
        achieved = 10 * np.log10(np.sum(s1**2) / np.sum(scaled**2))
        assert abs(achieved - snr) < 1e-9
        assert np.array_equal(mix, s1 + scaled)


def test_mix_at_snr_zero_energy():
    with pytest.raises(mixgen.ZeroEnergySource):
        mix_at_snr(np.zeros(4), np.ones(4), 0.0)


def test_distinct_classes(bank):
    batch = make_batch(MixSpec(), bank, 32, 0, 0, 7)
    assert np.all(batch.labels[:, 0] != batch.labels[:, 1])


def test_fixed_pair(bank):
    batch = make_batch(MixSpec(class_pairing=FixedPair(0, 2)), bank, 8, 0, 0, 7)
    assert np.all(batch.labels == np.array([0, 2]))


def test_any_classes_can_repeat(bank):
    batch = make_batch(MixSpec(class_pairing=AnyClasses()), bank, 64, 0, 0, 7)
    assert np.any(batch.labels[:, 0] == batch.labels[:, 1])


def test_batch_deterministic_and_coordinate_dependent(bank):
    spec = MixSpec(segment_len=512)
    a = make_batch(spec, bank, 4, 2, 3, 11)
    b = make_batch(spec, bank, 4, 2, 3, 11)
    c = make_batch(spec, bank, 4, 2, 4, 11)
    assert np.array_equal(a.mixtures, b.mixtures) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.mixtures, c.mixtures)
    # examples do not depend on the batch size they were generated with
    d = make_batch(spec, bank, 2, 2, 3, 11)
    assert np.array_equal(a.mixtures[:2], d.mixtures)


def test_mixture_consistency(bank):
    batch = make_batch(MixSpec(n_slots=3, class_pairing=DistinctClasses()), bank, 16, 0, 0, 3)
    resid = batch.mixtures - (batch.sources * batch.active[..., None]).sum(1)
    assert np.max(np.abs(resid)) <= 1e-12


def test_snr_histogram_is_uniform(bank):
    spec = MixSpec(segment_len=16)
    snrs = np.concatenate([make_batch(spec, bank, 500, 0, b, 123).snr_db for b in range(20)])
    counts, _ = np.histogram(snrs, bins=12, range=(-30, 30))
    assert stats.chisquare(counts).pvalue > 0.01
    # the stored sources realize the drawn SNR
    batch = make_batch(spec, bank, 50, 0, 0, 123)
    e = (batch.sources**2).sum(-1)
    np.testing.assert_allclose(10 * np.log10(e[:, 0] / e[:, 1]), batch.snr_db, atol=1e-9)


def test_distinct_needs_enough_classes():
    small = mixgen.ClassBank([mixgen.SourceClass(0, "t", mixgen.Tonal())])
    with pytest.raises(mixgen.MixgenError):
        make_batch(MixSpec(), small, 2, 0, 0, 0)


def test_wav_pool(tmp_path):
    with pytest.raises(mixgen.EmptyWavPool):
        mixgen.load_wav_pool(tmp_path)
    rng = np.random.default_rng(0)
    pcm = rng.integers(-20000, 20000, 3000)
    _write_wav(tmp_path / "a.wav", pcm)
    cls = mixgen.load_wav_pool(tmp_path, class_id=4)
    samples, rate = mixgen.read_wav(tmp_path / "a.wav", 8000)
    assert rate == 8000
    np.testing.assert_array_equal(samples, pcm / 32768.0)
    assert samples.min() >= -1 and samples.max() < 1
    seg = generate_source(cls, 1000, np.random.default_rng(1))
    assert len(seg) == 1000 and abs(np.sqrt(np.mean(seg**2)) - 1) < 1e-9


def test_wav_pool_rejects_stereo_and_rate(tmp_path):
    stereo = tmp_path / "stereo"
    stereo.mkdir()
    _write_wav(stereo / "s.wav", np.zeros(200), channels=2)
    with pytest.raises(mixgen.MalformedWav):
        mixgen.load_wav_pool(stereo)
    rate = tmp_path / "rate"
    rate.mkdir()
    _write_wav(rate / "r.wav", np.zeros(100), rate=16000)
    with pytest.raises(mixgen.SampleRateMismatch):
        mixgen.load_wav_pool(rate)


def test_mixspec_validation():
    with pytest.raises(mixgen.MixgenError):
        MixSpec(snr_range=(5.0, -5.0))
