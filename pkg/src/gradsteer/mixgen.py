"""Synthetic sound classes and on-the-fly mixture generation.

Every example draws from its own RNG stream keyed by
``(seed, split, epoch, batch_index, example_index)``, so a batch is a pure
function of its coordinates and examples can be generated in any order.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

SPLITS = {"train": 0, "val": 1, "test": 2}


class MixgenError(ValueError):
    pass


class EmptyWavPool(MixgenError):
    pass


class SampleRateMismatch(MixgenError):
    pass


class MalformedWav(MixgenError):
    pass


class ZeroEnergySource(MixgenError):
    pass


# --- generators -------------------------------------------------------------


@dataclass(frozen=True)
class Tonal:
    """Harmonic complex with a random fundamental and random harmonic amplitudes."""

    n_harmonics: int = 5
    f0_range: tuple[float, float] = (120.0, 300.0)
    vibrato: float = 0.02

    def max_frequency(self) -> float:
        return self.n_harmonics * self.f0_range[1] * (1 + self.vibrato)

    def render(self, length: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
        t = np.arange(length) / sample_rate
        f0 = rng.uniform(*self.f0_range)
        rate = rng.uniform(2.0, 6.0)
        inst = f0 * (1 + self.vibrato * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
        phase = 2 * np.pi * np.cumsum(inst) / sample_rate
        amps = rng.uniform(0.2, 1.0, self.n_harmonics) / np.arange(1, self.n_harmonics + 1)
        offsets = rng.uniform(0, 2 * np.pi, self.n_harmonics)
        h = np.arange(1, self.n_harmonics + 1)[:, None]
        return (amps[:, None] * np.sin(h * phase[None, :] + offsets[:, None])).sum(0)


@dataclass(frozen=True)
class NoiseBand:
    """White noise restricted to ``[low, high]`` Hz by zeroing FFT bins."""

    low: float = 1500.0
    high: float = 3000.0

    def max_frequency(self) -> float:
        return self.high

    def render(self, length: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
        spec = np.fft.rfft(rng.standard_normal(length))
        freqs = np.fft.rfftfreq(length, 1.0 / sample_rate)
        spec[(freqs < self.low) | (freqs > self.high)] = 0.0
        return np.fft.irfft(spec, n=length)


@dataclass(frozen=True)
class Chirp:
    """Linear frequency sweep between endpoints drawn from ``f0_range``/``f1_range``."""

    f0_range: tuple[float, float] = (300.0, 1200.0)
    f1_range: tuple[float, float] = (300.0, 1200.0)

    def max_frequency(self) -> float:
        return max(self.f0_range[1], self.f1_range[1])

    def render(self, length: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
        f0, f1 = rng.uniform(*self.f0_range), rng.uniform(*self.f1_range)
        t = np.arange(length) / sample_rate
        duration = length / sample_rate
        phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / duration)
        return np.sin(phase + rng.uniform(0, 2 * np.pi))


@dataclass(frozen=True)
class AmMod:
    """Sinusoidal carrier with sinusoidal amplitude modulation."""

    carrier_range: tuple[float, float] = (2000.0, 3500.0)
    mod_rate_range: tuple[float, float] = (4.0, 30.0)
    depth: float = 0.9

    def max_frequency(self) -> float:
        return self.carrier_range[1] + self.mod_rate_range[1]

    def render(self, length: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
        t = np.arange(length) / sample_rate
        fc, fm = rng.uniform(*self.carrier_range), rng.uniform(*self.mod_rate_range)
        env = 1.0 + self.depth * np.sin(2 * np.pi * fm * t + rng.uniform(0, 2 * np.pi))
        return env * np.sin(2 * np.pi * fc * t + rng.uniform(0, 2 * np.pi))


@dataclass(frozen=True)
class WavPool:
    """Segments drawn from a directory of mono 16-bit PCM WAV files."""

    directory: str
    files: tuple[str, ...] = ()
    sample_rate: int = 8000

    def max_frequency(self) -> float:
        return 0.0

    def render(self, length: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
        if not self.files:
            raise EmptyWavPool(f"no WAV files in {self.directory}")
        if sample_rate != self.sample_rate:
            raise SampleRateMismatch(f"pool indexed at {self.sample_rate} Hz, requested {sample_rate} Hz")
        path = self.files[rng.integers(len(self.files))]
        samples, _ = read_wav(path, sample_rate)
        if len(samples) < length:
            samples = np.pad(samples, (0, length - len(samples)))
        return samples


Generator = Union[Tonal, NoiseBand, Chirp, AmMod, WavPool]


@dataclass(frozen=True)
class SourceClass:
    id: int
    name: str
    generator: Generator


class ClassBank(tuple):
    """Immutable collection of :class:`SourceClass` with unique ids."""

    def __new__(cls, classes: Sequence[SourceClass], sample_rate: int = 8000):
        classes = tuple(classes)
        ids = [c.id for c in classes]
        if len(set(ids)) != len(ids):
            raise MixgenError(f"duplicate class ids: {ids}")
        for c in classes:
            if c.generator.max_frequency() >= sample_rate / 2:
                raise MixgenError(f"class {c.name!r} exceeds Nyquist at {sample_rate} Hz")
        return super().__new__(cls, classes)

    def by_id(self, class_id: int) -> SourceClass:
        for c in self:
            if c.id == class_id:
                return c
        raise KeyError(class_id)

    @property
    def ids(self) -> list[int]:
        return [c.id for c in self]


def default_bank(sample_rate: int = 8000) -> ClassBank:
    return ClassBank(
        [
            SourceClass(0, "tonal", Tonal()),
            SourceClass(1, "noiseband", NoiseBand()),
            SourceClass(2, "chirp", Chirp()),
            SourceClass(3, "ammod", AmMod()),
        ],
        sample_rate,
    )


# --- sources and mixing ---------------------------------------------------


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def crop(x: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random window of ``length`` samples."""
    if len(x) < length:
        raise MixgenError(f"cannot crop {length} samples from {len(x)}")
    start = int(rng.integers(len(x) - length + 1))
    return x[start : start + length]


def generate_source(
    source_class: SourceClass,
    length: int,
    rng: np.random.Generator,
    sample_rate: int = 8000,
    crop_factor: float = 2.0,
) -> np.ndarray:
    """Render a clip of ``crop_factor * length`` samples, crop it, normalize to unit RMS."""
    if length <= 0:
        raise MixgenError("length must be positive")
    clip = source_class.generator.render(int(np.ceil(length * crop_factor)), sample_rate, rng)
    seg = crop(np.asarray(clip, dtype=np.float64), length, rng)
    rms = _rms(seg)
    if rms < 1e-8:
        raise ZeroEnergySource(f"class {source_class.name!r} produced a silent segment")
    return seg / rms


def mix_at_snr(s1, s2, snr_db: float) -> tuple[np.ndarray, np.ndarray, float]:
    """Scale ``s2`` so that ``s1`` sits ``snr_db`` above it; return (mixture, g*s2, g)."""
    s1, s2 = np.asarray(s1, dtype=np.float64), np.asarray(s2, dtype=np.float64)
    if s1.shape != s2.shape:
        raise MixgenError(f"shape mismatch {s1.shape} vs {s2.shape}")
    n1, n2 = np.linalg.norm(s1), np.linalg.norm(s2)
    if n1 == 0 or n2 == 0:
        raise ZeroEnergySource("cannot mix a zero-energy source")
    g = float(n1 / n2 * 10.0 ** (-snr_db / 20.0))
    scaled = g * s2
    return s1 + scaled, scaled, g


# --- batches ----------------------------------------------------------------


@dataclass(frozen=True)
class DistinctClasses:
    pass


@dataclass(frozen=True)
class FixedPair:
    first: int
    second: int


@dataclass(frozen=True)
class AnyClasses:
    pass


Pairing = Union[DistinctClasses, FixedPair, AnyClasses]


@dataclass(frozen=True)
class MixSpec:
    n_slots: int = 2
    segment_len: int = 2048
    snr_range: tuple[float, float] = (-30.0, 30.0)
    class_pairing: Pairing = field(default_factory=DistinctClasses)
    sample_rate: int = 8000

    def __post_init__(self):
        lo, hi = self.snr_range
        if lo > hi:
            raise MixgenError(f"snr_range lower bound {lo} exceeds upper {hi}")
        if self.segment_len <= 0 or self.n_slots < 1:
            raise MixgenError("segment_len and n_slots must be positive")
        if isinstance(self.class_pairing, FixedPair) and self.n_slots != 2:
            raise MixgenError("FixedPair pairing requires n_slots == 2")


@dataclass
class WaveformBatch:
    """``mixtures`` [B, T]; ``sources`` [B, N, T]; ``active``/``labels`` [B, N]; ``snr_db`` [B]."""

    mixtures: np.ndarray
    sources: np.ndarray
    active: np.ndarray
    labels: np.ndarray
    snr_db: np.ndarray

    def __len__(self) -> int:
        return self.mixtures.shape[0]

    def subset(self, index) -> "WaveformBatch":
        return WaveformBatch(
            self.mixtures[index], self.sources[index], self.active[index], self.labels[index], self.snr_db[index]
        )

    @staticmethod
    def concatenate(batches: Sequence["WaveformBatch"]) -> "WaveformBatch":
        return WaveformBatch(*(np.concatenate([getattr(b, f) for b in batches]) for f in
                               ("mixtures", "sources", "active", "labels", "snr_db")))


def example_rng(seed: int, split: str, epoch: int, batch_index: int, example_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS[split], epoch, batch_index, example_index])


def _pick_classes(spec: MixSpec, bank: ClassBank, rng: np.random.Generator) -> list[int]:
    pairing = spec.class_pairing
    ids = bank.ids
    if isinstance(pairing, FixedPair):
        return [pairing.first, pairing.second]
    if isinstance(pairing, DistinctClasses):
        if len(ids) < spec.n_slots:
            raise MixgenError(f"DistinctClasses needs {spec.n_slots} classes, bank has {len(ids)}")
        return [ids[i] for i in rng.choice(len(ids), spec.n_slots, replace=False)]
    return [ids[i] for i in rng.integers(len(ids), size=spec.n_slots)]


def make_example(spec: MixSpec, bank: ClassBank, rng: np.random.Generator):
    classes = _pick_classes(spec, bank, rng)
    raw = [generate_source(bank.by_id(c), spec.segment_len, rng, spec.sample_rate) for c in classes]
    # Slot 0 is the SNR reference; every other slot gets its own draw.
    snrs = rng.uniform(*spec.snr_range, size=max(spec.n_slots - 1, 1))
    sources = [raw[0]] + [mix_at_snr(raw[0], s, snr)[1] for s, snr in zip(raw[1:], snrs)]
    sources = np.stack(sources)
    mixture = sources.sum(0)
    return mixture, sources, np.asarray(classes), float(snrs[0])


def make_batch(
    spec: MixSpec,
    bank: ClassBank,
    batch_size: int,
    epoch: int,
    batch_index: int,
    seed: int,
    split: str = "train",
) -> WaveformBatch:
    """Generate ``batch_size`` mixtures deterministically from their coordinates."""
    examples = [
        make_example(spec, bank, example_rng(seed, split, epoch, batch_index, i)) for i in range(batch_size)
    ]
    mixtures, sources, labels, snrs = zip(*examples)
    sources = np.stack(sources)
    return WaveformBatch(
        mixtures=np.stack(mixtures),
        sources=sources,
        active=np.ones(sources.shape[:2], dtype=bool),
        labels=np.stack(labels).astype(np.int64),
        snr_db=np.asarray(snrs),
    )


def make_eval_set(spec: MixSpec, bank: ClassBank, n_examples: int, seed: int, split: str,
                  chunk: int = 64) -> WaveformBatch:
    """Fixed evaluation mixtures; depends only on ``(spec, bank, seed, split)``."""
    batches = [
        make_batch(spec, bank, min(chunk, n_examples - start), 0, start // chunk, seed, split)
        for start in range(0, n_examples, chunk)
    ]
    return WaveformBatch.concatenate(batches)


# --- WAV ingestion ----------------------------------------------------------


def read_wav(path, sample_rate: int) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM WAV file and scale samples to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, frames = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            if channels != 1:
                raise MalformedWav(f"{path}: expected mono, found {channels} channels")
            if width != 2:
                raise MalformedWav(f"{path}: expected 16-bit PCM, found {8 * width}-bit")
            if rate != sample_rate:
                raise SampleRateMismatch(f"{path}: {rate} Hz, expected {sample_rate} Hz")
            data = w.readframes(frames)
    except (wave.Error, EOFError) as err:
        raise MalformedWav(f"{path}: {err}") from err
    return np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0, rate


def load_wav_pool(directory, sample_rate: int = 8000, class_id: int = 0, name: str | None = None) -> SourceClass:
    """Index and validate every ``*.wav`` file in ``directory``."""
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(directory)
    files = sorted(str(p) for p in root.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise EmptyWavPool(f"no WAV files in {directory}")
    for f in files:
        read_wav(f, sample_rate)
    return SourceClass(class_id, name or root.name, WavPool(str(root), tuple(files), sample_rate))
