"""
Speech and noise clip sources.

A corpus directory follows the LibriSpeech convention of one subdirectory
per speaker holding that speaker's utterances as 16 kHz WAV files; point
source noise clips live in `_noise/` (or a separate noise directory).
make_synthetic_corpus() writes such a directory from scratch so the whole
pipeline runs without downloading speech data.
"""
import os
from dataclasses import dataclass, field

import numpy as np
import soundfile as sf
from scipy.signal import lfilter, resample_poly

from stft_frontend import SAMPLE_RATE

NOISE_DIR = "_noise"
AUDIO_EXTENSIONS = (".wav", ".flac")


class DatasetError(ValueError):
    """Raised for unusable corpora, manifests or speaker splits"""


@dataclass(frozen=True)
class Clip:
    path: str
    duration: float
    speaker: str = ""


@dataclass
class ClipPool:
    speech: dict = field(default_factory=dict)
    noise: list = field(default_factory=list)

    def subset(self, speakers):
        return ClipPool({s: self.speech[s] for s in speakers if s in self.speech}, self.noise)

    @property
    def speakers(self):
        return sorted(self.speech)

    def __len__(self):
        return sum(len(clips) for clips in self.speech.values())


def _audio_files(directory):
    return sorted(
        os.path.join(directory, name)
        for name in os.listdir(directory)
        if name.lower().endswith(AUDIO_EXTENSIONS)
    )


def scan_corpus(corpus_dir, noise_dir="", min_duration=3.0, max_duration=16.0):
    """Index speaker subdirectories; utterances outside the duration range are skipped"""
    if not os.path.isdir(corpus_dir):
        raise DatasetError(f"corpus directory not found: {corpus_dir}")
    pool = ClipPool()
    for speaker in sorted(os.listdir(corpus_dir)):
        speaker_dir = os.path.join(corpus_dir, speaker)
        if speaker == NOISE_DIR or not os.path.isdir(speaker_dir):
            continue
        clips = []
        for path in _audio_files(speaker_dir):
            duration = sf.info(path).duration
            if min_duration <= duration <= max_duration:
                clips.append(Clip(path, duration, speaker))
        if clips:
            pool.speech[speaker] = clips
    noise_dir = noise_dir or os.path.join(corpus_dir, NOISE_DIR)
    if os.path.isdir(noise_dir):
        pool.noise = [Clip(path, sf.info(path).duration) for path in _audio_files(noise_dir)]
    if not pool.speech:
        raise DatasetError(f"no usable utterances ({min_duration}-{max_duration} s) under {corpus_dir}")
    return pool


def load_clip(path, sample_rate=SAMPLE_RATE):
    """Mono float64 waveform at sample_rate; other rates are resampled"""
    data, rate = sf.read(path, dtype="float64", always_2d=True)
    wave = data[:, 0]
    if rate != sample_rate:
        divisor = np.gcd(rate, sample_rate)
        wave = resample_poly(wave, sample_rate // divisor, rate // divisor)
    return wave


def synthetic_noise(color, seed, num_samples):
    """Unit-RMS white, pink or brown noise"""
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(num_samples)
    if color == "white":
        noise = white
    elif color == "pink":
        spectrum = np.fft.rfft(white)
        freqs = np.arange(spectrum.shape[0], dtype=np.float64)
        freqs[0] = 1.0
        noise = np.fft.irfft(spectrum / np.sqrt(freqs), n=num_samples)
    elif color == "brown":
        noise = lfilter([1.0], [1.0, -0.995], white)
    else:
        raise DatasetError(f"unknown noise color '{color}'")
    noise = noise - noise.mean()
    rms = np.sqrt(np.mean(noise * noise))
    return noise / rms if rms > 0 else noise


def resolve_noise(reference, num_samples, sample_rate=SAMPLE_RATE):
    """Noise waveform for a clip path or a synthetic:<color>:<seed> reference"""
    if reference.startswith("synthetic:"):
        try:
            _, color, seed = reference.split(":")
            seed = int(seed)
        except ValueError:
            raise DatasetError(f"malformed synthetic noise reference '{reference}'") from None
        return synthetic_noise(color, seed, num_samples)
    wave = load_clip(reference, sample_rate)
    if wave.shape[0] < num_samples:
        wave = np.tile(wave, -(-num_samples // wave.shape[0]))
    return wave[:num_samples]


def _formant_filter(wave, centre, bandwidth, sample_rate):
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2.0 * np.pi * centre / sample_rate
    return lfilter([1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r], wave)


def synthetic_utterance(rng, pitch, tilt, duration, sample_rate=SAMPLE_RATE):
    """
    Voiced syllables separated by pauses.

    Each syllable is a glottal-like harmonic series around the speaker's
    pitch shaped by two random formants and a raised-cosine envelope.
    """
    total = int(round(duration * sample_rate))
    wave = np.zeros(total)
    cursor = int(rng.uniform(0.05, 0.2) * sample_rate)
    while cursor < total:
        length = int(rng.uniform(0.15, 0.4) * sample_rate)
        stop = min(cursor + length, total)
        n = np.arange(stop - cursor)
        f0 = pitch * (1.0 + 0.05 * np.sin(2.0 * np.pi * rng.uniform(1.0, 4.0) * n / sample_rate))
        phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
        harmonics = np.arange(1, int(4000 // pitch) + 1)
        source = np.sum(np.sin(np.outer(phase, harmonics)) * harmonics ** (-tilt), axis=1)
        voiced = _formant_filter(source, rng.uniform(300, 900), 120.0, sample_rate)
        voiced = voiced + _formant_filter(source, rng.uniform(1000, 2600), 200.0, sample_rate)
        envelope = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / max(n.shape[0] - 1, 1))
        wave[cursor:stop] = voiced * envelope * rng.uniform(0.5, 1.0)
        cursor = stop + int(rng.uniform(0.05, 0.3) * sample_rate)
    peak = np.max(np.abs(wave))
    return 0.5 * wave / peak if peak > 0 else wave


def make_synthetic_corpus(out_dir, speakers=12, utterances=4, seed=0, min_duration=3.0, max_duration=6.0):
    """Write <speaker>/<utterance>.wav files and a _noise/ directory; returns the ClipPool"""
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    for s in range(speakers):
        speaker = f"spk{s:03d}"
        speaker_dir = os.path.join(out_dir, speaker)
        os.makedirs(speaker_dir, exist_ok=True)
        pitch = rng.uniform(90.0, 250.0)
        tilt = rng.uniform(0.6, 1.4)
        for u in range(utterances):
            duration = round(float(rng.uniform(min_duration, max_duration)), 2)
            wave = synthetic_utterance(rng, pitch, tilt, duration)
            sf.write(os.path.join(speaker_dir, f"{speaker}-{u:04d}.wav"), wave.astype(np.float32), SAMPLE_RATE, subtype="FLOAT")
    noise_dir = os.path.join(out_dir, NOISE_DIR)
    os.makedirs(noise_dir, exist_ok=True)
    for color in ("white", "pink", "brown"):
        noise = 0.1 * synthetic_noise(color, int(rng.integers(2**31)), int(max_duration * SAMPLE_RATE))
        sf.write(os.path.join(noise_dir, f"{color}.wav"), noise.astype(np.float32), SAMPLE_RATE, subtype="FLOAT")
    return scan_corpus(out_dir, min_duration=min_duration, max_duration=max_duration)


def split_speakers(speakers, dev_fraction=0.1, test_fraction=0.2, seed=0, minimum=2):
    """Disjoint train/dev/test speaker lists with at least `minimum` speakers each"""
    speakers = sorted(speakers)
    if len(speakers) < 3 * minimum:
        raise DatasetError(f"need at least {3 * minimum} speakers for disjoint splits, got {len(speakers)}")
    order = np.random.default_rng(seed).permutation(len(speakers))
    shuffled = [speakers[i] for i in order]
    n_test = max(minimum, int(round(test_fraction * len(speakers))))
    n_dev = max(minimum, int(round(dev_fraction * len(speakers))))
    if len(speakers) - n_test - n_dev < minimum:
        n_test, n_dev = minimum, minimum
    return {
        "test": sorted(shuffled[:n_test]),
        "dev": sorted(shuffled[n_test:n_test + n_dev]),
        "train": sorted(shuffled[n_test + n_dev:]),
    }
