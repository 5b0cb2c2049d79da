"""
STFT analysis/synthesis, network feature stacking, VAD and per-frame DOA labels.

Frame grid: 20 ms periodic Hann window (320 samples at 16 kHz), 10 ms hop,
320-point DFT giving 161 one-sided bins. Frame t covers samples
[160 t, 160 t + 320); clip edges are not padded.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

SAMPLE_RATE = 16000
WIN_LENGTH = 320
HOP_LENGTH = 160
N_FFT = 320
N_BINS = N_FFT // 2 + 1
SILENCE_CLASS = 36
N_DIRECTIONS = 36
DEGREES_PER_CLASS = 10
VAD_THRESHOLD_DB = -40.0

WINDOW = get_window("hann", WIN_LENGTH, fftbins=True)


def frame_count(num_samples):
    if num_samples < WIN_LENGTH:
        return 0
    return (num_samples - WIN_LENGTH) // HOP_LENGTH + 1


def _frames(wave):
    wave = np.asarray(wave)
    if wave.ndim != 1:
        raise ValueError(f"expected a single-channel waveform, got shape {wave.shape}")
    if wave.shape[0] < WIN_LENGTH:
        raise ValueError(f"waveform of {wave.shape[0]} samples is shorter than one {WIN_LENGTH}-sample window")
    return sliding_window_view(wave, WIN_LENGTH)[::HOP_LENGTH]


def stft(wave, sample_rate=SAMPLE_RATE):
    """Complex spectrogram [T, 161] of a single-channel waveform"""
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"sample rate must be {SAMPLE_RATE} Hz, got {sample_rate}")
    return np.fft.rfft(_frames(wave) * WINDOW, n=N_FFT, axis=-1)


def stft_multichannel(waves, sample_rate=SAMPLE_RATE):
    """Complex spectrogram [C, T, 161] of a [C, N] waveform"""
    return np.stack([stft(channel, sample_rate) for channel in np.atleast_2d(waves)])


def istft(spec):
    """
    Weighted overlap-add inverse of stft().

    Frames are synthesised with the same Hann window and normalised by the
    summed squared window, so interior samples are reconstructed exactly. The
    output has (T - 1) * 160 + 320 samples; samples where no window is
    nonzero (the very first sample) come back as zero.
    """
    spec = np.asarray(spec)
    n_frames = spec.shape[0]
    if n_frames == 0:
        return np.zeros(0)
    frames = np.fft.irfft(spec, n=N_FFT, axis=-1)[:, :WIN_LENGTH] * WINDOW
    length = (n_frames - 1) * HOP_LENGTH + WIN_LENGTH
    out = np.zeros(length)
    norm = np.zeros(length)
    for t in range(n_frames):
        start = t * HOP_LENGTH
        out[start:start + WIN_LENGTH] += frames[t]
        norm[start:start + WIN_LENGTH] += WINDOW * WINDOW
    nonzero = norm > 1e-10
    out[nonzero] /= norm[nonzero]
    out[~nonzero] = 0.0
    return out


def stack_features(specs):
    """
    Interleave per-mic real and imaginary parts into network channels.

    specs is a [C, T, F] complex array (or a list of [T, F] arrays); the
    result is a real [2C, T, F] array ordered Re(M1), Im(M1), ..., Re(MC), Im(MC).
    """
    if isinstance(specs, (list, tuple)):
        shapes = {np.shape(s) for s in specs}
        if len(shapes) != 1:
            raise ValueError(f"per-mic spectrograms disagree in shape: {sorted(shapes)}")
        specs = np.stack(specs)
    specs = np.asarray(specs)
    if specs.ndim != 3:
        raise ValueError(f"expected [C, T, F] spectrograms, got shape {specs.shape}")
    stacked = np.empty((2 * specs.shape[0],) + specs.shape[1:], dtype=specs.real.dtype)
    stacked[0::2] = specs.real
    stacked[1::2] = specs.imag
    return stacked


def unstack_features(stacked):
    """Inverse of stack_features along the channel axis (axis -3)"""
    stacked = np.asarray(stacked)
    if stacked.shape[-3] % 2:
        raise ValueError(f"feature stack needs an even channel count, got {stacked.shape[-3]}")
    return stacked[..., 0::2, :, :] + 1j * stacked[..., 1::2, :, :]


def magnitude(spec):
    return np.abs(spec)


def stack_magnitudes(stacked):
    """Per-mic magnitudes [..., C, T, F] from a real/imag stack [..., 2C, T, F]"""
    return np.abs(unstack_features(stacked))


def frame_rms(wave):
    frames = _frames(wave)
    return np.sqrt(np.mean(frames * frames, axis=-1))


def vad_labels(clean_target, threshold_db=VAD_THRESHOLD_DB):
    """A frame is voiced when its RMS exceeds the clip's loudest frame RMS by threshold_db"""
    rms = frame_rms(clean_target)
    peak = rms.max(initial=0.0)
    if peak <= 0.0:
        return np.zeros(rms.shape[0], dtype=bool)
    return rms > peak * 10.0 ** (threshold_db / 20.0)


def switch_frame(switch_time, sample_rate=SAMPLE_RATE):
    """First frame whose start sample lies at or after the switch time"""
    switch_sample = int(round(switch_time * sample_rate))
    return -(-switch_sample // HOP_LENGTH)


def doa_frame_labels(vad, scene, num_frames=None):
    """
    Per-frame classes: silence -> 36; voiced frames before the switch take
    the initial position's class, voiced frames from the switch on take the
    second position's class.
    """
    vad = np.asarray(vad, dtype=bool)
    num_frames = vad.shape[0] if num_frames is None else num_frames
    if vad.shape[0] != num_frames:
        raise ValueError(f"VAD has {vad.shape[0]} frames but {num_frames} were requested")
    labels = np.full(num_frames, scene.target_initial_idx, dtype=np.int64)
    labels[switch_frame(scene.switch_time):] = scene.target_second_idx
    labels[~vad] = SILENCE_CLASS
    return labels


def class_to_angle(cls):
    """Azimuth in degrees, or None for the silence class"""
    return None if int(cls) == SILENCE_CLASS else int(cls) * DEGREES_PER_CLASS


def write_labels(path, labels):
    with open(path, "w") as handle:
        handle.writelines(f"{int(c)}\n" for c in labels)


def read_labels(path):
    with open(path) as handle:
        return np.array([int(line) for line in handle if line.strip()], dtype=np.int64)
