"""
Classical DOA references: GCC-PHAT pair delays and SRP-PHAT over the source ring.

These localize the dominant source, whichever speaker that is; they serve as
geometry checks for the simulator and as comparison rows in evaluation.
"""
from dataclasses import dataclass
from itertools import combinations
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stft_frontend import HOP_LENGTH, SAMPLE_RATE, SILENCE_CLASS, WIN_LENGTH, frame_count, vad_labels

SRP_FRAME = 512
MIN_GCC_FRAME = 256


class GccEstimate(NamedTuple):
    delay: float
    peak: float


def gcc_phat(x_i, x_j, max_delay=None):
    """
    Delay of x_j relative to x_i in samples (x_j[n] ~ x_i[n - delay]).

    The PHAT-weighted cross spectrum is inverted on a 2N grid and the
    integer peak refined by parabolic interpolation. peak is the height of
    the normalised correlation (1.0 for identical frames).
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape or x_i.ndim != 1:
        raise ValueError(f"gcc_phat needs two equal 1-D frames, got {x_i.shape} and {x_j.shape}")
    if x_i.shape[0] < MIN_GCC_FRAME:
        raise ValueError(f"gcc_phat frames must have at least {MIN_GCC_FRAME} samples, got {x_i.shape[0]}")
    if not np.any(x_i) or not np.any(x_j):
        raise ValueError("gcc_phat frame is all zeros")
    n = 2 * x_i.shape[0]
    cross = np.fft.rfft(x_j, n=n) * np.conj(np.fft.rfft(x_i, n=n))
    mag = np.abs(cross)
    weighted = np.where(mag > 1e-12, cross / np.maximum(mag, 1e-12), 0.0)
    cc = np.fft.irfft(weighted, n=n)
    max_shift = x_i.shape[0] - 1 if max_delay is None else min(int(max_delay), x_i.shape[0] - 1)
    lags = np.concatenate([cc[-max_shift:], cc[:max_shift + 1]]) if max_shift else cc[:1]
    k = int(np.argmax(lags))
    offset = 0.0
    if 0 < k < lags.shape[0] - 1:
        left, centre, right = lags[k - 1], lags[k], lags[k + 1]
        denom = left - 2.0 * centre + right
        if denom < 0:
            offset = 0.5 * (left - right) / denom
    return GccEstimate(delay=k - max_shift + offset, peak=float(lags[k]))


@dataclass(frozen=True, eq=False)
class SteeringGrid:
    """Expected pair TDOAs (seconds) for every candidate direction"""

    angles_deg: np.ndarray
    pairs: tuple
    tdoa: np.ndarray  # [directions, pairs]

    @classmethod
    def build(cls, array, catalog, speed_of_sound=343.0):
        pairs = tuple(combinations(range(array.count), 2))
        dist = np.linalg.norm(catalog.positions[:, None, :] - array.mic_positions[None, :, :], axis=-1)
        tdoa = np.stack([(dist[:, i] - dist[:, j]) / speed_of_sound for i, j in pairs], axis=1)
        return cls(np.asarray(catalog.angles_deg), pairs, tdoa)


def srp_power(frame, grid, sample_rate=SAMPLE_RATE):
    """Steered PHAT power [directions] of a Hann-windowed [M, L] frame"""
    frame = np.asarray(frame, dtype=np.float64)
    spectra = np.fft.rfft(frame * np.hanning(frame.shape[-1]), axis=-1)
    freqs = np.fft.rfftfreq(frame.shape[-1], d=1.0 / sample_rate)
    power = np.zeros(grid.tdoa.shape[0])
    for p, (i, j) in enumerate(grid.pairs):
        cross = spectra[i] * np.conj(spectra[j])
        mag = np.abs(cross)
        weighted = np.where(mag > 1e-12, cross / np.maximum(mag, 1e-12), 0.0)
        steer = np.exp(2j * np.pi * freqs[None, :] * grid.tdoa[:, p][:, None])
        power += np.real(steer @ weighted)
    return power


def srp_phat(frame, grid, sample_rate=SAMPLE_RATE):
    """Direction class with the largest steered power; silent frames give 36"""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2 or frame.shape[0] * (frame.shape[0] - 1) // 2 != len(grid.pairs):
        raise ValueError(f"frame shape {frame.shape} does not fit a {len(grid.pairs)}-pair grid")
    if not np.any(frame):
        return SILENCE_CLASS
    return int(np.argmax(srp_power(frame, grid, sample_rate)))


def srp_phat_track(mixture, grid, vad=None, sample_rate=SAMPLE_RATE):
    """
    Per-label-frame classes for a [M, N] mixture.

    512-sample frames are centred on the STFT frame centres; frames that the
    VAD (on mixture channel 0 unless given) marks silent get class 36.
    """
    mixture = np.asarray(mixture, dtype=np.float64)
    num_frames = frame_count(mixture.shape[1])
    if vad is None:
        vad = vad_labels(mixture[0])
    vad = np.asarray(vad, dtype=bool)[:num_frames]
    lead = SRP_FRAME // 2 - WIN_LENGTH // 2
    padded = np.pad(mixture, ((0, 0), (lead, SRP_FRAME)))
    windows = sliding_window_view(padded, SRP_FRAME, axis=1)[:, ::HOP_LENGTH][:, :num_frames]
    classes = np.full(num_frames, SILENCE_CLASS, dtype=np.int64)
    for t in np.flatnonzero(vad):
        classes[t] = srp_phat(windows[:, t], grid, sample_rate)
    return classes
