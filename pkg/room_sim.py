"""
Shoebox room acoustics and scene rendering.

Image-method RIRs with a uniform wall reflection coefficient (Sabine, then
calibrated against the Schroeder decay estimate), random scene sampling over
a 36-position source ring around a 6-mic circular array,
a moving target rendered by crossfading between two static positions, and
SIR/SNR mixing measured on the reference microphone.
"""
import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np
from scipy.signal import fftconvolve

from config import SceneConfig
from stft_frontend import HOP_LENGTH, SAMPLE_RATE, WIN_LENGTH, vad_labels

SPEED_OF_SOUND = 343.0
NOISE_COLORS = ("white", "pink", "brown")
SCHROEDER_FIT_DB = (-5.0, -35.0)
CALIBRATION_MAX_T60 = 2.0
CALIBRATION_STEPS = 16


class RoomGeometryError(ValueError):
    """Raised for impossible rooms, sources outside the room or degenerate scenes"""


@dataclass(frozen=True)
class RoomSpec:
    dims: tuple = (5.0, 6.0, 3.0)
    t60: float = 0.5
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise RoomGeometryError(f"room dimensions must be three positive lengths, got {self.dims}")
        if self.t60 <= 0:
            raise RoomGeometryError(f"t60 must be positive, got {self.t60}")

    @property
    def volume(self):
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def surface(self):
        lx, ly, lz = self.dims
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    def contains(self, point):
        return all(0.0 < p < d for p, d in zip(point, self.dims))


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    center: tuple
    radius: float
    mic_positions: np.ndarray

    @classmethod
    def circular(cls, center=(2.5, 3.0, 1.5), radius=0.05, count=6):
        """count mics evenly spaced on a horizontal circle, mic 1 on the +x axis"""
        angles = np.deg2rad(np.arange(count) * 360.0 / count)
        positions = np.stack(
            [center[0] + radius * np.cos(angles), center[1] + radius * np.sin(angles), np.full(count, center[2])],
            axis=1,
        )
        return cls(tuple(center), float(radius), positions)

    @property
    def count(self):
        return self.mic_positions.shape[0]


@dataclass(frozen=True, eq=False)
class SourceCatalog:
    """Candidate source positions; class k sits at azimuth 10 k degrees"""

    positions: np.ndarray
    angles_deg: np.ndarray

    @classmethod
    def ring(cls, center=(2.5, 3.0, 1.5), distance=1.5, count=36):
        angles = np.arange(count) * 360.0 / count
        rad = np.deg2rad(angles)
        positions = np.stack(
            [center[0] + distance * np.cos(rad), center[1] + distance * np.sin(rad), np.full(count, center[2])],
            axis=1,
        )
        return cls(positions, angles)

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class SceneSpec:
    target_initial_idx: int
    target_second_idx: int
    interferer_idx: int
    anchor_idx: int
    noise_idx: int
    switch_time: float
    sir_db: int
    snr_db: int
    t60: float
    target_clip: str
    interferer_clip: str
    anchor_clip: str
    noise_clip: str
    seed: int
    target_speaker: str = ""
    interferer_speaker: str = ""

    @property
    def moving(self):
        return self.target_second_idx != self.target_initial_idx

    def validate(self, duration=None):
        indices = [self.target_initial_idx, self.interferer_idx, self.anchor_idx, self.noise_idx]
        if self.moving:
            indices.append(self.target_second_idx)
        if len(set(indices)) != len(indices):
            raise RoomGeometryError(f"scene positions are not pairwise distinct: {indices}")
        if any(not 0 <= i < 36 for i in indices + [self.target_second_idx]):
            raise RoomGeometryError(f"scene positions must be catalog indices 0..35: {indices}")
        if self.switch_time <= 0 or (duration is not None and self.switch_time >= duration):
            raise RoomGeometryError(f"switch_time {self.switch_time} s is outside the clip")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in data.items() if key in names})


# ----------------------------------------------------------------------------
# impulse responses
# ----------------------------------------------------------------------------

def t60_to_reflection(room):
    """Uniform wall reflection coefficient (one per wall) from Sabine absorption"""
    alpha = 0.161 * room.volume / (room.surface * room.t60)
    if alpha >= 1.0:
        raise RoomGeometryError(
            f"t60={room.t60} s is too short for a {room.dims} room (Sabine absorption {alpha:.3f} >= 1)"
        )
    beta = float(np.clip(math.sqrt(1.0 - alpha), 1e-6, 1.0 - 1e-12))
    return np.full(6, beta)


def calibrated_reflection(room, sample_rate=SAMPLE_RATE):
    """
    Wall reflection coefficient whose image-method decay matches room.t60.

    Starts from the Sabine coefficient and bisects the per-reflection
    attenuation until the Schroeder estimate of a reference RIR (mic 5 cm off
    the room centre, source 1.5 m away along x) equals the requested t60.
    Rooms with t60 above CALIBRATION_MAX_T60 keep the Sabine value.
    """
    sabine = t60_to_reflection(room)[0]
    if room.t60 > CALIBRATION_MAX_T60:
        return sabine
    return _calibrated_beta(tuple(float(d) for d in room.dims), float(room.t60), float(room.speed_of_sound), int(sample_rate))


@lru_cache(maxsize=64)
def _calibrated_beta(dims, t60, speed_of_sound, sample_rate):
    room = RoomSpec(dims, t60, speed_of_sound)
    centre = np.asarray(dims) / 2.0
    src = centre + np.array([min(1.5, 0.3 * dims[0]), 0.0, 0.0])
    mic = centre + np.array([min(0.05, 0.01 * dims[0]), 0.0, 0.0])
    length = int(math.ceil(1.5 * t60 * sample_rate))
    # measured decay falls as the attenuation g = -ln(beta) grows
    g0 = -math.log(t60_to_reflection(room)[0])
    low, high = math.log(0.5 * g0), math.log(2.0 * g0)
    for _ in range(CALIBRATION_STEPS):
        mid = 0.5 * (low + high)
        rir = _image_rir(room, src, mic, length, -1, sample_rate, math.exp(-math.exp(mid)))
        if _decay_or_inf(rir, sample_rate) > t60:
            low = mid
        else:
            high = mid
    return float(np.clip(math.exp(-math.exp(0.5 * (low + high))), 1e-6, 1.0 - 1e-12))


def _decay_or_inf(rir, sample_rate):
    if energy_decay_db(rir)[-1] > SCHROEDER_FIT_DB[1]:
        return math.inf
    return schroeder_t60(rir, sample_rate)


def default_rir_length(room, sample_rate=SAMPLE_RATE):
    return int(math.ceil(room.t60 * sample_rate))


def _axis_images(src, mic, size, count):
    """Per-axis image offsets, wall hit counts and image orders"""
    m = np.arange(-count, count + 1)
    offsets, hits, orders = [], [], []
    for q in (0, 1):
        offsets.append((1 - 2 * q) * src + 2.0 * m * size - mic)
        hits.append(np.abs(m - q) + np.abs(m))
        orders.append(np.abs(2 * m - q))
    return np.concatenate(offsets), np.concatenate(hits), np.concatenate(orders)


def _check_geometry(room, src, mic):
    if not room.contains(src):
        raise RoomGeometryError(f"source {tuple(src)} is not strictly inside room {room.dims}")
    if not room.contains(mic):
        raise RoomGeometryError(f"microphone {tuple(mic)} is not strictly inside room {room.dims}")
    if np.linalg.norm(np.asarray(src) - np.asarray(mic)) < 0.01:
        raise RoomGeometryError("source and microphone are closer than 1 cm")


def image_method_rir(room, src, mic, length=None, max_order=-1, sample_rate=SAMPLE_RATE):
    """
    Impulse response from src to mic.

    Each image contributes beta**hits / (4 pi d) at round(d / c * fs), with
    beta from calibrated_reflection. Images arriving after `length` samples
    are dropped; max_order >= 0 additionally limits the total image order
    (0 keeps only the direct path).
    """
    src = np.asarray(src, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    _check_geometry(room, src, mic)
    length = default_rir_length(room, sample_rate) if length is None else int(length)
    beta = t60_to_reflection(room)[0] if max_order == 0 else calibrated_reflection(room, sample_rate)
    return _image_rir(room, src, mic, length, max_order, sample_rate, beta)


def _image_rir(room, src, mic, length, max_order, sample_rate, beta):
    reach = length / sample_rate * room.speed_of_sound
    counts = [int(math.ceil(reach / (2.0 * size))) + 1 for size in room.dims]
    (dx, hx, ox), (dy, hy, oy), (dz, hz, oz) = (
        _axis_images(src[a], mic[a], room.dims[a], counts[a]) for a in range(3)
    )
    dyz2 = dy[:, None] ** 2 + dz[None, :] ** 2
    hyz = hy[:, None] + hz[None, :]
    oyz = oy[:, None] + oz[None, :]
    scale = sample_rate / room.speed_of_sound
    rir = np.zeros(length)
    for i in range(dx.shape[0]):
        if max_order >= 0 and ox[i] > max_order:
            continue
        dist = np.sqrt(dx[i] ** 2 + dyz2)
        delay = np.rint(dist * scale).astype(np.int64)
        keep = delay < length
        if max_order >= 0:
            keep &= (ox[i] + oyz) <= max_order
        if not keep.any():
            continue
        amp = beta ** (hx[i] + hyz[keep]) / (4.0 * np.pi * dist[keep])
        rir += np.bincount(delay[keep], weights=amp, minlength=length)
    return rir


def image_method_rirs(room, src, mics, length=None, max_order=-1, sample_rate=SAMPLE_RATE):
    """RIRs [M, length] from one source to every microphone"""
    return np.stack([image_method_rir(room, src, mic, length, max_order, sample_rate) for mic in np.atleast_2d(mics)])


def energy_decay_db(rir):
    """Backward-integrated energy curve in dB relative to the total energy"""
    energy = np.asarray(rir, dtype=np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        raise ValueError("impulse response has no energy")
    return 10.0 * np.log10(np.maximum(edc / edc[0], 1e-300))


def schroeder_t60(rir, sample_rate=SAMPLE_RATE, fit_db=SCHROEDER_FIT_DB):
    """
    Decay time from the backward-integrated energy curve.

    A line is fitted to the energy decay curve between the two fit levels and
    extrapolated to -60 dB.
    """
    edc_db = energy_decay_db(rir)
    upper, lower = fit_db
    start = int(np.argmax(edc_db <= upper))
    if edc_db[-1] > lower:
        raise ValueError(f"energy decay curve never reaches {lower} dB; use a longer impulse response")
    stop = int(np.argmax(edc_db <= lower))
    if stop - start < 2:
        raise ValueError("energy decay is too abrupt to fit")
    t = np.arange(edc_db.shape[0]) / sample_rate
    slope, _ = np.polyfit(t[start:stop + 1], edc_db[start:stop + 1], 1)
    if slope >= 0:
        raise ValueError("energy decay curve is not decaying")
    return -60.0 / slope


# ----------------------------------------------------------------------------
# scene sampling
# ----------------------------------------------------------------------------

def sample_scene(rng_seed, catalog, clip_pool, config=None):
    """
    Draw one scene deterministically from rng_seed (an int or a seed sequence
    such as (dataset_seed, scene_index)).

    clip_pool exposes `speech`, a mapping speaker -> clips with `path` and
    `duration`, and `noise`, a list of noise clips (may be empty; a synthetic
    noise reference is drawn instead).
    """
    config = config or SceneConfig()
    rng = np.random.default_rng(rng_seed)
    eligible = sorted(speaker for speaker, clips in clip_pool.speech.items() if len(clips) >= 2)
    if not eligible:
        raise RoomGeometryError("clip pool has no speaker with a second utterance for the anchor")
    target_speaker = eligible[rng.integers(len(eligible))]
    target_clips = clip_pool.speech[target_speaker]
    target_pick, anchor_pick = rng.choice(len(target_clips), size=2, replace=False)
    target_clip = target_clips[target_pick]
    anchor_clip = target_clips[anchor_pick]

    interferer_speaker, interferer_path = "", ""
    if config.interferer:
        others = sorted(speaker for speaker in clip_pool.speech if speaker != target_speaker)
        if not others:
            raise RoomGeometryError("clip pool needs a second speaker for the interferer")
        interferer_speaker = others[rng.integers(len(others))]
        candidates = clip_pool.speech[interferer_speaker]
        interferer_path = candidates[rng.integers(len(candidates))].path

    count = len(catalog)
    directions = list(config.directions) or list(range(count))
    initial = int(directions[rng.integers(len(directions))])
    second = initial
    if config.moving:
        remaining = [d for d in directions if d != initial]
        second = int(remaining[rng.integers(len(remaining))])
    free = [k for k in range(count) if k not in (initial, second)]
    interferer_idx, anchor_idx, noise_idx = (int(k) for k in rng.choice(free, size=3, replace=False))

    t60 = float(config.t60_choices[rng.integers(len(config.t60_choices))])
    sir_db = int(rng.integers(config.sir_range[0], config.sir_range[1] + 1))
    snr_db = int(rng.integers(config.snr_range[0], config.snr_range[1] + 1))
    switch_time = round(float(rng.uniform(0.25, 0.75)) * target_clip.duration, 4)

    if clip_pool.noise:
        noise_clip = clip_pool.noise[rng.integers(len(clip_pool.noise))].path
    else:
        color = NOISE_COLORS[rng.integers(len(NOISE_COLORS))]
        noise_clip = f"synthetic:{color}:{int(rng.integers(2**31))}"

    scene = SceneSpec(
        target_initial_idx=initial,
        target_second_idx=second,
        interferer_idx=interferer_idx,
        anchor_idx=anchor_idx,
        noise_idx=noise_idx,
        switch_time=switch_time,
        sir_db=sir_db,
        snr_db=snr_db,
        t60=t60,
        target_clip=target_clip.path,
        interferer_clip=interferer_path,
        anchor_clip=anchor_clip.path,
        noise_clip=noise_clip,
        seed=int(rng.integers(2**31)),
        target_speaker=target_speaker,
        interferer_speaker=interferer_speaker,
    )
    return scene.validate(target_clip.duration)


# ----------------------------------------------------------------------------
# rendering and mixing
# ----------------------------------------------------------------------------

def convolve_source(clip, rirs):
    """Dry clip [N] through RIRs [M, L], truncated to N samples"""
    clip = np.asarray(clip, dtype=np.float64)
    wet = fftconvolve(clip[None, :], np.atleast_2d(rirs), axes=1)
    return wet[:, :clip.shape[0]]


def crossfade_weights(num_samples, switch_sample, fade_samples):
    """1 before the fade, a linear ramp centred on switch_sample, 0 after"""
    half = fade_samples / 2.0
    n = np.arange(num_samples)
    if fade_samples <= 0:
        return (n < switch_sample).astype(np.float64)
    return np.clip((switch_sample + half - n) / fade_samples, 0.0, 1.0)


def render_source(clip, position, room, array, length=None, max_order=-1, sample_rate=SAMPLE_RATE):
    rirs = image_method_rirs(room, position, array.mic_positions, length, max_order, sample_rate)
    return convolve_source(clip, rirs)


def render_moving_source(
    clip, scene, room, array, catalog, crossfade=0.01, length=None, max_order=-1, sample_rate=SAMPLE_RATE
):
    """
    Target [M, N]: the dry clip is split at the switch time with a linear
    crossfade; the head is rendered from the initial position and the tail
    from the second position.
    """
    clip = np.asarray(clip, dtype=np.float64)
    first = catalog.positions[scene.target_initial_idx]
    if not scene.moving:
        return render_source(clip, first, room, array, length, max_order, sample_rate)
    switch_sample = int(round(scene.switch_time * sample_rate))
    if not 0 < switch_sample < clip.shape[0]:
        raise RoomGeometryError(f"switch_time {scene.switch_time} s is outside a {clip.shape[0]}-sample clip")
    weights = crossfade_weights(clip.shape[0], switch_sample, int(round(crossfade * sample_rate)))
    second = catalog.positions[scene.target_second_idx]
    head = render_source(clip * weights, first, room, array, length, max_order, sample_rate)
    tail = render_source(clip * (1.0 - weights), second, room, array, length, max_order, sample_rate)
    return head + tail


def fit_length(waves, length, channels=None):
    """Zero-pad or truncate [C, N] waves to `length` samples"""
    waves = np.atleast_2d(np.asarray(waves, dtype=np.float64))
    if channels is not None and waves.shape[0] != channels:
        raise RoomGeometryError(f"expected {channels} channels, got {waves.shape[0]}")
    if waves.shape[1] >= length:
        return waves[:, :length]
    return np.pad(waves, ((0, 0), (0, length - waves.shape[1])))


def active_samples(reference):
    """Samples covered by at least one VAD-voiced frame of the reference channel"""
    reference = np.asarray(reference)
    mask = np.zeros(reference.shape[0], dtype=bool)
    if reference.shape[0] < WIN_LENGTH:
        mask[:] = reference != 0
        return mask
    for t in np.flatnonzero(vad_labels(reference)):
        mask[t * HOP_LENGTH:t * HOP_LENGTH + WIN_LENGTH] = True
    return mask


def channel_power(wave, mask):
    segment = np.asarray(wave)[mask]
    return float(np.mean(segment * segment)) if segment.size else 0.0


def measure_ratio_db(reference, other, mask):
    return 10.0 * math.log10(channel_power(reference, mask) / channel_power(other, mask))


def scale_to_ratio(reference, other_mc, ratio_db, mask):
    """Scale other_mc so reference power over other's channel-0 power is ratio_db"""
    p_ref = channel_power(reference, mask)
    p_other = channel_power(other_mc[0], mask)
    if p_other <= 0.0:
        return other_mc
    gain = math.sqrt(p_ref / (p_other * 10.0 ** (ratio_db / 10.0)))
    return other_mc * gain


def mix_components(target_mc, interferer_mc, noise_mc, sir_db, snr_db, mask=None):
    """
    Target plus the interferer scaled to sir_db and the noise scaled to snr_db.

    Powers are measured on channel 0 over the target-active samples; shorter
    inputs are zero-padded to the target length.
    """
    target_mc = np.atleast_2d(np.asarray(target_mc, dtype=np.float64))
    channels, length = target_mc.shape
    interferer_mc = fit_length(interferer_mc, length, channels)
    noise_mc = fit_length(noise_mc, length, channels)
    mask = active_samples(target_mc[0]) if mask is None else mask
    if channel_power(target_mc[0], mask) <= 0.0:
        raise RoomGeometryError("target is silent on the reference microphone; cannot set SIR/SNR")
    interferer_mc = scale_to_ratio(target_mc[0], interferer_mc, sir_db, mask)
    noise_mc = scale_to_ratio(target_mc[0], noise_mc, snr_db, mask)
    return target_mc, interferer_mc, noise_mc


def mix_scene(target_mc, interferer_mc, noise_mc, sir_db, snr_db, mask=None):
    target_mc, interferer_mc, noise_mc = mix_components(target_mc, interferer_mc, noise_mc, sir_db, snr_db, mask)
    return target_mc + interferer_mc + noise_mc
