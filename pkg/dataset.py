"""
Scene dataset synthesis and the on-disk manifest.

A dataset directory holds one subdirectory per split, one directory per
scene (mix.wav, target.wav, target_image.wav, anchor.wav, labels.txt), a
JSON-lines manifest per split (train.jsonl, dev.jsonl, test.jsonl) and
speakers.json recording the speaker split.
"""
import json
import os
from functools import partial
from typing import NamedTuple

import numpy as np
import soundfile as sf
from tqdm import tqdm
from tqdm.contrib.concurrent import process_map

from config import ExperimentConfig
from corpus import DatasetError, load_clip, resolve_noise, scan_corpus, split_speakers
from room_sim import (
    ArrayGeometry,
    RoomSpec,
    SceneSpec,
    SourceCatalog,
    active_samples,
    fit_length,
    mix_components,
    render_moving_source,
    render_source,
    sample_scene,
)
from run_log import RunLogger
from stft_frontend import (
    SAMPLE_RATE,
    doa_frame_labels,
    frame_count,
    read_labels,
    stack_features,
    stft,
    stft_multichannel,
    vad_labels,
    write_labels,
)

SPLITS = ("train", "dev", "test")
SPLIT_IDS = {"train": 0, "dev": 1, "test": 2}
PEAK_LIMIT = 0.99


class ManifestStore:
    """Per-split JSON-lines scene records under a dataset directory"""

    def __init__(self, data_dir):
        self.data_dir = data_dir
        os.makedirs(data_dir, exist_ok=True)

    def manifest_path(self, split):
        if split not in SPLITS:
            raise DatasetError(f"unknown split '{split}'")
        return os.path.join(self.data_dir, f"{split}.jsonl")

    def write_entries(self, split, entries):
        with open(self.manifest_path(split), "w") as handle:
            for entry in entries:
                handle.write(json.dumps(entry, sort_keys=True) + "\n")

    def insert_entry(self, split, entry):
        with open(self.manifest_path(split), "a") as handle:
            handle.write(json.dumps(entry, sort_keys=True) + "\n")

    def get_entries(self, split, limit=None):
        path = self.manifest_path(split)
        if not os.path.exists(path):
            raise DatasetError(f"manifest not found: {path}")
        with open(path) as handle:
            entries = [json.loads(line) for line in handle if line.strip()]
        return entries[:limit] if limit else entries

    def get_entry_count(self, split):
        return len(self.get_entries(split))

    def has_split(self, split):
        return os.path.exists(self.manifest_path(split))

    def resolve(self, relative):
        return os.path.join(self.data_dir, relative)

    def save_speaker_split(self, splits):
        with open(os.path.join(self.data_dir, "speakers.json"), "w") as handle:
            json.dump(splits, handle, indent=2, sort_keys=True)

    def get_speaker_split(self):
        path = os.path.join(self.data_dir, "speakers.json")
        if not os.path.exists(path):
            return None
        with open(path) as handle:
            return json.load(handle)

    def check_speaker_disjoint(self):
        """Raise when any test-split speaker also appears in the training split"""
        def speakers(split):
            if not self.has_split(split):
                return set()
            found = set()
            for entry in self.get_entries(split):
                found.update(s for s in (entry.get("target_speaker"), entry.get("interferer_speaker")) if s)
            return found

        shared = speakers("train") & speakers("test")
        if shared:
            raise DatasetError(f"test speakers also present in training data: {sorted(shared)}")
        recorded = self.get_speaker_split()
        if recorded and set(recorded.get("train", ())) & set(recorded.get("test", ())):
            raise DatasetError("speaker split lists overlap between train and test")


manifest_stores = {}


def get_manifest_store(data_dir):
    """Shared ManifestStore per dataset directory"""
    key = os.path.abspath(data_dir)
    if key not in manifest_stores:
        manifest_stores[key] = ManifestStore(data_dir)
    return manifest_stores[key]


# ----------------------------------------------------------------------------
# rendering
# ----------------------------------------------------------------------------

def scene_geometry(scene_config, t60):
    room = RoomSpec(tuple(scene_config.room_dims), t60, scene_config.speed_of_sound)
    array = ArrayGeometry.circular(tuple(scene_config.array_center), scene_config.array_radius)
    catalog = SourceCatalog.ring(tuple(scene_config.array_center), scene_config.source_distance)
    return room, array, catalog


def render_scene_audio(scene, scene_config):
    """All waveforms and labels of one scene as arrays"""
    target = load_clip(scene.target_clip)
    length = target.shape[0]
    room, array, catalog = scene_geometry(scene_config, scene.t60)
    order = scene_config.max_order
    target_image = render_moving_source(
        target, scene, room, array, catalog, crossfade=scene_config.crossfade, max_order=order
    )
    interferer = np.zeros_like(target_image)
    if scene.interferer_clip:
        dry = fit_length(load_clip(scene.interferer_clip), length)[0]
        interferer = render_source(dry, catalog.positions[scene.interferer_idx], room, array, max_order=order)
    noise = np.zeros_like(target_image)
    if scene_config.noise and scene.noise_clip:
        dry = resolve_noise(scene.noise_clip, length)
        noise = render_source(dry, catalog.positions[scene.noise_idx], room, array, max_order=order)
    mask = active_samples(target_image[0])
    target_image, interferer, noise = mix_components(target_image, interferer, noise, scene.sir_db, scene.snr_db, mask)
    mixture = target_image + interferer + noise
    peak = float(np.max(np.abs(mixture)))
    gain = PEAK_LIMIT / peak if peak > PEAK_LIMIT else 1.0

    anchor = load_clip(scene.anchor_clip)
    if scene_config.anchor_mode == "spatial":
        anchor = render_source(anchor, catalog.positions[scene.anchor_idx], room, array, max_order=order)[0]

    labels = doa_frame_labels(vad_labels(target), scene, frame_count(length))
    return {
        "mixture": mixture * gain,
        "target": target,
        "target_image": target_image * gain,
        "interferer": interferer * gain,
        "noise": noise * gain,
        "anchor": anchor,
        "labels": labels,
        "mask": mask,
    }


def _write_wav(path, wave):
    data = np.asarray(wave, dtype=np.float32)
    sf.write(path, data.T if data.ndim == 2 else data, SAMPLE_RATE, subtype="FLOAT")


def render_scene(scene, scene_config, data_dir, split, index):
    """Render one scene to disk and return its manifest entry"""
    scene_id = f"{split}-{index:05d}"
    relative = os.path.join(split, scene_id)
    scene_dir = os.path.join(data_dir, relative)
    os.makedirs(scene_dir, exist_ok=True)
    audio = render_scene_audio(scene, scene_config)
    files = {
        "mix": "mix.wav",
        "target": "target.wav",
        "target_image": "target_image.wav",
        "anchor": "anchor.wav",
        "labels": "labels.txt",
    }
    _write_wav(os.path.join(scene_dir, files["mix"]), audio["mixture"])
    _write_wav(os.path.join(scene_dir, files["target"]), audio["target"])
    _write_wav(os.path.join(scene_dir, files["target_image"]), audio["target_image"])
    _write_wav(os.path.join(scene_dir, files["anchor"]), audio["anchor"])
    write_labels(os.path.join(scene_dir, files["labels"]), audio["labels"])
    entry = scene.to_dict()
    entry.update({key: os.path.join(relative, name) for key, name in files.items()})
    entry.update(
        {
            "id": scene_id,
            "split": split,
            "frames": int(audio["labels"].shape[0]),
            "duration": audio["target"].shape[0] / SAMPLE_RATE,
        }
    )
    return entry


def _render_task(task, scene_config, data_dir):
    split, index, scene = task
    return render_scene(scene, scene_config, data_dir, split, index)


def synthesize_dataset(config=None, seed=0, out_dir="data", pool=None, workers=None, quiet=False):
    """
    Sample and render every split; returns {split: entries}.

    Scene i of a split draws from the RNG stream (seed, split, i) over that
    split's speakers only, so the output is independent of worker count.
    """
    config = config or ExperimentConfig()
    data = config.data
    workers = data.workers if workers is None else workers
    logger = RunLogger(os.path.join(out_dir, "synthesis.log.jsonl"), quiet=quiet)
    pool = pool or scan_corpus(data.corpus_dir, data.noise_dir, data.min_duration, data.max_duration)
    splits = split_speakers(pool.speakers, data.dev_speaker_fraction, data.test_speaker_fraction, seed)
    if set(splits["train"]) & set(splits["test"]):
        raise DatasetError("speaker split lists overlap between train and test")
    store = ManifestStore(out_dir)
    store.save_speaker_split(splits)
    _, _, catalog = scene_geometry(config.scene, config.scene.t60_choices[0])
    counts = {"train": data.train_scenes, "dev": data.dev_scenes, "test": data.test_scenes}
    logger.event("start", seed=seed, counts=counts, speakers={k: len(v) for k, v in splits.items()})
    manifests = {}
    for split in SPLITS:
        split_pool = pool.subset(splits[split])
        tasks = [
            (split, i, sample_scene((seed, SPLIT_IDS[split], i), catalog, split_pool, config.scene))
            for i in range(counts[split])
        ]
        render = partial(_render_task, scene_config=config.scene, data_dir=out_dir)
        if workers > 1 and len(tasks) > 1:
            entries = process_map(render, tasks, max_workers=workers, chunksize=1, desc=f"🎧 {split}", disable=quiet)
        else:
            entries = [render(task) for task in tqdm(tasks, desc=f"🎧 {split}", disable=quiet)]
        store.write_entries(split, entries)
        manifests[split] = entries
        logger.event("split", split=split, scenes=len(entries))
        logger.status(f"Rendered {len(entries)} {split} scenes", "success")
    store.check_speaker_disjoint()
    logger.event("done", scenes=sum(len(v) for v in manifests.values()))
    return manifests


# ----------------------------------------------------------------------------
# features
# ----------------------------------------------------------------------------

class SceneFeatures(NamedTuple):
    scene_id: str
    raw_stack: np.ndarray       # [12, T, F]
    target_stack: np.ndarray    # [12, T, F]
    anchor_mag: np.ndarray      # [Ta, F]
    labels: np.ndarray          # [T]
    sir_db: int


def read_wav(path, channels=None):
    data, rate = sf.read(path, dtype="float64", always_2d=True)
    if rate != SAMPLE_RATE:
        raise DatasetError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    if channels is not None and data.shape[1] != channels:
        raise DatasetError(f"{path}: {data.shape[1]} channels, expected {channels}")
    return data.T


def mixture_features(mixture, anchor):
    """Network inputs from a [6, N] mixture and a mono anchor"""
    return stack_features(stft_multichannel(mixture)), np.abs(stft(np.asarray(anchor).reshape(-1)))


def load_scene_features(entry, data_dir, mics=6):
    resolve = partial(os.path.join, data_dir)
    mixture = read_wav(resolve(entry["mix"]), mics)
    raw_stack, anchor_mag = mixture_features(mixture, read_wav(resolve(entry["anchor"]), 1)[0])
    target_stack = stack_features(stft_multichannel(read_wav(resolve(entry["target_image"]), mics)))
    labels = read_labels(resolve(entry["labels"]))
    if labels.shape[0] != raw_stack.shape[1]:
        raise DatasetError(f"scene {entry.get('id')}: {labels.shape[0]} labels for {raw_stack.shape[1]} frames")
    return SceneFeatures(entry.get("id", ""), raw_stack, target_stack, anchor_mag, labels, entry.get("sir_db"))


def scene_from_entry(entry):
    return SceneSpec.from_dict(entry)
