"""
Training, evaluation and inference drivers.

train() runs Adam on the joint loss with a plateau-halving learning rate
and keeps the checkpoint with the best dev loss; evaluate() scores a
predictor (the network, SRP-PHAT, or reference predictors) per SIR bucket;
infer() turns a mixture and an anchor into a per-frame DOA stream.
"""
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from tqdm import tqdm

import numeric_core as nc
from baselines import SteeringGrid, srp_phat_track
from config import ExperimentConfig, load_config, save_config
from corpus import DatasetError
from dataset import get_manifest_store, load_scene_features, mixture_features, read_wav, scene_geometry
from loss_metrics import aggregate_metrics, decode, joint_loss
from model import RTSDOA, init_parameters, miniature_config, rtsdoa_forward
from parameter_store import CheckpointError, ParameterStore
from run_log import RunLogger
from stft_frontend import HOP_LENGTH, SAMPLE_RATE, SILENCE_CLASS, class_to_angle

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteGradientError(ValueError):
    """Raised when a gradient contains NaN or Inf"""


@dataclass
class OptimizerState:
    lr: float
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def create(cls, store, lr):
        return cls(
            lr=lr,
            m={name: np.zeros_like(array) for name, array in store.items()},
            v={name: np.zeros_like(array) for name, array in store.items()},
        )


def adam_step(store, grads, state, lr=None):
    """One bias-corrected Adam update; returns (new store, new state)"""
    lr = state.lr if lr is None else lr
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(f"gradient of '{name}' contains NaN or Inf at step {state.step + 1}")
    step = state.step + 1
    m, v, updated = {}, {}, {}
    correction1 = 1.0 - ADAM_BETA1 ** step
    correction2 = 1.0 - ADAM_BETA2 ** step
    for name, param in store.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param)
        if grad.shape != param.shape:
            raise nc.ShapeError(f"adam: gradient shape {grad.shape} does not match '{name}' {param.shape}")
        m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * grad
        v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * grad * grad
        m_hat = m[name] / correction1
        v_hat = v[name] / correction2
        updated[name] = (param - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(param.dtype)
    return store.updated(updated), OptimizerState(lr=lr, step=step, m=m, v=v)


class PlateauScheduler:
    """Multiply the learning rate by `factor` after `patience` epochs without improvement"""

    def __init__(self, lr, factor=0.5, patience=2):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric):
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


# ----------------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------------

class Batch(NamedTuple):
    raw: np.ndarray        # [B, 12, T, F]
    target: np.ndarray     # [B, 12, T, F]
    anchor: np.ndarray     # [B, Ta, F]
    labels: np.ndarray     # [B, T]


def bucket_batches(entries, batch_size, rng):
    """Duration-sorted chunks of entries, returned in shuffled order"""
    order = sorted(range(len(entries)), key=lambda i: (entries[i]["frames"], entries[i]["id"]))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [[entries[i] for i in chunks[c]] for c in rng.permutation(len(chunks))]


def collate(features, dtype=np.float32):
    """Stack scenes, truncating every member to the shortest mixture and anchor"""
    frames = min(f.raw_stack.shape[1] for f in features)
    anchor_frames = min(f.anchor_mag.shape[0] for f in features)
    return Batch(
        raw=np.stack([f.raw_stack[:, :frames] for f in features]).astype(dtype),
        target=np.stack([f.target_stack[:, :frames] for f in features]).astype(dtype),
        anchor=np.stack([f.anchor_mag[:anchor_frames] for f in features]).astype(dtype),
        labels=np.stack([f.labels[:frames] for f in features]),
    )


class FeatureCache:
    def __init__(self, data_dir, mics=6):
        self.data_dir = data_dir
        self.mics = mics
        self._features = {}

    def get(self, entry):
        key = entry["id"]
        if key not in self._features:
            self._features[key] = load_scene_features(entry, self.data_dir, self.mics)
        return self._features[key]


def build_loss_graph(store, model_config):
    """Graph from a batch to {"loss", "report", "logits"}"""
    def fn(params, raw_stack, anchor_mag, target_stack, labels):
        out = rtsdoa_forward(params, raw_stack, anchor_mag, model_config)
        enhanced = out["enhanced"]
        loss, report = joint_loss(out["logits"], labels, target_stack if enhanced is not None else None, enhanced)
        return {"loss": loss, "report": report, "logits": out["logits"]}

    return nc.Graph(fn, store, name="rtsdoa-loss")


def batch_inputs(batch):
    return {"raw_stack": batch.raw, "anchor_mag": batch.anchor, "target_stack": batch.target, "labels": batch.labels}


def batch_loss(store, model_config, batch, with_grads=False):
    graph = build_loss_graph(store, model_config)
    out = nc.forward(graph, batch_inputs(batch))
    grads = nc.backward(graph, out["loss"]) if with_grads else None
    return out["report"], grads


def gradient_check(model_config=None, frames=6, anchor_frames=4, tolerance=1e-4, seed=0):
    """Finite-difference check of the full joint loss on a miniature float64 model"""
    model_config = model_config or miniature_config()
    rng = np.random.default_rng(seed)
    store = init_parameters(model_config, dtype=np.float64, seed=seed)
    channels = 2 * model_config.mics
    batch = Batch(
        raw=rng.standard_normal((1, channels, frames, model_config.freq_bins)),
        target=rng.standard_normal((1, channels, frames, model_config.freq_bins)),
        anchor=np.abs(rng.standard_normal((1, anchor_frames, model_config.freq_bins))),
        labels=rng.integers(0, model_config.classes, size=(1, frames)),
    )
    return nc.grad_check(build_loss_graph(store, model_config), batch_inputs(batch), tolerance=tolerance, output="loss")


def mean_loss(store, model_config, entries, cache, batch_size):
    """Frame-weighted mean of the per-batch losses"""
    totals = np.zeros(3)
    weight = 0
    rng = np.random.default_rng(0)
    for chunk in bucket_batches(entries, batch_size, rng):
        batch = collate([cache.get(e) for e in chunk], store.dtype or np.float32)
        report, _ = batch_loss(store, model_config, batch)
        n = batch.labels.size
        totals += n * np.array([report.mse, report.ce, report.total])
        weight += n
    mse, ce, total = totals / max(weight, 1)
    return {"mse": float(mse), "ce": float(ce), "total": float(total)}


@dataclass
class TrainResult:
    checkpoint: str
    best_dev_loss: float
    epochs_run: int
    final_lr: float
    history: list = field(default_factory=list)
    initial_train: dict = field(default_factory=dict)


def config_sidecar(checkpoint):
    return checkpoint + ".cfg"


def train(config, data_dir, checkpoint, quiet=False):
    """
    Fit the network on the train split of data_dir.

    Writes the best-dev checkpoint, its config sidecar and a JSON-lines log
    next to `checkpoint`. Training stops after train.epochs epochs or once
    the learning rate falls below train.min_lr.
    """
    config = config or ExperimentConfig()
    manifest = get_manifest_store(data_dir)
    entries = manifest.get_entries("train")
    if not entries:
        raise DatasetError(f"no training scenes in {data_dir}")
    dev_entries = manifest.get_entries("dev") if manifest.has_split("dev") else []
    logger = RunLogger(checkpoint + ".log.jsonl", quiet=quiet)
    os.makedirs(os.path.dirname(os.path.abspath(checkpoint)), exist_ok=True)
    save_config(config, config_sidecar(checkpoint))

    tc = config.train
    model = RTSDOA(config.model)
    store = model.store
    state = OptimizerState.create(store, tc.lr)
    scheduler = PlateauScheduler(tc.lr, tc.lr_factor, tc.plateau_patience)
    cache = FeatureCache(data_dir, config.model.mics)
    rng = np.random.default_rng(tc.seed)
    best = math.inf
    history = []
    initial = mean_loss(store, config.model, entries, cache, tc.batch)
    logger.event(
        "start",
        parameters=store.count(),
        train_scenes=len(entries),
        dev_scenes=len(dev_entries),
        lr=tc.lr,
        initial_train_mse=initial["mse"],
        initial_train_loss=initial["total"],
    )
    logger.status(f"Training {store.count():,} parameters on {len(entries)} scenes", "progress")

    epoch = 0
    for epoch in range(1, tc.epochs + 1):
        lr = scheduler.lr
        totals = np.zeros(3)
        weight = 0
        batches = bucket_batches(entries, tc.batch, rng)
        for chunk in tqdm(batches, desc=f"🧠 epoch {epoch}", disable=quiet, leave=False):
            batch = collate([cache.get(e) for e in chunk])
            report, grads = batch_loss(store, config.model, batch, with_grads=True)
            store, state = adam_step(store, grads, state, lr)
            n = batch.labels.size
            totals += n * np.array([report.mse, report.ce, report.total])
            weight += n
        train_mse, train_ce, train_total = totals / weight
        dev = mean_loss(store, config.model, dev_entries, cache, tc.batch) if dev_entries else None
        monitored = dev["total"] if dev else float(train_total)
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(train_total),
            "train_mse": float(train_mse),
            "train_ce": float(train_ce),
            "dev_loss": dev["total"] if dev else None,
        }
        history.append(record)
        logger.event("epoch", **record)
        if monitored < best:
            best = monitored
            store.save(checkpoint)
            logger.event("checkpoint", epoch=epoch, dev_loss=monitored)
        logger.status(f"Epoch {epoch}: train {train_total:.4f}, dev {monitored:.4f}, lr {lr:g}", "info")
        if scheduler.step(monitored) < tc.min_lr:
            logger.event("stop", epoch=epoch, reason="lr below minimum", lr=scheduler.lr)
            break

    logger.event("done", epochs=epoch, best_dev_loss=best, lr=scheduler.lr)
    logger.status(f"Best checkpoint saved to {checkpoint}", "success")
    return TrainResult(checkpoint, best, epoch, scheduler.lr, history, initial)


# ----------------------------------------------------------------------------
# evaluation and inference
# ----------------------------------------------------------------------------

def load_model(checkpoint, config=None):
    """Network from a checkpoint, using its config sidecar unless a config is given"""
    if not os.path.exists(checkpoint):
        raise CheckpointError(f"checkpoint not found: {checkpoint}")
    if config is None:
        sidecar = config_sidecar(checkpoint)
        config = load_config(sidecar if os.path.exists(sidecar) else None, use_environment=False)
    store = ParameterStore.load(checkpoint)
    try:
        return RTSDOA(config.model, store), config
    except CheckpointError:
        raise CheckpointError(f"{checkpoint} does not fit the model config") from None


def network_predictor(model):
    def predict(entry, features, data_dir):
        out = model.forward(features.raw_stack[None], features.anchor_mag[None])
        return decode(out["logits"][0])

    return predict


def srp_predictor(scene_config):
    _, array, catalog = scene_geometry(scene_config, scene_config.t60_choices[0])
    grid = SteeringGrid.build(array, catalog, scene_config.speed_of_sound)

    def predict(entry, features, data_dir):
        mixture = read_wav(os.path.join(data_dir, entry["mix"]), array.count)
        return srp_phat_track(mixture, grid)[:features.labels.shape[0]]

    return predict


def oracle_predictor(entry, features, data_dir):
    return features.labels.copy()


def silence_predictor(entry, features, data_dir):
    return np.full_like(features.labels, SILENCE_CLASS)


def evaluate_predictor(predict, data_dir, split="test", pooled=False, mics=6, quiet=True):
    entries = get_manifest_store(data_dir).get_entries(split)
    if not entries:
        raise DatasetError(f"no {split} scenes in {data_dir}")
    records = []
    for entry in tqdm(entries, desc=f"📏 {split}", disable=quiet):
        features = load_scene_features(entry, data_dir, mics)
        records.append((predict(entry, features, data_dir), features.labels, entry.get("sir_db")))
    return aggregate_metrics(records, pooled=pooled)


def evaluate(checkpoint, data_dir, split="test", config=None, pooled=None, quiet=True):
    model, config = load_model(checkpoint, config)
    pooled = config.train.pooled_metrics if pooled is None else pooled
    return evaluate_predictor(network_predictor(model), data_dir, split, pooled, config.model.mics, quiet)


def evaluate_baseline(method, data_dir, config=None, split="test", pooled=False, quiet=True):
    config = config or ExperimentConfig()
    predictors = {
        "srp-phat": srp_predictor(config.scene),
        "oracle": oracle_predictor,
        "silence": silence_predictor,
    }
    if method not in predictors:
        raise ValueError(f"unknown baseline '{method}'; choose from {sorted(predictors)}")
    return evaluate_predictor(predictors[method], data_dir, split, pooled, config.model.mics, quiet)


def frame_records(classes):
    """(time_s, class, angle or None) per frame; time is the frame start"""
    return [(round(t * HOP_LENGTH / SAMPLE_RATE, 2), int(c), class_to_angle(c)) for t, c in enumerate(classes)]


def format_records(records):
    return "\n".join(f"{t:.2f}\t{c}\t{'silence' if a is None else a}" for t, c, a in records)


def infer_arrays(model, mixture, anchor):
    mixture = np.atleast_2d(np.asarray(mixture, dtype=np.float64))
    if mixture.shape[0] != model.config.mics:
        raise DatasetError(f"mixture has {mixture.shape[0]} channels, expected {model.config.mics}")
    raw_stack, anchor_mag = mixture_features(mixture, anchor)
    out = model.forward(raw_stack[None], anchor_mag[None])
    return frame_records(decode(out["logits"][0]))


def infer(checkpoint, mix_path, anchor_path, config=None, out_path=None):
    model, _ = load_model(checkpoint, config)
    mixture = read_wav(mix_path, model.config.mics)
    anchor = read_wav(anchor_path, 1)[0]
    records = infer_arrays(model, mixture, anchor)
    if out_path:
        with open(out_path, "w") as handle:
            handle.write(format_records(records) + "\n")
    return records
