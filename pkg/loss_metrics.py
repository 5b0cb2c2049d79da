"""
Training loss (enhancement MSE plus DOA cross entropy) and the VDE / AR
evaluation metrics.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

import numeric_core as nc
from numeric_core import ShapeError
from stft_frontend import DEGREES_PER_CLASS, N_DIRECTIONS, SILENCE_CLASS

N_CLASSES = N_DIRECTIONS + 1


@dataclass
class LossReport:
    mse: float
    ce: float
    total: float


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------

def mse_loss(target, estimate):
    """
    Tensor MSE between real/imag stacks [..., 2C, T, F].

    Squared real and imaginary errors are summed per complex point and
    averaged over all (channel, frame, bin) points.
    """
    if target.shape != estimate.shape:
        raise ShapeError(f"mse: target shape {target.shape} differs from estimate shape {estimate.shape}")
    diff = nc.sub(estimate, target)
    points = diff.data.size // 2
    return nc.mul(nc.sum_(nc.mul(diff, diff)), 1.0 / points)


def mse_complex(target, estimate):
    """Mean over complex points of squared real plus squared imaginary error"""
    target = np.asarray(target)
    estimate = np.asarray(estimate)
    if target.shape != estimate.shape:
        raise ShapeError(f"mse: target shape {target.shape} differs from estimate shape {estimate.shape}")
    diff = estimate - target
    return float(np.mean(diff.real ** 2 + diff.imag ** 2))


def _check_labels(labels, classes):
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integer classes, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label classes must lie in 0..{classes - 1}, got {labels.min()}..{labels.max()}")
    return labels


def cross_entropy_loss(logits, labels):
    """Tensor mean over frames of -log softmax(logits)[label]"""
    classes = logits.shape[-1]
    labels = _check_labels(labels, classes)
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"cross entropy: logits {logits.shape} do not match labels {labels.shape}")
    onehot = np.eye(classes, dtype=logits.dtype)[labels]
    picked = nc.sum_(nc.mul(nc.log_softmax(logits, axis=-1), onehot))
    return nc.mul(picked, -1.0 / max(labels.size, 1))


def cross_entropy(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    return float(cross_entropy_loss(nc.constant(logits), labels).data)


def joint_loss(logits, labels, target_stack=None, enhanced_stack=None):
    """
    Total loss tensor and its LossReport.

    Without an enhancement estimate (ablated CRN) the MSE term is zero.
    """
    ce = cross_entropy_loss(logits, labels)
    if enhanced_stack is None:
        return ce, LossReport(mse=0.0, ce=float(ce.data), total=float(ce.data))
    mse = mse_loss(target_stack, enhanced_stack)
    total = nc.add(mse, ce)
    return total, LossReport(mse=float(mse.data), ce=float(ce.data), total=float(total.data))


def decode(logits):
    """Per-frame argmax; ties go to the lowest class"""
    data = logits.data if isinstance(logits, nc.Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1).astype(np.int64)


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction has {pred.shape} frames but truth has {truth.shape}")
    return pred, truth


def circular_distance(a_deg, b_deg):
    diff = np.abs(np.asarray(a_deg) - np.asarray(b_deg)) % 360
    return np.minimum(diff, 360 - diff)


def vde(pred, truth):
    """Fraction of frames whose speech/silence decision disagrees"""
    pred, truth = _pair(pred, truth)
    if pred.size == 0:
        raise ValueError("vde needs at least one frame")
    return float(np.mean((pred == SILENCE_CLASS) != (truth == SILENCE_CLASS)))


def ar_counts(pred, truth, tolerance_deg=DEGREES_PER_CLASS):
    """(correct, voiced) frame counts; a silence prediction on a voiced frame is wrong"""
    pred, truth = _pair(pred, truth)
    voiced = truth != SILENCE_CLASS
    distance = circular_distance(pred * DEGREES_PER_CLASS, truth * DEGREES_PER_CLASS)
    correct = voiced & (pred != SILENCE_CLASS) & (distance <= tolerance_deg)
    return int(correct.sum()), int(voiced.sum())


def ar(pred, truth, tolerance_deg=DEGREES_PER_CLASS):
    """Share of voiced truth frames whose estimate is within tolerance on the circle"""
    correct, voiced = ar_counts(pred, truth, tolerance_deg)
    if voiced == 0:
        raise ValueError("ar is undefined without voiced frames")
    return correct / voiced


@dataclass
class MetricsReport:
    vde: float
    ar: float
    utterances: int = 0
    pooled: bool = False
    per_sir: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)

    def save(self, path):
        with open(path, "w") as handle:
            handle.write(self.to_json())


def _summarise(records, pooled):
    if not records:
        return None
    if pooled:
        preds = np.concatenate([r[0] for r in records])
        truths = np.concatenate([r[1] for r in records])
        correct, voiced = ar_counts(preds, truths)
        return vde(preds, truths), (correct / voiced if voiced else 0.0)
    vdes = [vde(pred, truth) for pred, truth, _ in records]
    ars = []
    for pred, truth, _ in records:
        correct, voiced = ar_counts(pred, truth)
        if voiced:
            ars.append(correct / voiced)
    return float(np.mean(vdes)), (float(np.mean(ars)) if ars else 0.0)


def aggregate_metrics(records, pooled=False):
    """
    records: iterable of (pred, truth, sir_db) per utterance.

    Per-utterance averaging by default; utterances with no voiced frames
    count towards VDE only. pooled=True scores all frames together.
    """
    records = [(np.asarray(p), np.asarray(t), s) for p, t, s in records]
    if not records:
        raise ValueError("no utterances to score")
    overall = _summarise(records, pooled)
    per_sir = {}
    for sir in sorted({int(s) for _, _, s in records if s is not None}):
        subset = [r for r in records if r[2] is not None and int(r[2]) == sir]
        sir_vde, sir_ar = _summarise(subset, pooled)
        per_sir[str(sir)] = {"vde": sir_vde, "ar": sir_ar, "utterances": len(subset)}
    return MetricsReport(vde=overall[0], ar=overall[1], utterances=len(records), pooled=pooled, per_sir=per_sir)
