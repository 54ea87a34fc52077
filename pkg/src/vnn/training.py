"""Losses, optimizers, the training/evaluation loops, and checkpoints.

Training is fully deterministic: the seed in TrainConfig fixes parameter
init, shuffling, augmentation rotations, and therefore every logged metric
and the final checkpoint bytes.  A non-finite loss aborts loudly.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import data as D
from .autodiff import Rng, ShapeError, Tensor
from .models import Model, ModelSpec, build_model

CHECKPOINT_MAGIC = b"VNCK"
CHECKPOINT_VERSION = 1
_SPEC_ENTRY = "__spec_json__"


class NumericalAbort(RuntimeError):
    """Raised when a training loss stops being finite."""


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# losses

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class; max-subtracted for
    stability.  logits: (K,) or (N, K); labels: int or (N,) ints in [0, K)."""
    logits = ad.tensor(logits)
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1,) + logits.shape)
        labels = np.asarray([labels])
    else:
        labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    const_max = logits.data.max(axis=1, keepdims=True)   # constant shift
    z = ad.sub(logits, ad.expand(Tensor(const_max), logits.shape))
    lse = ad.log(ad.sum_axis(ad.exp(z), 1))              # (N,)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    true_logit = ad.sum_axis(ad.mul(z, Tensor(onehot)), 1)
    return ad.mean_all(ad.sub(lse, true_logit))


def bce(prob: Tensor, labels) -> Tensor:
    """Binary cross entropy with the probabilities clamped to 1e-7."""
    prob = ad.tensor(prob)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != prob.shape:
        raise ShapeError(f"labels shape {y.shape} does not match probs {prob.shape}")
    p = ad.clamp(prob, 1e-7, 1.0 - 1e-7)
    pos = ad.mul(Tensor(y), ad.log(p))
    negt = ad.mul(Tensor(1.0 - y), ad.log(ad.sub(ad.ones(p.shape), p)))
    return ad.neg(ad.mean_all(ad.add(pos, negt)))


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; missing grads count as zero."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def sgd_step(params: dict, lr: float) -> None:
    for p in params.values():
        if p.grad is not None:
            p.data = p.data - lr * p.grad


# ---------------------------------------------------------------------------
# config and checkpoints

@dataclass
class TrainConfig:
    task: str = "classify"            # classify | segment | occupancy
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"           # adam | sgd
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_rot: str = "I"              # I | z | so3
    eval_rot: str = "I"
    seed: int = 0
    occ_queries_per_step: int = 64

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.task not in ("classify", "segment", "occupancy"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for mode in (self.train_rot, self.eval_rot):
            D.AugmentPolicy(mode)  # validates


@dataclass
class Checkpoint:
    tensors: dict                     # name -> float64 ndarray
    model_spec: dict                  # ModelSpec echo
    version: int = CHECKPOINT_VERSION


def checkpoint_from_model(model: Model) -> Checkpoint:
    return Checkpoint(tensors={k: t.data.copy() for k, t in model.params().items()},
                      model_spec=model.spec.to_dict())


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    model = build_model(ModelSpec.from_dict(ckpt.model_spec), Rng(0))
    model.load_tensors(ckpt.tensors)
    return model


def _encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    spec_payload = np.frombuffer(
        json.dumps(ckpt.model_spec, sort_keys=True).encode("utf-8"), dtype=np.uint8
    ).astype(np.float64)
    entries = dict(ckpt.tensors)
    entries[_SPEC_ENTRY] = spec_payload
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    buf.write(struct.pack("<I", len(entries)))
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype=np.float64)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise TruncatedCheckpoint(f"{path}: header cut short at {len(blob)} bytes")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    body = blob[:-4]
    version, count = struct.unpack("<II", body[4:12])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")

    off = 12
    tensors = {}

    def take(n, what):
        nonlocal off
        if off + n > len(body):
            raise TruncatedCheckpoint(f"{path}: truncated while reading {what}")
        chunk = body[off:off + n]
        off += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = tuple(struct.unpack("<Q", take(8, "dims"))[0] for _ in range(rank))
        n_values = int(np.prod(dims)) if dims else 1
        payload = take(8 * n_values, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if off != len(body):
        raise TruncatedCheckpoint(f"{path}: {len(body) - off} trailing bytes before CRC")
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")

    spec_payload = tensors.pop(_SPEC_ENTRY, None)
    if spec_payload is None:
        raise CheckpointError(f"{path}: missing model spec entry")
    spec = json.loads(spec_payload.astype(np.uint8).tobytes().decode("utf-8"))
    return Checkpoint(tensors=tensors, model_spec=spec, version=version)


# ---------------------------------------------------------------------------
# train / evaluate

def _sample_loss_and_metric(model: Model, sample: D.PointCloudSample,
                            task: str, rng: Rng, queries_per_step: int):
    if task == "classify":
        logits = model.classify(sample.points)
        loss = cross_entropy(logits, sample.class_label)
        metric = float(np.argmax(logits.data) == sample.class_label)
    elif task == "segment":
        logits = model.segment(sample.points)
        loss = cross_entropy(logits, sample.point_labels)
        metric = float(np.mean(np.argmax(logits.data, axis=1) == sample.point_labels))
    else:
        queries, labels = sample.occupancy
        take = min(queries_per_step, queries.shape[0])
        idx = rng.integers(0, queries.shape[0], size=take)
        probs = model.decode_batch(queries[idx], model.encode(sample.points))
        loss = bce(probs, labels[idx])
        metric = float(np.mean((probs.data > 0.5) == (labels[idx] > 0.5)))
    return loss, metric


def _check_task(model: Model, task: str, dataset) -> None:
    if task in ("classify", "segment") and model.spec.head != task:
        raise ValueError(f"task {task!r} does not match model head {model.spec.head!r}")
    if task == "occupancy" and model.spec.head != "occupancy":
        raise ValueError(f"task 'occupancy' needs an occupancy model, "
                         f"got head {model.spec.head!r}")
    for s in dataset:
        if task == "classify" and s.class_label is None:
            raise ValueError("classification needs class labels")
        if task == "segment" and s.point_labels is None:
            raise ValueError("segmentation needs per-point labels")
        if task == "occupancy" and s.occupancy is None:
            raise ValueError("occupancy training needs query sets")


def train(spec_or_model, dataset: Sequence[D.PointCloudSample],
          cfg: TrainConfig, log=None):
    """Minibatch training with on-the-fly per-batch augmentation.

    Returns (model, checkpoint, rows) where rows are (epoch, loss, metric)
    tuples, one per epoch.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    rng = Rng(cfg.seed)
    if isinstance(spec_or_model, ModelSpec):
        model = build_model(spec_or_model, rng.child(1))
    else:
        model = spec_or_model
    _check_task(model, cfg.task, dataset)

    params = model.params()
    policy = D.AugmentPolicy(cfg.train_rot)
    adam = AdamState()
    rows = []
    for epoch in range(cfg.epochs):
        order = rng.child(2, epoch).permutation(len(dataset))
        losses, metrics = [], []
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            ad.zero_grads(params.values())
            batch_losses = []
            for j, di in enumerate(batch_idx):
                sample = D.augment(dataset[di], policy, rng.child(3, epoch, int(di)))
                loss, metric = _sample_loss_and_metric(
                    model, sample, cfg.task, rng.child(4, epoch, int(di)),
                    cfg.occ_queries_per_step)
                batch_losses.append(loss)
                metrics.append(metric)
            total = batch_losses[0]
            for extra in batch_losses[1:]:
                total = ad.add(total, extra)
            total = ad.mul(total, 1.0 / len(batch_losses))
            if not np.isfinite(total.data):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch}, batch starting {start}")
            ad.backward(total)
            if cfg.optimizer == "adam":
                adam_step(params, adam, cfg.learning_rate, cfg.beta1, cfg.beta2,
                          cfg.adam_eps)
            else:
                sgd_step(params, cfg.learning_rate)
            losses.append(float(total.data))
        row = (epoch, float(np.mean(losses)), float(np.mean(metrics)))
        rows.append(row)
        if log is not None:
            log(row)
    return model, checkpoint_from_model(model), rows


def _mean_iou(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> float:
    """IoU averaged over the classes present in truth or prediction."""
    ious = []
    for c in range(num_classes):
        p, t = pred == c, truth == c
        union = np.logical_or(p, t).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, t).sum() / union)
    return float(np.mean(ious)) if ious else 1.0


def occupancy_grid(resolution: int = 32, extent: float = 1.4) -> np.ndarray:
    """The fixed evaluation grid for volumetric IoU."""
    axis = np.linspace(-extent, extent, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def evaluate(model: Model, dataset: Sequence[D.PointCloudSample], task: str,
             policy: D.AugmentPolicy, grid_resolution: int = 32) -> float:
    """Task metric under an evaluation rotation policy; read-only.

    classify -> accuracy, segment -> mean IoU, occupancy -> volumetric IoU
    against the analytic primitive occupancy on a fixed grid.
    """
    if not dataset:
        raise ValueError("empty evaluation dataset")
    _check_task(model, task, dataset)
    rng = Rng(policy.seed)
    grid = occupancy_grid(grid_resolution) if task == "occupancy" else None
    scores = []
    with ad.no_grad():
        for i, sample in enumerate(dataset):
            s = D.augment(sample, policy, rng.child(5, i))
            if task == "classify":
                logits = model.classify(s.points).data
                scores.append(float(np.argmax(logits) == s.class_label))
            elif task == "segment":
                pred = np.argmax(model.segment(s.points).data, axis=1)
                scores.append(_mean_iou(pred, s.point_labels, model.spec.num_classes))
            else:
                if s.shape is None:
                    raise ValueError("volumetric IoU needs primitive shape descriptors")
                z = model.encode(s.points)
                pred = model.decode_batch(grid, z).data > 0.5
                truth = D.primitive_contains(s.shape, grid @ s.pose.T)
                union = np.logical_or(pred, truth).sum()
                inter = np.logical_and(pred, truth).sum()
                scores.append(float(inter / union) if union else 1.0)
    return float(np.mean(scores))


def write_metrics_csv(path, rows, header_note: str = "") -> None:
    """epoch,loss,metric rows; an optional leading '#' note records context."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header_note:
            fh.write(f"# {header_note}\n")
        fh.write("epoch,loss,metric\n")
        for epoch, loss, metric in rows:
            fh.write(f"{epoch},{loss:.17g},{metric:.17g}\n")
