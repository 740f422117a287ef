"""Dataset preparation, teacher-forced training, and checkpoints.

Binary formats (all integers little-endian):

* dataset ``OTRD``: magic, version u32, sample count u64, side u32, then per
  sample a u32-length-prefixed UTF-8 label, ``n_real`` u32, ``n_real`` x 5
  float32 records, and the image as ``ceil(side^2 / 8)`` bytes of row-major
  bits (MSB first).
* checkpoint ``OTRK``: magic, version u32, u32-length-prefixed UTF-8 JSON
  header, tensor count u32, then per tensor a u32-length-prefixed name,
  dtype u8 (0 = f32, 1 = f64), rank u8, dims u64[rank], raw payload.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ink
from .dataio import read_ink
from .ink import PaddedBatch, PointSequence, pad_sequences
from .model import Model, ModelConfig, forward_teacher_forced, param_shapes
from .numerics.optim import AdamState, adam_step, clip_by_global_norm

log = logging.getLogger(__name__)

DATASET_MAGIC = b"OTRD"
CHECKPOINT_MAGIC = b"OTRK"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# --- datasets ---------------------------------------------------------------------

@dataclass
class Dataset:
    side: int
    labels: list
    images: np.ndarray  # (N, side, side) uint8
    sequences: list  # PointSequence per sample, float32 records

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        indices = list(indices)
        return Dataset(self.side, [self.labels[i] for i in indices], self.images[indices],
                       [self.sequences[i] for i in indices])

    def batch(self, indices):
        indices = list(indices)
        return self.images[indices], pad_sequences([self.sequences[i] for i in indices])

    @property
    def longest(self) -> int:
        return max(s.n_real for s in self.sequences)

    def trajectory(self, k: int):
        return self.sequences[k].to_trajectory(self.side)


def build_dataset(samples, side: int = 64, dp_epsilon: float = 2.0) -> Dataset:
    labels, images, seqs = [], [], []
    for sample in samples:
        image, seq, _ = ink.preprocess(sample, side, dp_epsilon)
        labels.append(sample.label)
        images.append(image)
        seqs.append(PointSequence(seq.points.astype(np.float32), seq.n_real))
    return Dataset(side, labels, np.stack(images).astype(np.uint8), seqs)


def write_dataset(ds: Dataset, path) -> None:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<IQI", FORMAT_VERSION, len(ds), ds.side))
    for label, image, seq in zip(ds.labels, ds.images, ds.sequences):
        raw = label.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", seq.n_real))
        buf.write(np.ascontiguousarray(seq.points[: seq.n_real], dtype="<f4").tobytes())
        buf.write(np.packbits(image.reshape(-1).astype(np.uint8)).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise DatasetFormatError(f"truncated dataset file while reading {what}")
    return data


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"bad dataset header: magic {magic!r} != {DATASET_MAGIC!r}")
        version, count, side = struct.unpack("<IQI", _read_exact(fh, 16, "header"))
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        n_bytes = (side * side + 7) // 8
        labels, images, seqs = [], [], []
        for k in range(count):
            (length,) = struct.unpack("<I", _read_exact(fh, 4, f"sample {k} label length"))
            labels.append(_read_exact(fh, length, f"sample {k} label").decode("utf-8"))
            (n_real,) = struct.unpack("<I", _read_exact(fh, 4, f"sample {k} n_real"))
            pts = np.frombuffer(_read_exact(fh, 20 * n_real, f"sample {k} points"), dtype="<f4")
            seqs.append(PointSequence(pts.reshape(n_real, 5).astype(np.float32), n_real))
            bits = np.frombuffer(_read_exact(fh, n_bytes, f"sample {k} image"), dtype=np.uint8)
            images.append(np.unpackbits(bits)[: side * side].reshape(side, side))
    images = np.stack(images) if images else np.zeros((0, side, side), dtype=np.uint8)
    return Dataset(side, labels, images, seqs)


def prepare_dataset(ink_path, side: int = 64, dp_epsilon: float = 2.0, out_path=None) -> Dataset:
    """Ink file -> (image, point sequence, label) records, optionally written."""
    ds = build_dataset(read_ink(ink_path), side, dp_epsilon)
    if out_path is not None:
        write_dataset(ds, out_path)
    return ds


# --- checkpoints -----------------------------------------------------------------

def write_archive(path, magic: bytes, header: dict, tensors: dict) -> None:
    buf = io.BytesIO()
    buf.write(magic)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_archive(path, magic: bytes):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != magic:
        raise CheckpointError(f"bad checkpoint header: magic {data[:4]!r} != {magic!r}")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, blob_len = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(take(blob_len, "config blob").decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, f"{name} dtype"))
        if code not in CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"{name} dims"))
        dtype = CODE_DTYPES[code]
        size = int(np.prod(dims)) * dtype.itemsize
        arr = np.frombuffer(take(size, f"{name} payload"), dtype=dtype.newbyteorder("<"))
        tensors[name] = arr.reshape(dims).astype(dtype)
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return header, tensors


def save_checkpoint(model: Model, path) -> None:
    header = {"kind": "recovery", "config": model.config.to_dict(), "step": model.step, "t_max": model.t_max}
    tensors = dict(model.params)
    for name, state in model.bn.items():
        tensors[f"{name}.running_mean"] = state.running_mean
        tensors[f"{name}.running_var"] = state.running_var
    write_archive(path, CHECKPOINT_MAGIC, header, tensors)


def load_checkpoint(path) -> Model:
    header, tensors = read_archive(path, CHECKPOINT_MAGIC)
    if header.get("kind") != "recovery":
        raise CheckpointError(f"checkpoint kind {header.get('kind')!r} is not a recovery model")
    cfg = ModelConfig.from_dict(header["config"])
    model = Model.init(cfg)
    for name, shape in param_shapes(cfg).items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"tensor {name} has shape {tensors[name].shape} but the config implies {shape}"
            )
        model.params[name] = tensors.pop(name)
    for name, state in model.bn.items():
        for stat in ("running_mean", "running_var"):
            key = f"{name}.{stat}"
            if key not in tensors or tensors[key].shape != getattr(state, stat).shape:
                raise CheckpointError(f"checkpoint tensor {key} is missing or mis-shaped")
            setattr(state, stat, tensors.pop(key))
    if tensors:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(tensors)}")
    model.step = int(header.get("step", 0))
    model.t_max = header.get("t_max")
    return model


# --- training -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    dp_epsilon: float = 2.0
    model: ModelConfig = field(default_factory=ModelConfig)
    patience: int = 10
    clip_norm: float = 5.0
    max_steps: int | None = None

    def validate(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class TrainResult:
    model: Model
    log: list
    best_epoch: int


def teacher_forced_unroll(images, batch: PaddedBatch, model: Model, params=None, training=True, ids=None):
    """Teacher-forced forward pass over one padded batch.

    Returns ``(steps, L, L_s, L_p)``; raises :class:`TrainingError` naming
    the batch's samples if the loss is not finite.
    """
    steps, loss, l_s, l_p = forward_teacher_forced(images, batch, model, params, training)
    if not np.isfinite(loss.data):
        names = ids if ids is not None else list(range(len(batch.lengths)))
        raise TrainingError(f"non-finite loss {float(loss.data)} for samples {names}")
    return steps, loss, l_s, l_p


def evaluate_loss(model: Model, ds: Dataset, batch_size: int = 64) -> dict:
    """Teacher-forced losses in eval mode, averaged over samples."""
    totals = np.zeros(3)
    for start in range(0, len(ds), batch_size):
        idx = list(range(start, min(start + batch_size, len(ds))))
        images, batch = ds.batch(idx)
        _, loss, l_s, l_p = teacher_forced_unroll(images, batch, model, training=False, ids=idx)
        totals += len(idx) * np.array([float(loss.data), float(l_s.data), float(l_p.data)])
    totals /= len(ds)
    return {"L": totals[0], "L_s": totals[1], "L_p": totals[2]}


def default_t_max(longest: int) -> int:
    return math.ceil(1.25 * longest)


def train(dataset: Dataset, cfg: TrainConfig, heldout: Dataset | None = None, log_path=None,
          model: Model | None = None) -> TrainResult:
    """Mini-batch Adam training with gradient clipping.

    One loss record per epoch is appended to ``log_path`` (JSON lines).  With
    a held-out set, the best held-out epoch is returned and training stops
    after ``cfg.patience`` epochs without improvement.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if model is None:
        model = Model.init(cfg.model, seed=cfg.seed)
    model.t_max = default_t_max(dataset.longest)
    adam = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    records = []
    best = (math.inf, model.copy(), 0)
    stale = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(dataset))
            sums, seen = np.zeros(3), 0
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and model.step >= cfg.max_steps:
                    break
                idx = order[start:start + cfg.batch_size].tolist()
                images, batch = dataset.batch(idx)
                P = model.bind(requires_grad=True)
                _, loss, l_s, l_p = teacher_forced_unroll(images, batch, model, P, training=True, ids=idx)
                loss.backward()
                grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
                clip_by_global_norm(grads, cfg.clip_norm)
                adam_step(model.params, grads, adam)
                model.step += 1
                sums += len(idx) * np.array([float(loss.data), float(l_s.data), float(l_p.data)])
                seen += len(idx)
            if seen == 0:
                break
            means = sums / seen
            record = {"epoch": epoch, "step": model.step, "L": float(means[0]),
                      "L_s": float(means[1]), "L_p": float(means[2])}
            if heldout is not None:
                held = evaluate_loss(model, heldout, cfg.batch_size)["L"]
                record["L_heldout"] = float(held)
                if held < best[0]:
                    best, stale = (held, model.copy(), epoch), 0
                else:
                    stale += 1
            records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            log.info(json.dumps(record))
            if heldout is not None and stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best[2])
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    if heldout is not None:
        return TrainResult(best[1], records, best[2])
    return TrainResult(model, records, records[-1]["epoch"] if records else 0)
