"""Recovery metrics, visual exports, the offline classifier and score fusion.

Score files are JSON lines ``{"id": ..., "scores": {label: probability}}``;
sweep tables are CSV with header ``gamma,accuracy``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ink import Trajectory, rasterize
from .model import glorot_uniform
from .numerics import ops
from .numerics.optim import AdamState, adam_step
from .numerics.tensor import Tensor
from .training import read_archive, write_archive

PROB_FLOOR = 1e-12
CLASSIFIER_MAGIC = b"OTRK"


# --- DTW ---------------------------------------------------------------------------

def _flatten(traj):
    if isinstance(traj, Trajectory):
        return traj.points(), traj.pen_states()
    pts = np.asarray(traj, dtype=np.float64).reshape(-1, 2)
    return pts, np.zeros(len(pts), dtype=np.int64)


def dtw_align(a, b, pen_penalty: float = 0.0):
    """Classic boundary-aligned DTW with Euclidean local cost.

    Returns ``(total_cost, path)`` where ``path`` lists aligned index pairs.
    With ``pen_penalty`` > 0 every aligned pair whose pen states differ costs
    that much extra.
    """
    pa, sa = _flatten(a)
    pb, sb = _flatten(b)
    n, m = len(pa), len(pb)
    if n == 0 or m == 0:
        raise ValueError("dtw needs two non-empty trajectories")
    cost = np.hypot(pa[:, None, 0] - pb[None, :, 0], pa[:, None, 1] - pb[None, :, 1])
    if pen_penalty:
        cost = cost + pen_penalty * (sa[:, None] != sb[None, :])
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev = acc[i], acc[i - 1]
        for j in range(1, m + 1):
            row[j] = cost[i - 1, j - 1] + min(prev[j - 1], prev[j], row[j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        moves = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(moves, key=lambda mv: mv[0])
        path.append((i - 1, j - 1))
    path.reverse()
    return float(acc[n, m]), path


def dtw_distance(a, b, normalized: bool = False, pen_penalty: float = 0.0) -> float:
    """DTW cost between two trajectories (stroke boundaries ignored).

    ``normalized`` divides by the optimal path length.
    """
    total, path = dtw_align(a, b, pen_penalty)
    return total / len(path) if normalized else total


# --- raster comparison ---------------------------------------------------------------

def raster_iou(recovered: Trajectory, image: np.ndarray) -> float:
    side = image.shape[0]
    drawn = rasterize(recovered, side).astype(bool)
    target = np.asarray(image).astype(bool)
    union = np.logical_or(drawn, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(drawn, target).sum() / union)


def evaluate_recovery(golds, recovered, images) -> dict:
    dtw, dtw_norm, iou, strokes = [], [], [], []
    for gold, rec, image in zip(golds, recovered, images):
        total, path = dtw_align(gold, rec)
        dtw.append(total)
        dtw_norm.append(total / len(path))
        iou.append(raster_iou(rec, image))
        strokes.append(len(gold.strokes) == len(rec.strokes))
    return {
        "samples": len(dtw),
        "dtw": float(np.mean(dtw)),
        "dtw_per_step": float(np.mean(dtw_norm)),
        "raster_iou": float(np.mean(iou)),
        "stroke_count_accuracy": float(np.mean(strokes)),
    }


# --- visual exports ---------------------------------------------------------------------

def _polyline(stroke, color):
    pts = " ".join(f"{x + 0.5:.3f},{y + 0.5:.3f}" for x, y in stroke)
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1"/>'


def svg_document(layers, side: int) -> str:
    """``layers`` is a list of (trajectory, color); points are pixel indices,
    drawn at pixel centers."""
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" '
        f'viewBox="0 0 {side} {side}">'
    ]
    for traj, color in layers:
        if traj is None:
            continue
        lines += [_polyline(stroke, color) for stroke in traj.strokes]
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def export_svg(gold: Trajectory, recovered: Trajectory | None, path, side: int = 64) -> None:
    """Overlay: ground truth in black, recovery in red."""
    Path(path).write_text(svg_document([(gold, "black"), (recovered, "red")], side), encoding="utf-8")


def attention_image(amap, side: int) -> np.ndarray:
    """Max-normalized 8-bit image, nearest-neighbor upscaled to side x side."""
    amap = np.asarray(amap, dtype=np.float64)
    peak = amap.max()
    scaled = np.zeros_like(amap) if peak <= 0 else np.floor(255.0 * amap / peak + 0.5)
    rows = (np.arange(side) * amap.shape[0]) // side
    cols = (np.arange(side) * amap.shape[1]) // side
    return scaled[rows][:, cols].astype(np.uint8)


def write_pgm(image: np.ndarray, path) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def export_attention(maps, partials, out_dir, side: int = 64, gold: Trajectory | None = None):
    """Per decoding step t (1-based): ``attention_{t:04d}.pgm`` and
    ``partial_{t:04d}.svg`` (recovery through step t in red, optional
    ground truth in black).  Returns the written paths."""
    if len(maps) != len(partials):
        raise ValueError("need one partial recovery per attention map")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for t, (amap, partial) in enumerate(zip(maps, partials), start=1):
        pgm = out / f"attention_{t:04d}.pgm"
        svg = out / f"partial_{t:04d}.svg"
        write_pgm(attention_image(amap, side), pgm)
        svg.write_text(svg_document([(gold, "black"), (partial, "red")], side), encoding="utf-8")
        written += [pgm, svg]
    return written


# --- offline classifier --------------------------------------------------------------------

@dataclass
class ClassifierConfig:
    labels: list
    image_side: int = 64
    conv_depths: tuple = (100, 200, 300, 400)
    fc_size: int = 500
    dropout: float = 0.25

    def __post_init__(self):
        self.conv_depths = tuple(int(d) for d in self.conv_depths)
        if len(self.conv_depths) != 4:
            raise ValueError("classifier needs 4 conv depths")
        if self.image_side % 16:
            raise ValueError("image_side must be a multiple of 16")

    @property
    def flat_size(self) -> int:
        return self.conv_depths[3] * (self.image_side // 16) ** 2


def classifier_shapes(cfg: ClassifierConfig) -> dict:
    shapes = {}
    c_in = 1
    for k, c_out in enumerate(cfg.conv_depths, start=1):
        shapes[f"conv{k}.weight"] = (c_out, c_in, 3, 3)
        shapes[f"conv{k}.bias"] = (c_out,)
        c_in = c_out
    shapes["fc.weight"] = (cfg.fc_size, cfg.flat_size)
    shapes["fc.bias"] = (cfg.fc_size,)
    shapes["out.weight"] = (len(cfg.labels), cfg.fc_size)
    shapes["out.bias"] = (len(cfg.labels),)
    return shapes


@dataclass
class Classifier:
    config: ClassifierConfig
    params: dict
    step: int = 0

    @classmethod
    def init(cls, config: ClassifierConfig, seed: int = 0, dtype=np.float32) -> "Classifier":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in classifier_shapes(config).items():
            if name.endswith("bias"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                rf = shape[2] * shape[3] if len(shape) == 4 else 1
                params[name] = glorot_uniform(rng, shape, shape[1] * rf, shape[0] * rf, dtype)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ClassifierConfig) -> "Classifier":
        return cls(config, {k: np.zeros(s, dtype=np.float32) for k, s in classifier_shapes(config).items()})


def classifier_logits(images, clf: Classifier, P=None, training=False, rng=None) -> Tensor:
    P = {k: Tensor(v) for k, v in clf.params.items()} if P is None else P
    cfg = clf.config
    images = np.asarray(images)
    if images.shape[-1] != cfg.image_side or images.shape[-2] != cfg.image_side:
        raise ValueError(f"image side {images.shape[-1]} does not match classifier side {cfg.image_side}")
    x = Tensor(images.reshape(-1, 1, cfg.image_side, cfg.image_side).astype(clf.params["fc.weight"].dtype))
    for k in range(1, 5):
        x = ops.maxpool2d(ops.relu(ops.conv2d(x, P[f"conv{k}.weight"], P[f"conv{k}.bias"])))
    x = x.reshape(x.shape[0], -1)
    x = ops.relu(ops.linear(x, P["fc.weight"], P["fc.bias"]))
    x = ops.dropout(x, cfg.dropout, rng, training)
    return ops.linear(x, P["out.weight"], P["out.bias"])


def _images_labels(dataset):
    if hasattr(dataset, "images"):
        return np.asarray(dataset.images), list(dataset.labels)
    images, labels = dataset
    return np.asarray(images), list(labels)


def accuracy(clf: Classifier, images, labels, batch_size: int = 128) -> float:
    probs = predict_proba(images, clf, batch_size)
    predicted = [clf.config.labels[k] for k in probs.argmax(axis=1)]
    return float(np.mean([p == g for p, g in zip(predicted, labels)]))


def train_offline_classifier(dataset, epochs: int = 10, lr: float = 1e-3, seed: int = 0,
                             conv_depths=(100, 200, 300, 400), fc_size: int = 500, dropout: float = 0.25,
                             batch_size: int = 64, heldout=None, target_accuracy: float | None = None,
                             eval_every: int | None = None, max_steps: int | None = None) -> Classifier:
    """Train the conv/pool x4 -> FC(ReLU, dropout) -> softmax classifier
    with Adam on cross-entropy.

    With ``heldout`` and ``target_accuracy``, training stops as soon as the
    held-out accuracy reaches the target (checked every ``eval_every`` steps,
    default once per epoch).
    """
    images, labels = _images_labels(dataset)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("classifier training needs at least two categories")
    cfg = ClassifierConfig(classes, images.shape[-1], conv_depths, fc_size, dropout)
    clf = Classifier.init(cfg, seed)
    targets = np.array([classes.index(lbl) for lbl in labels])
    rng = np.random.default_rng(seed)
    adam = AdamState(lr=lr)
    held = _images_labels(heldout) if heldout is not None else None

    def reached():
        return held is not None and target_accuracy is not None and accuracy(clf, *held) >= target_accuracy

    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            P = {k: Tensor(v, requires_grad=True) for k, v in clf.params.items()}
            logits = classifier_logits(images[idx], clf, P, training=True, rng=rng)
            logp = ops.log_softmax(logits, axis=-1)
            onehot = np.zeros(logp.shape, dtype=logp.dtype)
            onehot[np.arange(len(idx)), targets[idx]] = 1.0
            loss = -(logp * onehot).sum() / float(len(idx))
            loss.backward()
            adam_step(clf.params, {k: t.grad for k, t in P.items()}, adam)
            clf.step += 1
            if eval_every and clf.step % eval_every == 0 and reached():
                return clf
            if max_steps is not None and clf.step >= max_steps:
                return clf
        if not eval_every and reached():
            return clf
    return clf


def predict_proba(images, clf: Classifier, batch_size: int = 128) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    out = []
    for start in range(0, len(images), batch_size):
        logits = classifier_logits(images[start:start + batch_size], clf)
        out.append(ops.softmax(logits, axis=-1).data.astype(np.float64))
    return np.concatenate(out, axis=0) if out else np.zeros((0, len(clf.config.labels)))


def classify(images, clf: Classifier, ids=None) -> dict:
    """Score file ``{id: {label: probability}}`` in input order."""
    probs = predict_proba(images, clf)
    ids = [str(k) for k in range(len(probs))] if ids is None else list(ids)
    return {
        sid: {label: float(p) for label, p in zip(clf.config.labels, row)}
        for sid, row in zip(ids, probs)
    }


def save_classifier(clf: Classifier, path) -> None:
    cfg = asdict(clf.config)
    cfg["conv_depths"] = list(clf.config.conv_depths)
    write_archive(path, CLASSIFIER_MAGIC, {"kind": "classifier", "config": cfg, "step": clf.step}, clf.params)


def load_classifier(path) -> Classifier:
    from .training import CheckpointError

    header, tensors = read_archive(path, CLASSIFIER_MAGIC)
    if header.get("kind") != "classifier":
        raise CheckpointError(f"checkpoint kind {header.get('kind')!r} is not a classifier")
    cfg = ClassifierConfig(**header["config"])
    for name, shape in classifier_shapes(cfg).items():
        if name not in tensors or tensors[name].shape != shape:
            raise CheckpointError(f"classifier tensor {name} is missing or has the wrong shape")
    return Classifier(cfg, tensors, int(header.get("step", 0)))


# --- score files and fusion ------------------------------------------------------------------

def read_scores(path) -> dict:
    scores = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sid, row = obj["id"], {str(k): float(v) for k, v in obj["scores"].items()}
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise ValueError(f"line {lineno}: malformed score record ({exc})") from None
            if any(v < 0 or not math.isfinite(v) for v in row.values()):
                raise ValueError(f"line {lineno}: scores must be finite and non-negative")
            scores[sid] = row
    return scores


def write_scores(scores: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sid, row in scores.items():
            fh.write(json.dumps({"id": sid, "scores": row}, ensure_ascii=False) + "\n")


def _check_compatible(off: dict, on: dict):
    problems = []
    only_off = [k for k in off if k not in on]
    only_on = [k for k in on if k not in off]
    if only_off:
        problems.append(f"ids only in offline scores: {only_off[:10]}")
    if only_on:
        problems.append(f"ids only in online scores: {only_on[:10]}")
    for sid in off:
        if sid in on and set(off[sid]) != set(on[sid]):
            diff = sorted(set(off[sid]) ^ set(on[sid]))
            problems.append(f"label sets differ for {sid}: {diff}")
    if problems:
        raise ValueError("; ".join(problems))


def argmax_label(row: dict) -> str:
    """Highest-scoring label; ties go to the lexicographically smallest."""
    return min(row, key=lambda label: (-row[label], label))


def fuse_scores(off: dict, on: dict, gamma: float):
    """Weighted log-score fusion ``gamma*log(P_off) + (1-gamma)*log(P_on)``.

    Returns ``(fused, predictions)`` keyed by sample id in ``off`` order.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    _check_compatible(off, on)
    fused, preds = {}, {}
    for sid, row in off.items():
        fused[sid] = {
            label: gamma * math.log(max(p, PROB_FLOOR)) + (1.0 - gamma) * math.log(max(on[sid][label], PROB_FLOOR))
            for label, p in row.items()
        }
        preds[sid] = argmax_label(fused[sid])
    return fused, preds


def gamma_grid(start: float = 0.4, stop: float = 1.0, step: float = 0.1) -> list:
    count = int(round((stop - start) / step)) + 1
    return [round(start + k * step, 10) for k in range(count)]


def gamma_sweep(off: dict, on: dict, gold: dict, gammas) -> list:
    """``[(gamma, accuracy)]`` of the fused argmax against ``gold`` labels."""
    gammas = list(gammas)
    if not gammas:
        raise ValueError("gamma grid is empty")
    missing = [sid for sid in off if sid not in gold]
    if missing:
        raise ValueError(f"no gold label for ids: {missing[:10]}")
    rows = []
    for gamma in gammas:
        _, preds = fuse_scores(off, on, gamma)
        rows.append((gamma, float(np.mean([preds[sid] == gold[sid] for sid in preds]))))
    return rows


def format_sweep_csv(rows) -> str:
    return "gamma,accuracy\n" + "".join(f"{g:g},{a:.6f}\n" for g, a in rows)


def write_sweep_csv(rows, path) -> None:
    Path(path).write_text(format_sweep_csv(rows), encoding="utf-8")
