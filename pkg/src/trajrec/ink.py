"""Trajectory preprocessing: rescaling, point reduction, pen-state encoding,
padding, and rasterization to the binary offline image."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PEN_DOWN, PEN_UP, PEN_END = 0, 1, 2
START_RECORD = np.array([0.0, 0.0, 0.0, 1.0, 0.0])
PAD_RECORD = np.array([0.0, 0.0, 0.0, 0.0, 1.0])


@dataclass
class Trajectory:
    """Ordered strokes, each an ``(n, 2)`` array of (x, y) points."""

    strokes: list

    def __post_init__(self):
        self.strokes = [np.asarray(s, dtype=np.float64).reshape(-1, 2) for s in self.strokes]

    @classmethod
    def from_sample(cls, sample) -> "Trajectory":
        return cls(sample.strokes)

    def to_lists(self):
        return [[(float(x), float(y)) for x, y in s] for s in self.strokes]

    @property
    def n_points(self) -> int:
        return sum(len(s) for s in self.strokes)

    def points(self) -> np.ndarray:
        if not self.strokes:
            return np.zeros((0, 2))
        return np.concatenate(self.strokes, axis=0)

    def pen_states(self) -> np.ndarray:
        """Per-point pen state index under the encoding rule."""
        states = []
        for k, stroke in enumerate(self.strokes):
            s = [PEN_DOWN] * len(stroke)
            if s:
                s[-1] = PEN_END if k == len(self.strokes) - 1 else PEN_UP
            states += s
        return np.array(states, dtype=np.int64)

    def reversed_strokes(self) -> "Trajectory":
        return Trajectory(self.strokes[::-1])


@dataclass
class PointSequence:
    """Network encoding: rows of (x, y, ps0, ps1, ps2) with x, y in [0, 1]."""

    points: np.ndarray
    n_real: int

    def to_trajectory(self, side: int) -> Trajectory:
        """Invert :func:`encode_sequence` (real points only)."""
        strokes, current = [], []
        for x, y, _, up, end in self.points[: self.n_real]:
            current.append((x * (side - 1), y * (side - 1)))
            if up > 0.5 or end > 0.5:
                strokes.append(current)
                current = []
        if current:
            strokes.append(current)
        return Trajectory(strokes)


@dataclass
class PaddedBatch:
    points: np.ndarray  # (B, T, 5)
    lengths: np.ndarray  # (B,) real point counts

    @property
    def steps(self) -> int:
        return self.points.shape[1]


def rescale(sample, side: int = 64) -> Trajectory:
    """Isotropically fit the tight bounding box into ``[0, side-1]^2``.

    The longer box side spans the full range and the shorter one is
    centered; a single-point box maps to the image center.
    """
    traj = sample if isinstance(sample, Trajectory) else Trajectory.from_sample(sample)
    pts = traj.points()
    lo = pts.min(axis=0)
    extent = pts.max(axis=0) - lo
    span = side - 1
    longest = extent.max()
    scale = span / longest if longest > 0 else 0.0
    offset = (span - extent * scale) / 2.0
    return Trajectory([(s - lo) * scale + offset for s in traj.strokes])


def _chord_distances(points, a, b):
    d = b - a
    norm = math.hypot(d[0], d[1])
    rel = points - a
    if norm == 0.0:
        return np.hypot(rel[:, 0], rel[:, 1])
    return np.abs(d[0] * rel[:, 1] - d[1] * rel[:, 0]) / norm


def simplify_stroke(stroke: np.ndarray, epsilon: float) -> np.ndarray:
    """Douglas-Peucker on one polyline; ties keep the first farthest point."""
    n = len(stroke)
    if n <= 2:
        return stroke.copy()
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        first, last = stack.pop()
        if last - first < 2:
            continue
        dist = _chord_distances(stroke[first + 1:last], stroke[first], stroke[last])
        k = int(np.argmax(dist))
        if dist[k] > epsilon:
            split = first + 1 + k
            keep[split] = True
            stack.append((split, last))
            stack.append((first, split))
    return stroke[keep]


def reduce_points(traj: Trajectory, epsilon: float = 2.0) -> Trajectory:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return Trajectory([simplify_stroke(s, epsilon) for s in traj.strokes])


def encode_sequence(traj: Trajectory, side: int = 64) -> PointSequence:
    pts = traj.points() / (side - 1)
    states = traj.pen_states()
    records = np.zeros((len(pts), 5))
    records[:, :2] = pts
    records[np.arange(len(pts)), 2 + states] = 1.0
    return PointSequence(records, len(pts))


def pad_sequences(seqs) -> PaddedBatch:
    if not seqs:
        raise ValueError("pad_sequences needs at least one sequence")
    steps = max(s.n_real for s in seqs)
    batch = np.tile(PAD_RECORD, (len(seqs), steps, 1))
    for k, s in enumerate(seqs):
        batch[k, : s.n_real] = s.points[: s.n_real]
    return PaddedBatch(batch, np.array([s.n_real for s in seqs], dtype=np.int64))


def round_half_up(v) -> int:
    return int(math.floor(v + 0.5))


def bresenham(x0: int, y0: int, x1: int, y1: int):
    """Integer pixels on the line from (x0, y0) to (x1, y1), inclusive."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    pixels = []
    while True:
        pixels.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pixels
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize(traj: Trajectory, side: int = 64) -> np.ndarray:
    """1-pixel-wide binary rendering; ``image[row, col]`` with row = y.

    Pixels falling outside the image are dropped.
    """
    image = np.zeros((side, side), dtype=np.uint8)

    def plot(pixels):
        for x, y in pixels:
            if 0 <= x < side and 0 <= y < side:
                image[y, x] = 1

    for stroke in traj.strokes:
        ints = [(round_half_up(x), round_half_up(y)) for x, y in stroke]
        if len(ints) == 1:
            plot(ints)
        for (x0, y0), (x1, y1) in zip(ints, ints[1:]):
            plot(bresenham(x0, y0, x1, y1))
    return image


def preprocess(sample, side: int = 64, epsilon: float = 2.0):
    """Full pipeline for one ink sample: (image, sequence, trajectory)."""
    traj = reduce_points(rescale(sample, side), epsilon)
    return rasterize(traj, side), encode_sequence(traj, side), traj
