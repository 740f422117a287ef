"""Ink files, deterministic synthetic glyph datasets, and train/test splits.

Ink files are UTF-8 JSON lines::

    {"id": "c000_0000", "label": "c000", "strokes": [[[x, y], ...], ...]}

Extra keys (e.g. ``"truncated"`` on recovered trajectories) are preserved in
:attr:`InkSample.extra`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

MASK64 = (1 << 64) - 1

CANVAS = 256.0
GRID = 8
SEGMENTS = (2, 5)
DENSIFY_STEP = 8.0


class InkFormatError(ValueError):
    pass


@dataclass
class InkSample:
    id: str
    label: str
    strokes: list  # list of strokes, each a list of (x, y) tuples
    extra: dict = field(default_factory=dict)

    def validate(self):
        if not self.strokes:
            raise InkFormatError(f"empty strokes: {self.id}")
        for stroke in self.strokes:
            if len(stroke) == 0:
                raise InkFormatError(f"empty stroke in sample: {self.id}")


@dataclass(frozen=True)
class SynthesisConfig:
    category_count: int = 8
    samples_per_category: int = 32
    stroke_count_range: tuple = (3, 6)
    jitter_std: float = 0.0
    seed: int = 0

    def validate(self):
        lo, hi = self.stroke_count_range
        if self.category_count < 1 or self.samples_per_category < 1:
            raise ValueError("category_count and samples_per_category must be positive")
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid stroke_count_range {self.stroke_count_range}")
        if self.jitter_std < 0:
            raise ValueError("jitter_std must be non-negative")
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")


# --- ink file I/O -----------------------------------------------------------------

def _parse_record(line: str, lineno: int) -> InkSample:
    try:
        obj = json.loads(line)
        sid, label, raw = obj["id"], obj["label"], obj["strokes"]
        if not isinstance(sid, str) or not isinstance(label, str) or not isinstance(raw, list):
            raise TypeError("id/label must be strings and strokes a list")
        strokes = [[(float(p[0]), float(p[1])) for p in stroke] for stroke in raw]
        if any(len(p) != 2 for stroke in raw for p in stroke):
            raise TypeError("points must be [x, y] pairs")
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        raise InkFormatError(f"line {lineno}: malformed ink record ({exc})") from None
    extra = {k: v for k, v in obj.items() if k not in ("id", "label", "strokes")}
    sample = InkSample(sid, label, strokes, extra)
    sample.validate()
    return sample


def read_ink(path) -> list[InkSample]:
    samples, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            sample = _parse_record(line, lineno)
            if sample.id in seen:
                raise InkFormatError(f"line {lineno}: duplicate id {sample.id!r}")
            seen.add(sample.id)
            samples.append(sample)
    return samples


def format_ink_record(sample: InkSample) -> str:
    record = {
        "id": sample.id,
        "label": sample.label,
        "strokes": [[[float(x), float(y)] for x, y in stroke] for stroke in sample.strokes],
    }
    record.update(sample.extra)
    return json.dumps(record, ensure_ascii=False)


def write_ink(samples, path) -> None:
    for sample in samples:
        sample.validate()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sample in samples:
            fh.write(format_ink_record(sample))
            fh.write("\n")


# --- portable PRNG ------------------------------------------------------------------

def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    """xorshift64* (Vigna 2016) seeded through splitmix64.

    Pure integer arithmetic, so streams are identical on every platform.
    """

    def __init__(self, seed: int):
        state = splitmix64(seed & MASK64)
        self.state = state or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] by rejection sampling."""
        span = hi - lo + 1
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            r = self.next_u64()
            if r < limit:
                return lo + r % span

    def normal(self) -> float:
        """Standard normal via Box-Muller (one variate per call)."""
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


# --- synthetic glyphs --------------------------------------------------------------

def _grid_point(rng: XorShift64Star):
    cell = CANVAS / GRID
    return ((rng.randint(0, GRID - 1) + 0.5) * cell, (rng.randint(0, GRID - 1) + 0.5) * cell)


def _template_stroke(rng: XorShift64Star):
    corners = [_grid_point(rng)]
    for _ in range(rng.randint(*SEGMENTS)):
        nxt = _grid_point(rng)
        while nxt == corners[-1]:
            nxt = _grid_point(rng)
        corners.append(nxt)
    return corners


def _densify(corners, step=DENSIFY_STEP):
    points = [corners[0]]
    for (x0, y0), (x1, y1) in zip(corners, corners[1:]):
        n = max(1, math.ceil(math.hypot(x1 - x0, y1 - y0) / step))
        for k in range(1, n + 1):
            t = k / n
            points.append((x0 + t * (x1 - x0), y0 + t * (y1 - y0)))
    return points


def stroke_order_key(stroke):
    x, y = stroke[0]
    return (y, x)


def make_templates(cfg: SynthesisConfig, rng: XorShift64Star):
    templates = []
    for _ in range(cfg.category_count):
        n_strokes = rng.randint(*cfg.stroke_count_range)
        strokes = [_template_stroke(rng) for _ in range(n_strokes)]
        strokes.sort(key=stroke_order_key)
        templates.append(strokes)
    return templates


def generate_synthetic(cfg: SynthesisConfig) -> list[InkSample]:
    """Multi-stroke glyph dataset on a 256x256 canvas.

    Each category owns a template of grid-aligned polylines in canonical
    order (top-to-bottom, then left-to-right by start point).  Samples are
    densified copies of the template with i.i.d. Gaussian jitter on every
    point.
    """
    cfg.validate()
    rng = XorShift64Star(cfg.seed)
    templates = make_templates(cfg, rng)
    samples = []
    for cat, template in enumerate(templates):
        label = f"c{cat:03d}"
        dense = [_densify(stroke) for stroke in template]
        for k in range(cfg.samples_per_category):
            strokes = []
            for stroke in dense:
                if cfg.jitter_std > 0:
                    stroke = [
                        (x + cfg.jitter_std * rng.normal(), y + cfg.jitter_std * rng.normal())
                        for x, y in stroke
                    ]
                strokes.append(list(stroke))
            samples.append(InkSample(f"{label}_{k:04d}", label, strokes))
    return samples


# --- splits --------------------------------------------------------------------------

def split_dataset(samples, train_fraction: float, seed: int = 0):
    """Deterministic shuffled split, stratified by label when every label
    has at least two samples."""
    if len(samples) < 2:
        raise ValueError("split_dataset needs at least 2 samples")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = XorShift64Star(seed)

    def shuffled(indices):
        indices = list(indices)
        for i in range(len(indices) - 1, 0, -1):
            j = rng.randint(0, i)
            indices[i], indices[j] = indices[j], indices[i]
        return indices

    by_label = {}
    for idx, sample in enumerate(samples):
        by_label.setdefault(sample.label, []).append(idx)

    train_idx, test_idx = [], []
    if all(len(group) >= 2 for group in by_label.values()):
        for label in sorted(by_label):
            group = shuffled(by_label[label])
            n_train = round(train_fraction * len(group))
            n_train = min(max(n_train, 1), len(group) - 1)
            train_idx += group[:n_train]
            test_idx += group[n_train:]
    else:
        order = shuffled(range(len(samples)))
        n_train = round(train_fraction * len(samples))
        if n_train == 0 or n_train == len(samples):
            raise ValueError(f"train_fraction {train_fraction} leaves an empty split")
        train_idx, test_idx = order[:n_train], order[n_train:]
    train_idx.sort()
    test_idx.sort()
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]
