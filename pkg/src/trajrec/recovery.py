"""Free-running trajectory recovery from an offline image."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import InkSample, write_ink
from .ink import PEN_END, PEN_UP, START_RECORD, Trajectory
from .model import DecoderState, GmmStep, Model, _Decoder, _encode

DEFAULT_T_MAX = 100


@dataclass
class RecoveryConfig:
    t_max: int | None = None  # None: use the checkpoint's value
    mode: str = "greedy"
    temperature: float = 1.0
    seed: int = 0

    def validate(self):
        if self.t_max is not None and self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"unknown recovery mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class DecodeResult:
    trajectory: Trajectory
    truncated: bool
    points: list = field(default_factory=list)  # (x, y, pen) per step, normalized
    attention_maps: list = field(default_factory=list)

    def partial(self, t: int, side: int) -> Trajectory:
        """Trajectory emitted through step ``t`` (1-based)."""
        return group_strokes(self.points[:t], side)


def _tempered(log_probs, temperature):
    z = np.asarray(log_probs, dtype=np.float64) / temperature
    z = np.exp(z - z.max())
    return z / z.sum()


def select_point(step: GmmStep, cfg: RecoveryConfig, rng: np.random.Generator | None = None):
    """Pick the fed-back point ``(x, y, pen)`` from one step's outputs.

    Greedy takes the mean of the heaviest component and the most likely pen
    state.  Sampling draws a component and pen state from temperature-scaled
    distributions and a point from the component with covariance scaled by
    the temperature.  Coordinates are clamped to [0, 1].
    """
    s = step.numpy()
    if cfg.mode == "greedy":
        m = int(np.argmax(s.pi))
        x, y = float(s.mu_x[m]), float(s.mu_y[m])
        pen = int(np.argmax(s.pen))
    else:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        tau = cfg.temperature
        log_pi = s.log_pi if s.log_pi is not None else np.log(s.pi)
        log_pen = s.log_pen if s.log_pen is not None else np.log(s.pen)
        m = int(rng.choice(len(s.pi), p=_tempered(log_pi, tau)))
        z1, z2 = rng.standard_normal(2)
        scale = np.sqrt(tau)
        rho = float(s.rho[m])
        x = float(s.mu_x[m] + scale * s.sigma_x[m] * z1)
        y = float(s.mu_y[m] + scale * s.sigma_y[m] * (rho * z1 + np.sqrt(1.0 - rho * rho) * z2))
        pen = int(rng.choice(3, p=_tempered(log_pen, tau)))
    return min(max(x, 0.0), 1.0), min(max(y, 0.0), 1.0), pen


def group_strokes(points, side: int) -> Trajectory:
    strokes, current = [], []
    for x, y, pen in points:
        current.append((x * (side - 1), y * (side - 1)))
        if pen in (PEN_UP, PEN_END):
            strokes.append(current)
            current = []
    if current:
        strokes.append(current)
    return Trajectory(strokes)


def decode(image, model: Model, cfg: RecoveryConfig | None = None) -> DecodeResult:
    cfg = cfg or RecoveryConfig()
    cfg.validate()
    side = model.config.image_side
    image = np.asarray(image)
    if image.shape != (side, side):
        raise ValueError(f"image shape {image.shape} does not match model side {side}")
    t_max = cfg.t_max or model.t_max or DEFAULT_T_MAX
    rng = np.random.default_rng(cfg.seed)
    P = model.bind()
    dec = _Decoder(model, P, _encode(image[None].astype(model.dtype), model, P, training=False))
    state = DecoderState.zeros(model.config.lstm_size, 1, model.dtype)
    h, c = state.h, state.c
    x_prev = START_RECORD.astype(model.dtype)[None]
    points, maps = [], []
    truncated = True
    grid = model.config.grid
    for _ in range(t_max):
        h, c, amap = dec.step(x_prev, h, c)
        step = dec.head(h).index(0)
        x, y, pen = select_point(step, cfg, rng)
        points.append((x, y, pen))
        maps.append(amap.data[0].reshape(grid, grid).copy())
        if pen == PEN_END:
            truncated = False
            break
        x_prev = np.zeros((1, 5), dtype=model.dtype)
        x_prev[0, :2] = (x, y)
        x_prev[0, 2 + pen] = 1.0
    return DecodeResult(group_strokes(points, side), truncated, points, maps)


def recover(image, model: Model, cfg: RecoveryConfig | None = None) -> Trajectory:
    return decode(image, model, cfg).trajectory


def export_recovered(trajs, ids, labels, path, truncated=None) -> None:
    if not (len(trajs) == len(ids) == len(labels)):
        raise ValueError("trajs, ids and labels must have equal length")
    flags = truncated if truncated is not None else [False] * len(trajs)
    samples = [
        InkSample(sid, label, traj.to_lists(), {"truncated": bool(flag)})
        for traj, sid, label, flag in zip(trajs, ids, labels, flags)
    ]
    write_ink(samples, path)

