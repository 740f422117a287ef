"""CNN encoder, additive attention, LSTM decoder and GMM output head.

Parameters live in a flat ``name -> ndarray`` dict on :class:`Model`.  The
forward functions take an optional dict of bound :class:`Tensor` parameters
so the same code path serves inference and gradient computation.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .ink import START_RECORD, PaddedBatch
from .numerics import ops
from .numerics.ops import BatchNormState
from .numerics.tensor import Tensor, as_tensor

SIGMA_MIN, SIGMA_MAX = 1e-4, 1e4
RHO_SCALE = 0.99999
LOG_DENSITY_FLOOR = -30.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    image_side: int = 64
    conv_depths: tuple = (8, 32, 128, 256)
    lstm_size: int = 1024
    mixtures: int = 20
    attention_dim: int = 64
    leaky_slope: float = 0.01
    use_attention: bool = True
    # single-unit score path with the scoring vector fixed to 1
    literal_attention: bool = False

    def __post_init__(self):
        self.conv_depths = tuple(int(d) for d in self.conv_depths)
        if self.literal_attention:
            self.attention_dim = 1
        self.validate()

    def validate(self):
        if self.mixtures < 1:
            raise ValueError("mixtures must be >= 1")
        if len(self.conv_depths) != 4 or min(self.conv_depths) < 1:
            raise ValueError("conv_depths must hold 4 positive depths")
        if self.image_side <= 0 or self.image_side % 16:
            raise ValueError("image_side must be a positive multiple of 16")
        if self.lstm_size < 1 or self.attention_dim < 1:
            raise ValueError("lstm_size and attention_dim must be positive")

    @property
    def grid(self) -> int:
        return self.image_side // 16

    @property
    def feature_depth(self) -> int:
        return self.conv_depths[3]

    @property
    def head_size(self) -> int:
        return 6 * self.mixtures + 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_depths"] = list(self.conv_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


PRESETS = {
    "paper": {},
    "micro": {"conv_depths": (4, 8, 16, 32), "lstm_size": 128, "mixtures": 5},
}


def preset_config(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def param_shapes(cfg: ModelConfig) -> dict:
    d1, d2, d3, d4 = cfg.conv_depths
    hidden, att = cfg.lstm_size, cfg.attention_dim
    shapes = {}
    for k, (c_in, c_out) in enumerate([(1, d1), (d1, d2), (d2, d3), (d3, d4)], start=1):
        shapes[f"enc.conv{k}.weight"] = (c_out, c_in, 3, 3)
        shapes[f"enc.conv{k}.bias"] = (c_out,)
        if k in (2, 3):
            shapes[f"enc.bn{k}.gamma"] = (c_out,)
            shapes[f"enc.bn{k}.beta"] = (c_out,)
    if cfg.use_attention:
        shapes["att.U"] = (att, d4)
        shapes["att.V"] = (att, hidden)
        shapes["att.b"] = (att,)
        if not cfg.literal_attention:
            shapes["att.w"] = (att,)
    shapes["dec.lstm.weight"] = (4 * hidden, d4 + 5 + hidden)
    shapes["dec.lstm.bias"] = (4 * hidden,)
    shapes["head.weight"] = (cfg.head_size, hidden)
    shapes["head.bias"] = (cfg.head_size,)
    return shapes


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _fans(name, shape):
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    if name == "att.w":
        return shape[0], 1
    return shape[1], shape[0]


@dataclass
class Model:
    config: ModelConfig
    params: dict
    bn: dict = field(default_factory=dict)
    step: int = 0
    t_max: int | None = None

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith("gamma"):
                params[name] = np.ones(shape, dtype=dtype)
            elif name.endswith(("bias", "beta")) or name == "att.b":
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                params[name] = glorot_uniform(rng, shape, *_fans(name, shape), dtype)
        hidden = config.lstm_size
        params["dec.lstm.bias"][hidden:2 * hidden] = 1.0
        bn = {
            f"enc.bn{k}": BatchNormState.fresh(config.conv_depths[k - 1], dtype=dtype)
            for k in (2, 3)
        }
        return cls(config, params, bn)

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def bind(self, requires_grad: bool = False) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        other = self.copy()
        other.params = {k: v.astype(dtype) for k, v in other.params.items()}
        for state in other.bn.values():
            state.running_mean = state.running_mean.astype(dtype)
            state.running_var = state.running_var.astype(dtype)
        return other


@dataclass
class GmmStep:
    """Mixture parameters and pen-state probabilities for one or more steps.

    Fields are arrays or Tensors with a trailing mixture axis (``pen`` has a
    trailing axis of 3).  The ``log_*`` fields carry numerically safe
    log-space copies used by the losses.
    """

    pi: object
    mu_x: object
    mu_y: object
    sigma_x: object
    sigma_y: object
    rho: object
    pen: object
    log_pi: object = None
    log_sigma_x: object = None
    log_sigma_y: object = None
    log_pen: object = None

    def numpy(self) -> "GmmStep":
        return GmmStep(**{
            f.name: (getattr(self, f.name).data if isinstance(getattr(self, f.name), Tensor) else getattr(self, f.name))
            for f in fields(self)
        })

    def index(self, idx) -> "GmmStep":
        return GmmStep(**{
            f.name: (None if getattr(self, f.name) is None else getattr(self, f.name)[idx])
            for f in fields(self)
        })

    @property
    def mixtures(self) -> int:
        return self.pi.shape[-1]


@dataclass
class DecoderState:
    h: object
    c: object

    @property
    def query(self):
        return self.h

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None, dtype=np.float32) -> "DecoderState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))


# --- encoder --------------------------------------------------------------------

def _encode(images, model: Model, P: dict, training: bool) -> Tensor:
    cfg = model.config
    x = as_tensor(images)
    if x.shape[-1] != cfg.image_side or x.shape[-2] != cfg.image_side:
        raise ValueError(f"image side {x.shape[-1]} does not match model side {cfg.image_side}")
    if not isinstance(images, Tensor):
        x = Tensor(np.asarray(images, dtype=model.dtype))
    x = x.reshape(x.shape[0], 1, cfg.image_side, cfg.image_side)
    slope = cfg.leaky_slope
    for k in range(1, 5):
        x = ops.conv2d(x, P[f"enc.conv{k}.weight"], P[f"enc.conv{k}.bias"])
        if k in (2, 3):
            x = ops.batchnorm(x, P[f"enc.bn{k}.gamma"], P[f"enc.bn{k}.beta"], model.bn[f"enc.bn{k}"], training)
        x = ops.leaky_relu(x, slope)
        x = ops.maxpool2d(x)
    return ops.transpose(x, (0, 2, 3, 1))


def encode_image(image, model: Model, params: dict | None = None, training: bool = False) -> Tensor:
    """Global features ``(H_gf, W_gf, D_gf)`` for one image, or with a
    leading batch axis for a ``(B, side, side)`` stack."""
    P = model.bind() if params is None else params
    single = np.ndim(image.data if isinstance(image, Tensor) else image) == 2
    if single:
        image = image.reshape(1, *image.shape) if isinstance(image, Tensor) else np.asarray(image)[None]
    gf = _encode(image, model, P, training)
    return gf[0] if single else gf


# --- attention + decoder ------------------------------------------------------------

class _Decoder:
    """Per-image decoding context: feature projections are computed once."""

    def __init__(self, model: Model, P: dict, gf: Tensor):
        cfg = model.config
        self.model, self.P, self.cfg = model, P, cfg
        batch = gf.shape[0]
        self.features = gf.reshape(batch, -1, gf.shape[-1])
        self.keys = ops.linear(self.features, P["att.U"]) if cfg.use_attention else None

    def attend(self, query):
        feats = self.features
        batch, positions, _ = feats.shape
        if not self.cfg.use_attention:
            amap = Tensor(np.full((batch, positions), 1.0 / positions, dtype=feats.dtype))
            return amap, ops.mean(feats, axis=1)
        hidden = ops.relu(self.keys + ops.linear(query, self.P["att.V"], self.P["att.b"]).reshape(batch, 1, -1))
        if self.cfg.literal_attention:
            scores = hidden.reshape(batch, positions)
        else:
            scores = ops.linear(hidden, self.P["att.w"].reshape(1, -1)).reshape(batch, positions)
        amap = ops.softmax(scores, axis=-1)
        context = ops.matmul(amap.reshape(batch, 1, positions), feats).reshape(batch, -1)
        return amap, context

    def step(self, x_prev, h, c):
        amap, context = self.attend(h)
        x = ops.concat([context, as_tensor(x_prev)], axis=-1)
        hc = ops.lstm_cell(x, h, c, self.P["dec.lstm.weight"], self.P["dec.lstm.bias"])
        return hc[0], hc[1], amap

    def head(self, h):
        return head_transform(ops.linear(h, self.P["head.weight"], self.P["head.bias"]))


def _batched_features(gf, model):
    gf = as_tensor(gf)
    return gf.reshape(1, *gf.shape) if gf.ndim == 3 else gf


def attend(gf, query, model: Model, params: dict | None = None):
    """Attention map over the feature grid and the attention-weighted
    local context for a query (the previous LSTM output)."""
    P = model.bind() if params is None else params
    single = as_tensor(gf).ndim == 3
    gfb = _batched_features(gf, model)
    q = as_tensor(query)
    if q.ndim == 1:
        q = q.reshape(1, -1)
    amap, context = _Decoder(model, P, gfb).attend(q)
    amap = amap.reshape(gfb.shape[0], gfb.shape[1], gfb.shape[2])
    if single:
        return amap[0], context[0]
    return amap, context


def decoder_step(x_prev, gf, state: DecoderState, model: Model, params: dict | None = None):
    """One decoding step: returns ``(GmmStep, new DecoderState, attention map)``."""
    P = model.bind() if params is None else params
    single = as_tensor(gf).ndim == 3
    gfb = _batched_features(gf, model)
    x = np.asarray(x_prev.data if isinstance(x_prev, Tensor) else x_prev, dtype=model.dtype)
    h, c = as_tensor(state.h), as_tensor(state.c)
    if single:
        x, h, c = x.reshape(1, -1), h.reshape(1, -1), c.reshape(1, -1)
    dec = _Decoder(model, P, gfb)
    h, c, amap = dec.step(x, h, c)
    step = dec.head(h)
    amap = amap.reshape(gfb.shape[0], gfb.shape[1], gfb.shape[2])
    if single:
        return step.index(0), DecoderState(h[0], c[0]), amap[0]
    return step, DecoderState(h, c), amap


# --- GMM head ------------------------------------------------------------------------

def head_transform(raw, mixtures: int | None = None) -> GmmStep:
    """Split raw head outputs ``[pi | mu_x | mu_y | sigma_x | sigma_y | rho | pen]``
    into valid mixture parameters."""
    is_tensor = isinstance(raw, Tensor)
    raw = as_tensor(raw)
    width = raw.shape[-1]
    if (width - 3) % 6 or width < 9:
        raise ValueError(f"raw head output length {width} is not 6*M+3")
    m = (width - 3) // 6
    if mixtures is not None and m != mixtures:
        raise ValueError(f"raw head output length {width} != 6*{mixtures}+3")
    block = lambda k: raw[..., k * m:(k + 1) * m]  # noqa: E731
    log_sx = ops.clip(block(3), math.log(SIGMA_MIN), math.log(SIGMA_MAX))
    log_sy = ops.clip(block(4), math.log(SIGMA_MIN), math.log(SIGMA_MAX))
    pen_logits = raw[..., 6 * m:]
    step = GmmStep(
        pi=ops.softmax(block(0)),
        mu_x=block(1),
        mu_y=block(2),
        sigma_x=ops.exp(log_sx),
        sigma_y=ops.exp(log_sy),
        rho=ops.tanh(block(5)) * RHO_SCALE,
        pen=ops.softmax(pen_logits),
        log_pi=ops.log_softmax(block(0)),
        log_sigma_x=log_sx,
        log_sigma_y=log_sy,
        log_pen=ops.log_softmax(pen_logits),
    )
    return step if is_tensor else step.numpy()


def gmm_density(x, y, step: GmmStep):
    """Mixture density p(x, y); broadcasts over leading axes of ``step``."""
    s = step.numpy()
    x = np.asarray(x, dtype=np.float64)[..., None]
    y = np.asarray(y, dtype=np.float64)[..., None]
    sx, sy, rho = (np.asarray(v, dtype=np.float64) for v in (s.sigma_x, s.sigma_y, s.rho))
    zx = (x - s.mu_x) / sx
    zy = (y - s.mu_y) / sy
    one_minus = 1.0 - rho * rho
    quad = (zx * zx + zy * zy - 2.0 * rho * zx * zy) / one_minus
    normal = np.exp(-0.5 * quad) / (2.0 * np.pi * sx * sy * np.sqrt(one_minus))
    return (np.asarray(s.pi, dtype=np.float64) * normal).sum(axis=-1)


def gmm_log_density(x, y, step: GmmStep) -> Tensor:
    """log p(x, y) as a differentiable Tensor (log-sum-exp over components)."""
    dtype = as_tensor(step.mu_x).dtype
    x = Tensor(np.asarray(x, dtype=dtype)[..., None])
    y = Tensor(np.asarray(y, dtype=dtype)[..., None])
    log_sx = step.log_sigma_x if step.log_sigma_x is not None else ops.log(step.sigma_x)
    log_sy = step.log_sigma_y if step.log_sigma_y is not None else ops.log(step.sigma_y)
    log_pi = step.log_pi if step.log_pi is not None else ops.log(step.pi)
    zx = (x - step.mu_x) / step.sigma_x
    zy = (y - step.mu_y) / step.sigma_y
    one_minus = 1.0 - ops.square(step.rho)
    quad = (ops.square(zx) + ops.square(zy) - 2.0 * step.rho * zx * zy) / one_minus
    log_normal = -LOG_2PI - log_sx - log_sy - 0.5 * ops.log(one_minus) - 0.5 * quad
    return ops.logsumexp(log_pi + log_normal, axis=-1)


# --- losses -----------------------------------------------------------------------------

def _as_batch(targets) -> PaddedBatch:
    if isinstance(targets, PaddedBatch):
        return targets
    # a single PointSequence
    return PaddedBatch(targets.points[None], np.array([targets.n_real]))


def _leading(step: GmmStep, steps: int) -> GmmStep:
    if step.pi.shape[-2] == steps:
        return step
    return step.index((slice(None), slice(0, steps)))


def _batched_step(step: GmmStep) -> GmmStep:
    if step.pi.ndim == 3:
        return step
    return step.index((None,))


def loss_position(targets, steps: GmmStep) -> Tensor:
    """Mean negative log mixture density over each sequence's real points
    (log clamped at -30), averaged over the batch."""
    batch = _as_batch(targets)
    steps = _leading(_batched_step(steps), batch.steps)
    if np.any(batch.lengths > steps.pi.shape[-2]):
        raise ValueError("fewer decoder steps than real target points")
    log_p = ops.maximum(gmm_log_density(batch.points[..., 0], batch.points[..., 1], steps), LOG_DENSITY_FLOOR)
    t = np.arange(batch.steps)
    weights = (t[None, :] < batch.lengths[:, None]) / batch.lengths[:, None]
    weights = weights.astype(log_p.dtype)
    return -(log_p * weights).sum() / float(len(batch.lengths))


def loss_pen(targets, steps: GmmStep) -> Tensor:
    """Pen-state cross-entropy averaged over all T steps (padding included),
    then over the batch."""
    batch = _as_batch(targets)
    steps = _leading(_batched_step(steps), batch.steps)
    log_pen = steps.log_pen if steps.log_pen is not None else ops.log(steps.pen)
    onehot = batch.points[..., 2:].astype(as_tensor(log_pen).dtype)
    total = (as_tensor(log_pen) * onehot).sum()
    return -total / float(batch.steps * len(batch.lengths))


def loss_total(l_s, l_p):
    return l_s + l_p


# --- teacher-forced forward -------------------------------------------------------------

def decoder_inputs(batch: PaddedBatch, dtype=np.float32) -> np.ndarray:
    """Teacher-forcing inputs: the start record, then targets shifted by one."""
    b, t, _ = batch.points.shape
    inputs = np.empty((b, t, 5), dtype=dtype)
    inputs[:, 0] = START_RECORD
    inputs[:, 1:] = batch.points[:, :-1]
    return inputs


def forward_teacher_forced(images, batch: PaddedBatch, model: Model, params: dict | None = None,
                           training: bool = True):
    """Unroll the decoder over ``batch.steps`` with ground-truth feedback.

    Returns ``(steps, L, L_s, L_p)`` where ``steps`` is a GmmStep with
    ``(B, T, M)`` fields and the losses are batch means.
    """
    P = model.bind() if params is None else params
    gf = _encode(images, model, P, training)
    dec = _Decoder(model, P, gf)
    inputs = decoder_inputs(batch, model.dtype)
    b = inputs.shape[0]
    state = DecoderState.zeros(model.config.lstm_size, b, model.dtype)
    h, c = state.h, state.c
    outputs = []
    for t in range(batch.steps):
        h, c, _ = dec.step(inputs[:, t], h, c)
        outputs.append(h)
    steps = dec.head(ops.stack(outputs, axis=1))
    l_s = loss_position(batch, steps)
    l_p = loss_pen(batch, steps)
    return steps, loss_total(l_s, l_p), l_s, l_p
