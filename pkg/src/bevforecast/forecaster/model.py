"""Encoder / ConvLSTM / decoder forecaster in its INFER and INFER-Skip variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor

VARIANTS = ("infer", "infer-skip")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and sequence settings.

    Each encoder block is conv3x3 + ReLU, followed by 2x2 max pooling when its
    ``encoder_pool`` flag is set. The decoder has one stage per pooled block
    (deepest first): bilinear x2, concatenate the skip feature, conv3x3 + ReLU.
    A 1x1 conv and a sigmoid produce the heatmap.
    """

    variant: str = "infer-skip"
    input_side: int = 256
    in_channels: int = 5
    encoder_channels: tuple = (16, 32, 64, 64)
    encoder_pool: tuple = (False, True, True, True)
    lstm_filters: int = 64
    lstm_kernel: int = 3
    decoder_channels: tuple = (32, 16, 8)
    skip_lstms: int | None = None  # None: 0 for infer, 2 for infer-skip
    lambda_safe: float = 0.1
    precondition_frames: int = 20
    bptt_window: int = 20
    target_sigma_cells: float = 2.0
    head_prior: bool = True  # head bias at the logit of the blob's mean occupancy
    loss_reduction: str = "sample"  # mse normalization, see autodiff.mse_loss
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "encoder_pool", tuple(bool(p) for p in self.encoder_pool))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.encoder_channels) != len(self.encoder_pool):
            raise ValueError("encoder_channels and encoder_pool must have equal length")
        pools = sum(self.encoder_pool)
        if len(self.decoder_channels) != pools:
            raise ValueError(f"decoder needs one stage per pooled block: {pools} pools, {len(self.decoder_channels)} stages")
        if self.input_side % (2**pools):
            raise ValueError(f"input side {self.input_side} not divisible by 2^{pools}")
        if self.n_skip_lstms > pools:
            raise ValueError(f"{self.n_skip_lstms} skip LSTMs requested but only {pools} skip connections exist")
        if self.variant == "infer" and self.n_skip_lstms:
            raise ValueError("variant 'infer' has no skip LSTMs")
        if self.lstm_kernel % 2 == 0:
            raise ValueError("lstm_kernel must be odd")
        if self.loss_reduction not in ("sample", "elements"):
            raise ValueError("loss_reduction must be 'sample' or 'elements'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def n_skip_lstms(self) -> int:
        if self.skip_lstms is not None:
            return self.skip_lstms
        return 2 if self.variant == "infer-skip" else 0

    @property
    def bottleneck_side(self) -> int:
        return self.input_side // 2 ** sum(self.encoder_pool)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("encoder_channels", "encoder_pool", "decoder_channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @classmethod
    def micro(cls, variant: str = "infer-skip", side: int = 64, **kw) -> "ModelConfig":
        """Desk-scale ladder: four pooled blocks, bottleneck ``16 x side/16 x side/16``."""
        base = dict(
            variant=variant,
            input_side=side,
            encoder_channels=(4, 8, 16, 16),
            encoder_pool=(True, True, True, True),
            lstm_filters=16,
            decoder_channels=(16, 8, 8, 4),
        )
        base.update(kw)
        return cls(**base)


@dataclass
class Model:
    cfg: ModelConfig
    params: dict = field(default_factory=dict)

    @property
    def np_dtype(self):
        return np.dtype(self.cfg.dtype)

    @property
    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # -- structure ---------------------------------------------------------

    def _pooled_blocks(self):
        return [i for i, p in enumerate(self.cfg.encoder_pool) if p]

    def skip_shapes(self):
        """``(channels, side)`` of each skip feature, deepest first."""
        side = self.cfg.input_side
        shapes = []
        for ch, pool in zip(self.cfg.encoder_channels, self.cfg.encoder_pool):
            if pool:
                shapes.append((ch, side))
                side //= 2
        return shapes[::-1]

    def initial_state(self, batch: int = 1) -> dict:
        cfg = self.cfg
        b = cfg.bottleneck_side
        dt = self.np_dtype
        state = {"lstm": (np.zeros((batch, cfg.lstm_filters, b, b), dt),) * 2}
        for j, (ch, side) in enumerate(self.skip_shapes()[: cfg.n_skip_lstms]):
            state[f"skip{j}"] = (np.zeros((batch, ch, side, side), dt),) * 2
        return {k: (Tensor(h), Tensor(c)) for k, (h, c) in state.items()}

    def step(self, x, state: dict, trace: dict | None = None):
        """One forward step on an ``(N, C, side, side)`` input.

        Returns ``(heatmap, new_state)``; ``heatmap`` is ``(N, 1, side, side)``.
        When ``trace`` is a dict it receives intermediate activation shapes.
        """
        cfg = self.cfg
        P = self.params
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.np_dtype))
        if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_side, cfg.input_side):
            raise ValueError(
                f"input shape {x.shape} does not match (N, {cfg.in_channels}, {cfg.input_side}, {cfg.input_side})"
            )
        skips = []
        h = x
        for i, pool in enumerate(cfg.encoder_pool):
            h = ad.relu(ad.conv2d(h, P[f"enc{i}.w"], P[f"enc{i}.b"]))
            if pool:
                skips.append(h)
                h = ad.maxpool2(h)
        skips = skips[::-1]
        if trace is not None:
            trace["encoder"] = h.shape[1:]
        new_state = {}
        out, new_state["lstm"] = ad.conv_lstm_step(h, state["lstm"], P["lstm.w"], P["lstm.b"])
        if trace is not None:
            trace["bottleneck"] = out.shape[1:]
        for j in range(cfg.n_skip_lstms):
            hj, new_state[f"skip{j}"] = ad.conv_lstm_step(skips[j], state[f"skip{j}"], P[f"skip{j}.w"], P[f"skip{j}.b"])
            skips[j] = skips[j] + hj
        y = out
        for j, skip in enumerate(skips):
            y = ad.bilinear_up2(y)
            y = ad.concat([y, skip], axis=1)
            y = ad.relu(ad.conv2d(y, P[f"dec{j}.w"], P[f"dec{j}.b"]))
        if trace is not None:
            trace["decoder"] = y.shape[1:]
        heat = ad.sigmoid(ad.conv2d(y, P["head.w"], P["head.b"], pad=0))
        if trace is not None:
            trace["head"] = heat.shape[1:]
        return heat, new_state

    # -- parameters --------------------------------------------------------

    def state_dict(self) -> dict:
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, arrays: dict):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise ValueError(f"parameter {k!r} has shape {a.shape}, model expects {p.shape}")
            p.data = a.astype(self.np_dtype).copy()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}

    def copy(self, dtype: str | None = None) -> "Model":
        cfg = replace(self.cfg, dtype=dtype) if dtype else self.cfg
        m = Model(cfg, {k: Tensor(p.data.astype(cfg.dtype).copy(), requires_grad=True, name=k) for k, p in self.params.items()})
        return m

    def mirrored(self) -> "Model":
        """Row-reflected twin: every kernel flipped along its height axis.

        For any input ``x``, ``mirrored().step(flip(x))`` equals ``flip(step(x))``.
        """
        m = self.copy()
        for k, p in m.params.items():
            if p.data.ndim == 4:
                p.data = np.ascontiguousarray(p.data[:, :, ::-1, :])
        return m


def _conv_param(rng, f, c, k, gain, dtype):
    fan_in = c * k * k
    w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(f, c, k, k)).astype(dtype)
    return w, np.zeros(f, dtype=dtype)


def head_prior_logit(cfg: ModelConfig) -> float:
    """Logit of the fraction of the heatmap a unit-peak target blob occupies.

    Starting the sigmoid near the true background level keeps the sparse
    target from being swamped while every cell is pulled down from 0.5.
    """
    mass = 2.0 * np.pi * cfg.target_sigma_cells**2
    q = min(mass / cfg.input_side**2, 0.5)
    return float(np.log(q / (1.0 - q)))


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Fresh model: fan-in scaled normal weights, zero biases except the head prior."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)
    arrays = {}
    c = cfg.in_channels
    for i, ch in enumerate(cfg.encoder_channels):
        arrays[f"enc{i}.w"], arrays[f"enc{i}.b"] = _conv_param(rng, ch, c, 3, 2.0, dt)
        c = ch
    k = cfg.lstm_kernel
    F = cfg.lstm_filters
    arrays["lstm.w"], arrays["lstm.b"] = _conv_param(rng, 4 * F, c + F, k, 1.0, dt)
    m = Model(cfg)
    skip_shapes = m.skip_shapes()
    for j in range(cfg.n_skip_lstms):
        ch = skip_shapes[j][0]
        arrays[f"skip{j}.w"], arrays[f"skip{j}.b"] = _conv_param(rng, 4 * ch, 2 * ch, k, 1.0, dt)
    prev = F
    for j, (out_ch, (skip_ch, _)) in enumerate(zip(cfg.decoder_channels, skip_shapes)):
        arrays[f"dec{j}.w"], arrays[f"dec{j}.b"] = _conv_param(rng, out_ch, prev + skip_ch, 3, 2.0, dt)
        prev = out_ch
    arrays["head.w"], arrays["head.b"] = _conv_param(rng, 1, prev, 1, 1.0, dt)
    if cfg.head_prior:
        arrays["head.b"][:] = head_prior_logit(cfg)
    m.params = {name: Tensor(a, requires_grad=True, name=name) for name, a in arrays.items()}
    return m


def shape_table(cfg: ModelConfig) -> dict:
    """Activation shapes (without batch) from one forward pass on zeros."""
    m = build_model(cfg, 0)
    trace = {"input": (cfg.in_channels, cfg.input_side, cfg.input_side)}
    x = np.zeros((1, cfg.in_channels, cfg.input_side, cfg.input_side), dtype=cfg.dtype)
    m.step(x, m.initial_state(1), trace=trace)
    return trace
