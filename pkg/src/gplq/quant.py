"""Uniform symmetric fake quantization, calibration observers, and the
learned-step-size surrogate gradients.

The simulated quantizer is round-clamp-rescale:

    x_hat = clamp(round(x / s), qmin, qmax) * s

with qmin = -2**(b-1), qmax = 2**(b-1) - 1 and round half-away-from-zero.
The rounding mode is pinned because the grid-membership invariants depend
on it. Gradients through the quantizer use the straight-through estimator
for the input and the learned-step-size surrogate for the scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ndnum
from .rng import Rng, mix_seed

GRANULARITIES = ("per_tensor", "per_channel", "per_token")
OBSERVER_KINDS = ("minmax", "percentile")
SCALE_FLOOR = 1e-8
RESERVOIR_CAP = 1 << 20


@dataclass(frozen=True)
class QuantizerConfig:
    bits: int = 4
    granularity: str = "per_channel"
    axis: int = -1  # channel axis for per_channel, token axis for per_token
    role: str = "activation"
    lsq_grad_scale: bool = True

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.role not in ("activation", "weight"):
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1


@dataclass
class QuantizerState:
    """Learnable scale vector for one quantizer. Entries stay positive; the
    optimizer re-projects onto [SCALE_FLOOR, inf) after each step."""

    scale: np.ndarray
    frozen: bool = False
    learnable: bool = True

    def __post_init__(self):
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        if np.any(self.scale <= 0):
            raise ValueError("quantizer scale must be strictly positive")


def _slice_axis(cfg: QuantizerConfig, ndim: int) -> int:
    axis = cfg.axis % ndim
    return axis


def _expand_scale(state: QuantizerState, cfg: QuantizerConfig, ndim: int) -> np.ndarray:
    if cfg.granularity == "per_tensor":
        return state.scale.reshape((1,) * ndim)
    shape = [1] * ndim
    shape[_slice_axis(cfg, ndim)] = state.scale.shape[0]
    return state.scale.reshape(shape)


def round_half_away(t: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(t) + 0.5), t)


def fake_quantize(x, state: QuantizerState, cfg: QuantizerConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(state.scale <= 0):
        raise ValueError("quantizer scale must be strictly positive")
    s = _expand_scale(state, cfg, x.ndim)
    q = np.clip(round_half_away(x / s), cfg.qmin, cfg.qmax)
    return q * s


def ste_input_grad(x, upstream, state: QuantizerState, cfg: QuantizerConfig) -> np.ndarray:
    """Straight-through gradient for the quantizer input: pass upstream where
    x/s lies inside [qmin, qmax], zero where the clamp was active."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ValueError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    t = x / _expand_scale(state, cfg, x.ndim)
    mask = (t >= cfg.qmin) & (t <= cfg.qmax)
    return upstream * mask


def lsq_scale_grad(x, upstream, state: QuantizerState, cfg: QuantizerConfig) -> np.ndarray:
    """Learned-step-size gradient for the scale.

    Per element, with t = x/s:
        in range:  round(t) - t
        t < qmin:  qmin
        t > qmax:  qmax
    Contributions are summed per scale slice; when cfg.lsq_grad_scale is on,
    the slice sum is multiplied by 1/sqrt(n_slice * qmax). The factor only
    affects optimization dynamics, not any correctness contract.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if np.any(state.scale <= 0):
        raise ValueError("quantizer scale must be strictly positive")
    t = x / _expand_scale(state, cfg, x.ndim)
    g = round_half_away(t) - t
    g = np.where(t < cfg.qmin, float(cfg.qmin), g)
    g = np.where(t > cfg.qmax, float(cfg.qmax), g)
    contrib = upstream * g
    if cfg.granularity == "per_tensor":
        out = np.array([contrib.sum()])
    else:
        axis = _slice_axis(cfg, x.ndim)
        out = np.moveaxis(contrib, axis, 0).reshape(contrib.shape[axis], -1).sum(axis=1)
    if cfg.lsq_grad_scale:
        n_slice = x.size / out.size
        out = out / np.sqrt(n_slice * cfg.qmax)
    return out


def default_observer_kind(granularity: str, per_tensor_kind: str = "percentile") -> str:
    """Calibration default: percentile range for per-token statistics to damp
    outliers, direct min-max for per-channel, configurable for per-tensor."""
    if granularity == "per_channel":
        return "minmax"
    if granularity == "per_token":
        return "percentile"
    return per_tensor_kind


class Observer:
    """Accumulates activation statistics per scale slice.

    minmax keeps running extrema. percentile keeps a reservoir-sampled value
    buffer per slice (cap 2**20) and reads nearest-rank percentiles from it.
    """

    def __init__(self, kind: str = "minmax", granularity: str = "per_channel",
                 axis: int = -1, p_low: float = 0.01, p_high: float = 0.99,
                 cap: int = RESERVOIR_CAP, seed: int = 0):
        if kind not in OBSERVER_KINDS:
            raise ValueError(f"unknown observer kind {kind!r}")
        if granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {granularity!r}")
        self.kind = kind
        self.granularity = granularity
        self.axis = axis
        self.p_low = p_low
        self.p_high = p_high
        self.cap = cap
        self.observations = 0
        self._lo = None
        self._hi = None
        self._buffers: list[list[np.ndarray]] | None = None
        self._counts: np.ndarray | None = None
        self._rng = Rng(mix_seed(seed, 0x0B5E8), streams=256)

    def _rows(self, x: np.ndarray) -> np.ndarray:
        if self.granularity == "per_tensor":
            return x.reshape(1, -1)
        axis = self.axis % x.ndim
        return np.moveaxis(x, axis, 0).reshape(x.shape[axis], -1)

    def observe(self, x) -> "Observer":
        x = np.asarray(x, dtype=np.float64)
        ndnum.ensure_finite("observed activations", x)
        rows = self._rows(x)
        n_slices = rows.shape[0]
        if self.kind == "minmax":
            lo = rows.min(axis=1)
            hi = rows.max(axis=1)
            if self._lo is None:
                self._lo, self._hi = lo, hi
            else:
                if self._lo.shape != lo.shape:
                    raise ValueError("slice count changed between observations")
                self._lo = np.minimum(self._lo, lo)
                self._hi = np.maximum(self._hi, hi)
        else:
            if self._buffers is None:
                self._buffers = [[] for _ in range(n_slices)]
                self._counts = np.zeros(n_slices, dtype=np.int64)
            if len(self._buffers) != n_slices:
                raise ValueError("slice count changed between observations")
            for i in range(n_slices):
                self._reservoir_append(i, rows[i])
        self.observations += 1
        return self

    def _reservoir_append(self, i: int, vals: np.ndarray):
        seen = int(self._counts[i])
        held = sum(len(b) for b in self._buffers[i])
        room = self.cap - held
        take = min(room, vals.size)
        if take > 0:
            self._buffers[i].append(vals[:take].copy())
            held += take
        rest = vals[take:]
        if rest.size:
            # reservoir-style replacement for the overflow, vectorized:
            # each overflow item lands at a random position over its prefix
            # and is kept only when that position falls inside the buffer.
            if len(self._buffers[i]) > 1:
                self._buffers[i] = [np.concatenate(self._buffers[i])]
            buf = self._buffers[i][0]
            pos = seen + take + np.arange(rest.size, dtype=np.int64)
            slots = self._rng.raw(rest.size) % (pos + 1).astype(np.uint64)
            slots = slots.astype(np.int64)
            keep = slots < self.cap
            buf[slots[keep]] = rest[keep]
        self._counts[i] = seen + vals.size

    def range_per_slice(self) -> tuple[np.ndarray, np.ndarray]:
        """(lo, hi) per slice from the accumulated statistics."""
        if self.observations == 0:
            raise ValueError("observer has seen no data")
        if self.kind == "minmax":
            return self._lo.copy(), self._hi.copy()
        lo = np.empty(len(self._buffers))
        hi = np.empty(len(self._buffers))
        for i, chunks in enumerate(self._buffers):
            vals = np.concatenate(chunks) if len(chunks) != 1 else chunks[0]
            lo[i] = ndnum.percentile_nearest_rank(vals, self.p_low)
            hi[i] = ndnum.percentile_nearest_rank(vals, self.p_high)
        return lo, hi


def init_scale(obs: Observer, cfg: QuantizerConfig) -> QuantizerState:
    """Symmetric scale from the observed range: s = max(|lo|, |hi|) / qmax,
    floored at SCALE_FLOOR per slice."""
    lo, hi = obs.range_per_slice()
    s = np.maximum(np.maximum(np.abs(lo), np.abs(hi)) / cfg.qmax, SCALE_FLOOR)
    return QuantizerState(scale=s, frozen=False, learnable=(cfg.role == "activation"))


def weight_scale(w: np.ndarray, cfg: QuantizerConfig, observer_kind: str = "minmax",
                 p: float = 0.99) -> QuantizerState:
    """Scale for a weight matrix, per output channel by default.

    Weights are fully visible, so min-max is read straight off the tensor;
    a percentile variant is available for outlier clipping.
    """
    w = np.asarray(w, dtype=np.float64)
    if cfg.granularity == "per_tensor":
        rows = w.reshape(1, -1)
    else:
        axis = cfg.axis % w.ndim
        rows = np.moveaxis(w, axis, 0).reshape(w.shape[axis], -1)
    if observer_kind == "minmax":
        amax = np.abs(rows).max(axis=1)
    else:
        amax = np.array([
            max(abs(ndnum.percentile_nearest_rank(r, 1.0 - p)),
                abs(ndnum.percentile_nearest_rank(r, p)))
            for r in rows
        ])
    s = np.maximum(amax / cfg.qmax, SCALE_FLOOR)
    return QuantizerState(scale=s, frozen=True, learnable=False)


def quantize_weight(w: np.ndarray, cfg: QuantizerConfig,
                    observer_kind: str = "minmax") -> tuple[QuantizerState, np.ndarray]:
    """Symmetric fake quantization of a weight matrix; returns (state, values)."""
    state = weight_scale(w, cfg, observer_kind)
    return state, fake_quantize(w, state, cfg)


def freeze(state: QuantizerState) -> QuantizerState:
    state.frozen = True
    return state


def clone_config(cfg: QuantizerConfig, **changes) -> QuantizerConfig:
    return replace(cfg, **changes)
