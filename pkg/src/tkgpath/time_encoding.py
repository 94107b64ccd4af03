"""Cosine random-Fourier time features and the fused relation-time embedding."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class TimeEncoder:
    """phi(t)_i = sqrt(1/d_t) * cos(omega_i * t + phase_i), omega and phase learnable."""

    def __init__(self, dim: int, rng: np.random.Generator | None = None):
        if dim <= 0:
            raise ValueError("time encoding dimension must be positive")
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.omega = ag.parameter(10.0 ** rng.uniform(-3.0, 0.0, size=dim), name="time.omega")
        self.phase = ag.parameter(rng.uniform(0.0, 2 * np.pi, size=dim), name="time.phase")

    def parameters(self) -> list[Tensor]:
        return [self.omega, self.phase]

    def named_parameters(self, prefix: str = "time") -> dict[str, Tensor]:
        return {f"{prefix}.omega": self.omega, f"{prefix}.phase": self.phase}

    def __call__(self, t) -> Tensor:
        """Features for a scalar or a 1-D batch of times: shape (d_t,) or (n, d_t)."""
        times = np.asarray(t, dtype=np.float64)
        if np.any(times < 0):
            raise ValueError("time must be non-negative")
        scalar = times.ndim == 0
        col = Tensor(times.reshape(-1, 1))
        arg = ag.add(ag.mul(col, self.omega), self.phase)
        out = ag.scale(_cos(arg), np.sqrt(1.0 / self.dim))
        return ag.reshape(out, (self.dim,)) if scalar else out

    def copy(self) -> "TimeEncoder":
        other = TimeEncoder.__new__(TimeEncoder)
        other.dim = self.dim
        other.omega = ag.parameter(self.omega.data.copy(), name="time.omega")
        other.phase = ag.parameter(self.phase.data.copy(), name="time.phase")
        return other


def _cos(a: Tensor) -> Tensor:
    x = a.data

    def bw(g):
        ag._accumulate(a, -g * np.sin(x))

    return ag._make(np.cos(x), (a,), "cos", bw)


def time_features(t, params: TimeEncoder) -> Tensor:
    return params(t)


class RelationTimeFusion:
    """h_{r,t} = W [h_r ; phi(t)] with W of shape (d_r, d_r + d_t)."""

    def __init__(self, d_r: int, d_t: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.d_r, self.d_t = d_r, d_t
        bound = np.sqrt(6.0 / (2 * d_r + d_t))
        self.weight = ag.parameter(rng.uniform(-bound, bound, size=(d_r, d_r + d_t)), name="fusion.weight")

    def parameters(self) -> list[Tensor]:
        return [self.weight]

    def named_parameters(self, prefix: str = "fusion") -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight}

    def __call__(self, h_r: Tensor, phi: Tensor) -> Tensor:
        """Row-batched or single-vector fusion."""
        h_r, phi = ag.as_tensor(h_r), ag.as_tensor(phi)
        if h_r.shape[-1] != self.d_r or phi.shape[-1] != self.d_t:
            raise ag.DimensionError(
                f"relation_time_embedding: got h_r {h_r.shape}, phi {phi.shape}; expected last dims {self.d_r}, {self.d_t}"
            )
        joined = ag.concat([h_r, phi], axis=-1 if h_r.ndim == 2 else 0)
        return ag.matmul(joined, ag.transpose(self.weight)) if joined.ndim == 2 else ag.matmul(self.weight, joined)


def relation_time_embedding(h_r, t, fusion: RelationTimeFusion, enc: TimeEncoder) -> Tensor:
    return fusion(h_r, enc(t))
