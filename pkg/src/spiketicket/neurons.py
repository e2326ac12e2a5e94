"""Leaky integrate-and-fire neurons with explicit timestep unrolling.

    V'[n] = beta * V[n-1] + gamma * I[n]
    S[n]  = H(V'[n] - threshold)
    V[n]  = v_reset where S[n] == 1 else V'[n]      (hard reset)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import DEFAULT_SURROGATE, ShapeError, SurrogateConfig, Tensor


@dataclass(frozen=True)
class LifConfig:
    beta: float = 0.99
    gamma: float = 1.0
    threshold: float = 1.0
    v_reset: float = 0.0
    timesteps: int = 4
    surrogate: SurrogateConfig = field(default_factory=lambda: DEFAULT_SURROGATE)
    # reset path carries no gradient; turning it off makes the relaxed
    # network a smooth function, which is what gradient checks compare against
    detach_reset: bool = True

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if not self.v_reset < self.threshold:
            raise ValueError("v_reset must be below threshold")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")


@dataclass
class LifState:
    membrane: Tensor

    @classmethod
    def zeros(cls, shape) -> "LifState":
        return cls(Tensor(np.zeros(shape)))


def lif_step(state: LifState, current: Tensor, cfg: LifConfig) -> tuple[Tensor, LifState]:
    if state.membrane.shape != current.shape:
        raise ShapeError(f"lif_step: state {state.membrane.shape} vs input {current.shape}")
    v = tn.add(tn.scale(state.membrane, cfg.beta), tn.scale(current, cfg.gamma))
    spikes = tn.heaviside(v, cfg.threshold, cfg.surrogate)
    gate = spikes.detach() if cfg.detach_reset else spikes
    # V*(1-S) + v_reset*S
    keep = tn.add(v, tn.scale(tn.mul(v, gate), -1.0))
    if cfg.v_reset != 0.0:
        keep = tn.add(keep, tn.scale(gate, cfg.v_reset))
    return spikes, LifState(keep)


def lif_unroll(inputs: Sequence[Tensor], cfg: LifConfig) -> list[Tensor]:
    """Run ``len(inputs)`` steps from a zero membrane; returns per-step spikes."""
    if len(inputs) == 0:
        raise ValueError("lif_unroll needs at least one timestep")
    shape = inputs[0].shape
    if any(x.shape != shape for x in inputs):
        raise ShapeError("lif_unroll: all timestep inputs must share one shape")
    state = LifState.zeros(shape)
    out = []
    for x in inputs:
        s, state = lif_step(state, x, cfg)
        out.append(s)
    return out


def lif_sequence(x: Tensor, cfg: LifConfig) -> Tensor:
    """LIF over a time-major tensor ``[T, ...]``; returns stacked spikes."""
    if x.shape[0] == 1:
        s, _ = lif_step(LifState.zeros(x.shape[1:]), tn.reshape(x, x.shape[1:]), cfg)
        return tn.reshape(s, x.shape)
    return tn.stack(lif_unroll(tn.unstack(x, 0), cfg), axis=0)


def firing_rate(spikes: Sequence[Tensor] | Tensor) -> float:
    """Fraction of emitted spikes over all neurons and timesteps."""
    if isinstance(spikes, Tensor):
        arr = spikes.data
    else:
        arr = np.stack([s.data if isinstance(s, Tensor) else np.asarray(s) for s in spikes])
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("firing_rate expects binary spike tensors")
    return float(arr.sum() / arr.size) if arr.size else 0.0
