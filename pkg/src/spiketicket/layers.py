"""Parameterised building blocks shared by the model zoo and the pruners."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Ticket:
    """Pruning bundle for one layer: frozen W (owned by the layer), scores, mask, gain."""

    scores: Tensor
    mask: np.ndarray
    alpha: float
    binarize: bool = True


def gain(weight: np.ndarray, mask: np.ndarray) -> float:
    kept = mask.sum()
    if kept == 0:
        raise ValueError("gain term undefined for an empty mask")
    return float(np.abs(mask * weight).sum() / kept)


def _mask_passthrough(scores: Tensor, mask: np.ndarray) -> Tensor:
    # forward is the hard mask, backward routes the gradient to the scores
    return tn.custom_op(mask, (scores,), lambda g: (g,), "mask_ste")


class Prunable:
    """Mixin for weight-bearing layers that may carry a :class:`Ticket`."""

    name: str
    weight: Tensor
    ticket: Ticket | None = None

    def effective_weight(self) -> Tensor:
        t = self.ticket
        if t is None:
            return self.weight
        if t.scores.requires_grad:
            m = _mask_passthrough(t.scores, t.mask)
        else:
            m = Tensor(t.mask)
        if t.binarize:
            if self.weight.requires_grad:
                base = tn.sign_ste(self.weight)
            else:
                base = Tensor(np.where(self.weight.data >= 0, 1.0, -1.0))
            return tn.mul(tn.scale(base, t.alpha), m)
        return tn.mul(self.weight, m)

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight.shape[1:]))


class Conv2d(Prunable):
    def __init__(self, name: str, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None):
        self.name = name
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding = stride, padding
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k), name=name)
        self.ticket = None

    def __call__(self, x: Tensor) -> Tensor:
        return tn.conv2d(x, self.effective_weight(), stride=self.stride, padding=self.padding)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (tn.conv_output_size(h, self.k, self.stride, self.padding),
                tn.conv_output_size(w, self.k, self.stride, self.padding))


class Linear(Prunable):
    def __init__(self, name: str, d_in: int, d_out: int, bias: bool = False,
                 rng: np.random.Generator | None = None):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(kaiming_uniform(rng, (d_out, d_in), d_in), name=name)
        self.bias = Tensor(np.zeros(d_out), name=name + ".bias") if bias else None
        self.ticket = None

    def __call__(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.effective_weight(), self.bias)


class BatchNorm:
    """Static batch norm: frozen running statistics, no affine parameters.

    With ``calibrating`` set, normalises by batch statistics and accumulates
    them; :meth:`finish_calibration` freezes the averages.
    """

    def __init__(self, name: str, channels: int, axis: int = 1, eps: float = 1e-5):
        self.name = name
        self.axis = axis
        self.eps = eps
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.calibrating = False
        self._acc: list[tuple[np.ndarray, np.ndarray, int]] = []

    def _reduce_axes(self, ndim: int) -> tuple[int, ...]:
        ax = self.axis % ndim
        return tuple(i for i in range(ndim) if i != ax)

    def __call__(self, x: Tensor) -> Tensor:
        if self.calibrating:
            axes = self._reduce_axes(x.data.ndim)
            m = x.data.mean(axis=axes)
            sq = (x.data ** 2).mean(axis=axes)
            n = x.size // len(m)
            self._acc.append((m, sq, n))
            return tn.batchnorm_static(x, m, np.maximum(sq - m ** 2, 0.0), self.eps, self.axis)
        return tn.batchnorm_static(x, self.mean, self.var, self.eps, self.axis)

    def start_calibration(self) -> None:
        self.calibrating = True
        self._acc = []

    def finish_calibration(self) -> None:
        self.calibrating = False
        if not self._acc:
            return
        total = sum(n for _, _, n in self._acc)
        m = sum(mi * n for mi, _, n in self._acc) / total
        sq = sum(si * n for _, si, n in self._acc) / total
        self.mean = m
        self.var = np.maximum(sq - m ** 2, 0.0)
        self._acc = []
