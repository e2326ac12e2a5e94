"""Theoretical energy of spiking vs. dense models on 45 nm hardware.

One FLOP here means one multiply-accumulate.  The spiking total charges the
first convolution (which sees analog pixels) at MAC cost and every other
conv / linear layer at accumulate cost per synaptic operation,
``SOPs = fr * T * FLOPs``.  Attention products are reported on their own line
and kept out of the conv/linear total.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .models import LayerDescriptor

E_MAC = 4.6e-12
E_AC = 0.9e-12


def layer_flops(d: LayerDescriptor, dense: bool = False) -> float:
    """MACs per sample; masks and patch pruning scale the count unless ``dense``."""
    if d.kind == "conv":
        base = d.c_out * d.c_in * d.k * d.k * d.h_out * d.w_out
    elif d.kind == "linear":
        base = d.d_in * d.d_out * d.rows
    elif d.kind == "attention-matmul":
        base = d.tokens_q * d.tokens_k * d.dim
    else:
        raise ValueError(f"unknown layer kind {d.kind!r} for {d.name}")
    if dense:
        return float(base)
    return base * d.mask_fraction * d.token_fraction


@dataclass
class LayerProfile:
    name: str
    kind: str
    flops: float
    dense_flops: float
    fr: float | None
    T: int
    sops: float
    joules: float
    first: bool = False


@dataclass
class EnergyReport:
    layers: list[LayerProfile]
    T: int
    e_mac: float = E_MAC
    e_ac: float = E_AC
    total_snn: float = 0.0
    total_ann: float = 0.0
    attention_snn: float = 0.0
    attention_ann: float = 0.0
    savings: float = field(default=0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "kind", "flops", "dense_flops", "fr", "T", "sops", "joules"])
        for p in self.layers:
            w.writerow([p.name, p.kind, repr(p.flops), repr(p.dense_flops),
                        "" if p.fr is None else repr(p.fr), p.T, repr(p.sops), repr(p.joules)])
        return buf.getvalue()


class FiringProbe:
    """Accumulates per-layer input spike counts during forward passes."""

    def __init__(self):
        self.spikes: dict[str, float] = {}
        self.elements: dict[str, int] = {}
        self.analog: set[str] = set()

    def observe(self, name: str, data: np.ndarray) -> None:
        if not np.all((data == 0) | (data == 1)):
            self.analog.add(name)
            return
        self.spikes[name] = self.spikes.get(name, 0.0) + float(data.sum())
        self.elements[name] = self.elements.get(name, 0) + data.size

    def rates(self) -> dict[str, float]:
        return {n: self.spikes[n] / self.elements[n] for n in self.spikes if n not in self.analog}


def profile_firing(model, batches, T: int | None = None) -> dict[str, float]:
    """Input firing rate of every spike-driven layer over the calibration data.

    Each observed tensor is ``[T, B, ...]``, so the rate is spikes divided by
    elements x timesteps x samples.
    """
    if model.cfg.mode != "snn":
        raise ValueError("firing rates are undefined for an ann-mode model")
    probe = FiringProbe()
    with tn.no_grad():
        for xb in batches:
            model.forward(xb, T, probe=probe)
    return probe.rates()


def estimate(descriptors: list[LayerDescriptor], fr: dict[str, float], T: int) -> EnergyReport:
    profiles = []
    conv_fc_snn = attn_snn = ann = attn_ann = 0.0
    for d in descriptors:
        flops = layer_flops(d)
        if d.first:
            sops, rate, joules = 0.0, None, E_MAC * flops
        else:
            if d.name not in fr:
                raise KeyError(f"no firing rate for layer {d.name!r}")
            rate = fr[d.name]
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"firing rate {rate} of {d.name!r} outside [0, 1]")
            sops = rate * T * flops
            joules = E_AC * sops
        if d.kind == "attention-matmul":
            attn_snn += joules
            attn_ann += E_MAC * flops
        else:
            conv_fc_snn += joules
            ann += E_MAC * flops
        profiles.append(LayerProfile(d.name, d.kind, flops, layer_flops(d, dense=True), rate, T, sops,
                                     joules, d.first))
    return EnergyReport(profiles, T, total_snn=conv_fc_snn, total_ann=ann, attention_snn=attn_snn,
                        attention_ann=attn_ann, savings=ann / conv_fc_snn if conv_fc_snn else float("inf"))


def model_energy(model, batches, T: int | None = None) -> EnergyReport:
    T = T or model.cfg.lif.timesteps
    return estimate(model.descriptors(), profile_firing(model, batches, T), T)


def ann_energy(model) -> float:
    """Dense-ANN energy of the model's conv/linear layers (MAC cost throughout)."""
    return E_MAC * sum(layer_flops(d) for d in model.descriptors() if d.kind != "attention-matmul")
