"""Desk-scale CNN and spiking-transformer classifiers in ANN and SNN modes.

SNN activations are processed time-major, ``[T, B, ...]``: stateless layers
fold time into the batch axis, LIF layers unroll over the leading axis.  The
analog image drives the first convolution once and its output is replayed
as a constant current at every timestep (direct encoding).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Iterator, Protocol

import numpy as np

from . import tensor as tn
from .layers import BatchNorm, Conv2d, Linear, Prunable
from .neurons import LifConfig, lif_sequence
from .tensor import ShapeError, Tensor

ATTENTION_SCALE = 0.125


class Probe(Protocol):
    def observe(self, name: str, data: np.ndarray) -> None: ...


@dataclass(frozen=True)
class ModelConfig:
    family: str = "cnn-mini"              # cnn-mini | transformer-micro
    mode: str = "snn"                     # ann | snn
    input_shape: tuple[int, int, int] = (1, 16, 16)
    num_classes: int = 2
    lif: LifConfig = field(default_factory=LifConfig)
    binarize_activations: bool = False    # ann mode: sign instead of ReLU
    conv_channels: tuple[int, ...] = (16, 32, 32, 64)
    hidden: int = 128
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 2
    mlp_ratio: int = 2
    pep_channels: tuple[int, int] = (16, 32)
    pos_std: float = 0.02
    seed: int = 0

    @property
    def num_patches(self) -> int:
        _, h, w = self.input_shape
        for _ in self.pep_channels:
            h, w = tn.conv_output_size(h, 3, 2, 1), tn.conv_output_size(w, 3, 2, 1)
        return h * w

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "lif"}
        d["input_shape"] = list(self.input_shape)
        d["conv_channels"] = list(self.conv_channels)
        d["pep_channels"] = list(self.pep_channels)
        lif = self.lif
        d["lif"] = {"beta": lif.beta, "gamma": lif.gamma, "threshold": lif.threshold,
                    "v_reset": lif.v_reset, "timesteps": lif.timesteps,
                    "surrogate_width": lif.surrogate.width}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        lif = d.pop("lif", None)
        for k in ("input_shape", "conv_channels", "pep_channels"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        cfg = cls(**d)
        if lif:
            lif = dict(lif)
            width = lif.pop("surrogate_width", 1.0)
            cfg = replace(cfg, lif=LifConfig(surrogate=tn.SurrogateConfig(width=width), **lif))
        return cfg


@dataclass(frozen=True)
class LayerDescriptor:
    """Static description of one compute layer, for MAC counting."""

    name: str
    kind: str                  # conv | linear | attention-matmul
    c_in: int = 0
    c_out: int = 0
    k: int = 0
    h_out: int = 0
    w_out: int = 0
    d_in: int = 0
    d_out: int = 0
    rows: int = 1              # linear: vectors per sample (tokens)
    tokens_q: int = 0
    tokens_k: int = 0
    dim: int = 0
    mask_fraction: float = 1.0
    token_fraction: float = 1.0
    first: bool = False


class Model:
    cfg: ModelConfig

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    # -- activations

    def act(self, x: Tensor) -> Tensor:
        """Nonlinearity on a time-major tensor."""
        if self.cfg.mode == "snn":
            return lif_sequence(x, self.cfg.lif)
        if self.cfg.binarize_activations:
            return tn.sign_ste(x)
        return tn.relu(x)

    # -- enumeration

    def layers(self) -> list[Prunable]:
        raise NotImplementedError

    def prunable_layers(self, layer_filter: str = "all") -> list[Prunable]:
        layers = self.layers()
        if layer_filter in ("all", "", None):
            return layers
        if layer_filter == "convpep":
            return [l for l in layers if l.name.startswith("pep.")]
        prefixes = tuple(p.strip() for p in layer_filter.split(","))
        return [l for l in layers if l.name.startswith(prefixes)]

    def batchnorms(self) -> list[BatchNorm]:
        raise NotImplementedError

    def extra_parameters(self) -> dict[str, Tensor]:
        """Learnable tensors that are not layer weights (biases, embeddings)."""
        out = {}
        for l in self.layers():
            if isinstance(l, Linear) and l.bias is not None:
                out[l.bias.name] = l.bias
        return out

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for l in self.layers():
            yield l.name + ".weight", l.weight
        yield from self.extra_parameters().items()

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    def parameters(self, names=None) -> list[Tensor]:
        return [t for n, t in self.named_tensors() if names is None or n in names]

    # -- forward

    def forward(self, x, T: int | None = None, probe: Probe | None = None) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.cfg.input_shape):
            raise ShapeError(f"forward: batch {x.shape} does not match input shape {self.cfg.input_shape}")
        steps = (T or self.cfg.lif.timesteps) if self.cfg.mode == "snn" else 1
        out = self._forward(Tensor(x), steps, probe)   # [T, B, classes]
        return tn.mean(out, axis=0)

    __call__ = forward

    def _forward(self, x: Tensor, T: int, probe) -> Tensor:
        raise NotImplementedError

    def descriptors(self) -> list[LayerDescriptor]:
        raise NotImplementedError

    # -- helpers

    @staticmethod
    def _repeat(x: Tensor, T: int) -> Tensor:
        return tn.stack([x] * T, axis=0) if T > 1 else tn.reshape(x, (1,) + x.shape)

    @staticmethod
    def _fold(x: Tensor) -> Tensor:
        return tn.reshape(x, (x.shape[0] * x.shape[1],) + x.shape[2:])

    @staticmethod
    def _unfold(x: Tensor, T: int) -> Tensor:
        return tn.reshape(x, (T, x.shape[0] // T) + x.shape[1:])

    @staticmethod
    def _observe(probe, name: str, x: Tensor) -> None:
        if probe is not None:
            probe.observe(name, x.data)

    def calibrate(self, batches, T: int | None = None) -> None:
        """One pass of batch-norm statistics estimation."""
        bns = self.batchnorms()
        for bn in bns:
            bn.start_calibration()
        try:
            with tn.no_grad():
                for xb in batches:
                    self.forward(xb, T)
        finally:
            for bn in bns:
                bn.finish_calibration()

    def clone(self) -> "Model":
        return copy.deepcopy(self)


class CnnMini(Model):
    """conv x4 (stride 1,2,1,2) -> fc hidden -> fc classes (with bias)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        rng = np.random.default_rng(cfg.seed)
        c, h, w = cfg.input_shape
        strides = [1, 2, 1, 2]
        if len(cfg.conv_channels) != 4:
            raise ValueError("cnn-mini: conv_channels must list 4 widths")
        self.convs: list[Conv2d] = []
        self.bns: list[BatchNorm] = []
        self.hw: list[tuple[int, int]] = []
        for i, (cout, s) in enumerate(zip(cfg.conv_channels, strides)):
            conv = Conv2d(f"conv{i + 1}", c, cout, 3, s, 1, rng)
            h, w = conv.out_hw(h, w)
            if h < 1 or w < 1:
                raise ValueError(f"cnn-mini: layer conv{i + 1} collapses input {cfg.input_shape}")
            self.convs.append(conv)
            self.bns.append(BatchNorm(f"bn{i + 1}", cout))
            self.hw.append((h, w))
            c = cout
        self.flat = c * h * w
        self.fc1 = Linear("fc1", self.flat, cfg.hidden, rng=rng)
        self.bn_fc = BatchNorm("bn_fc1", cfg.hidden, axis=-1)
        self.fc2 = Linear("fc2", cfg.hidden, cfg.num_classes, bias=True, rng=rng)

    def layers(self):
        return [*self.convs, self.fc1, self.fc2]

    def batchnorms(self):
        return [*self.bns, self.bn_fc]

    def _forward(self, x, T, probe):
        conv1, rest = self.convs[0], self.convs[1:]
        h = self._repeat(self.bns[0](conv1(x)), T)
        s = self.act(h)
        for conv, bn in zip(rest, self.bns[1:]):
            self._observe(probe, conv.name, s)
            s = self.act(self._unfold(bn(conv(self._fold(s))), T))
        s = tn.reshape(s, (T, s.shape[1], -1))
        self._observe(probe, "fc1", s)
        s = self.act(self.bn_fc(self.fc1(s)))
        self._observe(probe, "fc2", s)
        return self.fc2(s)

    def descriptors(self):
        out = []
        c = self.cfg.input_shape[0]
        for i, (conv, (h, w)) in enumerate(zip(self.convs, self.hw)):
            out.append(LayerDescriptor(conv.name, "conv", c_in=c, c_out=conv.c_out, k=conv.k,
                                       h_out=h, w_out=w, mask_fraction=_mask_fraction(conv),
                                       first=i == 0))
            c = conv.c_out
        for fc in (self.fc1, self.fc2):
            out.append(LayerDescriptor(fc.name, "linear", d_in=fc.d_in, d_out=fc.d_out,
                                       mask_fraction=_mask_fraction(fc)))
        return out


def _mask_fraction(layer: Prunable) -> float:
    if layer.ticket is None:
        return 1.0
    return float(layer.ticket.mask.sum() / layer.ticket.mask.size)


class TransformerMicro(Model):
    """ConvPEP (2 stride-2 conv stages + 1x1 projection) -> spiking attention blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        if cfg.embed_dim % cfg.heads:
            raise ValueError(f"transformer-micro: embed_dim {cfg.embed_dim} not divisible by heads {cfg.heads}")
        rng = np.random.default_rng(cfg.seed)
        c, h, w = cfg.input_shape
        D = cfg.embed_dim
        self.pep: list[Conv2d] = []
        self.pep_bn: list[BatchNorm] = []
        self.pep_hw: list[tuple[int, int]] = []
        for i, cout in enumerate(cfg.pep_channels):
            conv = Conv2d(f"pep.conv{i + 1}", c, cout, 3, 2, 1, rng)
            h, w = conv.out_hw(h, w)
            if h < 1 or w < 1:
                raise ValueError(f"transformer-micro: layer pep.conv{i + 1} collapses input {cfg.input_shape}")
            self.pep.append(conv)
            self.pep_bn.append(BatchNorm(f"pep.bn{i + 1}", cout))
            self.pep_hw.append((h, w))
            c = cout
        self.proj = Conv2d("pep.proj", c, D, 1, 1, 0, rng)
        self.proj_bn = BatchNorm("pep.bn_proj", D)
        self.grid = (h, w)
        self.n_p = h * w
        if self.n_p != cfg.num_patches:
            raise ValueError(f"transformer-micro: ConvPEP yields {self.n_p} patches, config expects {cfg.num_patches}")
        self.pos = Tensor(rng.normal(0.0, cfg.pos_std, size=(self.n_p, D)), name="pos_embed")
        hidden = D * cfg.mlp_ratio
        self.blocks = []
        for b in range(cfg.blocks):
            p = f"block{b + 1}."
            self.blocks.append({
                "q": Linear(p + "q", D, D, rng=rng), "q_bn": BatchNorm(p + "q_bn", D, axis=-1),
                "k": Linear(p + "k", D, D, rng=rng), "k_bn": BatchNorm(p + "k_bn", D, axis=-1),
                "v": Linear(p + "v", D, D, rng=rng), "v_bn": BatchNorm(p + "v_bn", D, axis=-1),
                "o": Linear(p + "o", D, D, rng=rng), "o_bn": BatchNorm(p + "o_bn", D, axis=-1),
                "fc1": Linear(p + "mlp1", D, hidden, rng=rng), "fc1_bn": BatchNorm(p + "mlp1_bn", hidden, axis=-1),
                "fc2": Linear(p + "mlp2", hidden, D, rng=rng), "fc2_bn": BatchNorm(p + "mlp2_bn", D, axis=-1),
            })
        self.head = Linear("head", D, cfg.num_classes, bias=True, rng=rng)
        self.kept: np.ndarray | None = None

    def layers(self):
        out = [*self.pep, self.proj]
        for blk in self.blocks:
            out += [blk[k] for k in ("q", "k", "v", "o", "fc1", "fc2")]
        return out + [self.head]

    def batchnorms(self):
        out = [*self.pep_bn, self.proj_bn]
        for blk in self.blocks:
            out += [v for k, v in blk.items() if k.endswith("_bn")]
        return out

    def extra_parameters(self):
        out = super().extra_parameters()
        out["pos_embed"] = self.pos
        return out

    @property
    def tokens(self) -> int:
        return self.n_p if self.kept is None else len(self.kept)

    def patch_embed(self, x: Tensor, T: int, probe=None) -> Tensor:
        """ConvPEP output PatE, time-major ``[T, B, n_p, D]`` (before PosE)."""
        conv1 = self.pep[0]
        s = self.act(self._repeat(self.pep_bn[0](conv1(x)), T))
        for conv, bn in zip(self.pep[1:], self.pep_bn[1:]):
            self._observe(probe, conv.name, s)
            s = self.act(self._unfold(bn(conv(self._fold(s))), T))
        self._observe(probe, self.proj.name, s)
        e = self._unfold(self.proj_bn(self.proj(self._fold(s))), T)      # [T, B, D, h, w]
        e = tn.reshape(e, e.shape[:3] + (self.n_p,))
        return tn.transpose(e, (0, 1, 3, 2))

    def _forward(self, x, T, probe):
        pat = self.patch_embed(x, T, probe)
        pos = self.pos
        if self.kept is not None:
            pat = tn.take(pat, self.kept, axis=2)
            pos = tn.take(pos, self.kept, axis=0)
        z = tn.add(pat, pos)
        for blk in self.blocks:
            z = self._block(blk, z, T, probe)
        s = self.act(z)
        self._observe(probe, "head", s)
        pooled = tn.mean(s, axis=2)
        return self.head(pooled)

    def _block(self, blk, z, T, probe):
        cfg = self.cfg
        s = self.act(z)
        name = blk["q"].name.split(".")[0]
        for key in ("q", "k", "v"):
            self._observe(probe, blk[key].name, s)
        q = self.act(blk["q_bn"](blk["q"](s)))
        k = self.act(blk["k_bn"](blk["k"](s)))
        v = self.act(blk["v_bn"](blk["v"](s)))
        self._observe(probe, name + ".attn_qk", q)
        self._observe(probe, name + ".attn_v", v)
        a = self.act(spiking_attention(q, k, v, cfg.heads, strict=cfg.mode == "snn"))
        self._observe(probe, blk["o"].name, a)
        z = tn.add(z, blk["o_bn"](blk["o"](a)))
        s = self.act(z)
        self._observe(probe, blk["fc1"].name, s)
        h = self.act(blk["fc1_bn"](blk["fc1"](s)))
        self._observe(probe, blk["fc2"].name, h)
        return tn.add(z, blk["fc2_bn"](blk["fc2"](h)))

    def descriptors(self):
        out = []
        frac = self.tokens / self.n_p
        c = self.cfg.input_shape[0]
        for i, (conv, (h, w)) in enumerate(zip(self.pep, self.pep_hw)):
            out.append(LayerDescriptor(conv.name, "conv", c_in=c, c_out=conv.c_out, k=3, h_out=h, w_out=w,
                                       mask_fraction=_mask_fraction(conv), token_fraction=frac, first=i == 0))
            c = conv.c_out
        gh, gw = self.grid
        out.append(LayerDescriptor(self.proj.name, "conv", c_in=c, c_out=self.proj.c_out, k=1, h_out=gh,
                                   w_out=gw, mask_fraction=_mask_fraction(self.proj), token_fraction=frac))
        n, D = self.tokens, self.cfg.embed_dim
        for blk in self.blocks:
            name = blk["q"].name.split(".")[0]
            for key in ("q", "k", "v"):
                out.append(_linear_desc(blk[key], n))
            out.append(LayerDescriptor(name + ".attn_qk", "attention-matmul", tokens_q=n, tokens_k=n, dim=D))
            out.append(LayerDescriptor(name + ".attn_v", "attention-matmul", tokens_q=n, tokens_k=n, dim=D))
            for key in ("o", "fc1", "fc2"):
                out.append(_linear_desc(blk[key], n))
        out.append(_linear_desc(self.head, 1))
        return out


def _linear_desc(layer: Linear, rows: int) -> LayerDescriptor:
    return LayerDescriptor(layer.name, "linear", d_in=layer.d_in, d_out=layer.d_out, rows=rows,
                           mask_fraction=_mask_fraction(layer))


def spiking_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, scale: float = ATTENTION_SCALE,
                      strict: bool = True) -> Tensor:
    """Softmax-free attention ``(Q K^T) V * scale`` per head.

    Inputs are ``[..., n, D]``; with ``strict`` they must be binary spikes.
    """
    if strict:
        for nm, t in (("Q", q), ("K", k), ("V", v)):
            if not np.all((t.data == 0) | (t.data == 1)):
                raise ValueError(f"spiking_attention: {nm} is not binary")
    *lead, n, D = q.shape
    if D % heads:
        raise ShapeError(f"spiking_attention: dim {D} not divisible by {heads} heads")
    dh = D // heads
    nl = len(lead)

    def split(t):
        t = tn.reshape(t, tuple(lead) + (n, heads, dh))
        return tn.transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    qh, kh, vh = split(q), split(k), split(v)
    kt = tn.transpose(kh, tuple(range(nl + 1)) + (nl + 2, nl + 1))
    out = tn.scale(tn.matmul(tn.matmul(qh, kt), vh), scale)
    out = tn.transpose(out, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return tn.reshape(out, tuple(lead) + (n, D))


def build_model(cfg: ModelConfig) -> Model:
    if cfg.mode not in ("ann", "snn"):
        raise ValueError(f"unknown mode {cfg.mode!r}")
    if cfg.family == "cnn-mini":
        return CnnMini(cfg)
    if cfg.family == "transformer-micro":
        return TransformerMicro(cfg)
    raise ValueError(f"unknown model family {cfg.family!r}")
