"""Score-based ticket search with binarized weights and a per-layer gain term.

Weights stay frozen at their random initialisation.  Each prunable layer
gets a score per connection; the forward uses ``alpha * M * sign(W)`` and the
gradient reaching the hard mask is passed straight through to the scores.
Once per epoch the mask is rebuilt from the top-k scores of each layer.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as tn
from .layers import Prunable, Ticket, gain, kaiming_uniform
from .optim import SGD, Adam
from .tensor import Tensor

log = logging.getLogger(__name__)


class PruneError(RuntimeError):
    pass


def keep_count(ratio: float, n: int) -> int:
    """round-half-up of ``(1 - ratio) * n``, at least 1."""
    return max(1, math.floor((1.0 - ratio) * n + 0.5 + 1e-9))


@dataclass
class PruneState:
    layers: dict[str, Prunable]
    pa: float = 0.4
    eta: float = 0.1
    epochs: int = 10
    method: str = "adam"          # adam | sgd
    optimizer: Adam | SGD | None = field(default=None, repr=False)

    def make_optimizer(self):
        scores = [l.ticket.scores for l in self.layers.values()]
        if self.method == "sgd":
            return SGD(scores, lr=self.eta)
        if self.method == "adam":
            return Adam(scores, lr=self.eta)
        raise PruneError(f"unknown score optimiser {self.method!r}")

    def tickets(self) -> dict[str, Ticket]:
        return {n: l.ticket for n, l in self.layers.items()}

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for name, layer in self.layers.items():
            h.update(name.encode())
            h.update(layer.weight.data.tobytes())
        return h.hexdigest()


def init_prune(model, layer_filter: str = "all", seed: int = 0, binarize: bool = True,
               pa: float = 0.4, eta: float = 0.1, epochs: int = 10, reinit_weights: bool = True) -> PruneState:
    """Attach fresh tickets (scores U[0,1), full mask) to the selected layers."""
    layers = model.prunable_layers(layer_filter)
    if not layers:
        raise PruneError(f"layer filter {layer_filter!r} selects no layers")
    rng = np.random.default_rng(seed)
    for layer in layers:
        if reinit_weights:
            layer.weight.data = kaiming_uniform(rng, layer.weight.shape, layer.fan_in)
        layer.weight.requires_grad = False
        mask = np.ones(layer.weight.shape)
        scores = Tensor(rng.uniform(0.0, 1.0, size=layer.weight.shape), requires_grad=True,
                        name=layer.name + ".scores")
        layer.ticket = Ticket(scores, mask, gain(layer.weight.data, mask), binarize)
    return PruneState({l.name: l for l in layers}, pa=pa, eta=eta, epochs=epochs)


def effective_weights(state: PruneState, layer: str | Prunable) -> Tensor:
    if isinstance(layer, str):
        layer = state.layers[layer]
    with tn.no_grad():
        return layer.effective_weight()


def recompute_mask(state: PruneState, pa: float | None = None) -> PruneState:
    """Keep the top ``round((1-pa)*size)`` scores per layer; lower index wins ties."""
    pa = state.pa if pa is None else pa
    if not 0.0 <= pa < 1.0:
        raise PruneError(f"pruning ratio must lie in [0, 1), got {pa}")
    for layer in state.layers.values():
        t = layer.ticket
        flat = t.scores.data.reshape(-1)
        k = keep_count(pa, flat.size)
        order = np.argsort(-flat, kind="stable")
        mask = np.zeros(flat.size)
        mask[order[:k]] = 1.0
        t.mask = mask.reshape(t.scores.shape)
        t.alpha = gain(layer.weight.data, t.mask)
    return state


def sparsity(state: PruneState) -> dict[str, float]:
    return {n: 1.0 - float(l.ticket.mask.mean()) for n, l in state.layers.items()}


def _loss(model, xb, yb, T):
    return tn.cross_entropy(model(xb, T), yb)


def score_step(state: PruneState, model, xb, yb, eta: float | None = None, T: int | None = None,
               extra: tuple[list[Tensor], Adam] | None = None) -> float:
    """One optimiser step on the scores (and on ``extra`` params, if given); returns the loss."""
    scores = [l.ticket.scores for l in state.layers.values()]
    if state.optimizer is None:
        state.optimizer = state.make_optimizer()
    if eta is not None:
        state.optimizer.lr = eta
    extra_params = extra[0] if extra else []
    for p in scores + extra_params:
        p.grad = None
    with tn.Graph() as g:
        loss = _loss(model, xb, yb, T)
    value = loss.item()
    if not math.isfinite(value):
        raise PruneError(f"non-finite loss {value} (batch of {len(yb)}, graph of {len(g)} nodes)")
    tn.backward(g, loss)
    state.optimizer.step()
    if extra:
        extra[1].step()
    return value


def batches(n: int, batch_size: int, rng: np.random.Generator | None) -> Iterable[np.ndarray]:
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield idx[i:i + batch_size]


def evaluate(model, x: np.ndarray, y: np.ndarray, T: int | None = None, batch_size: int = 128) -> float:
    correct = 0
    with tn.no_grad():
        for sl in batches(len(y), batch_size, None):
            correct += int((model(x[sl], T).data.argmax(axis=1) == y[sl]).sum())
    return correct / len(y)


def search(model, x: np.ndarray, y: np.ndarray, pa: float = 0.4, epochs: int = 10, eta: float = 0.1,
           *, layer_filter: str = "all", seed: int = 0, batch_size: int = 32, T: int | None = None,
           binarize: bool = True, train_rest: bool = False, rest_lr: float = 1e-3,
           bn_recalibrate: bool = False, mask_every: str = "epoch", on_epoch: Callable[[int, dict], None] | None = None):
    """Run the ticket search; returns ``(model, state, history)``.

    With ``train_rest`` the weights outside the filter (and embeddings,
    biases) are trained densely alongside the scores.
    """
    if epochs < 1:
        raise PruneError("search needs at least one epoch")
    if mask_every not in ("epoch", "step"):
        raise PruneError(f"mask_every must be 'epoch' or 'step', got {mask_every!r}")
    state = init_prune(model, layer_filter, seed, binarize, pa, eta, epochs)
    extra = None
    if train_rest:
        pruned = {id(l.weight) for l in state.layers.values()}
        params = [t for _, t in model.named_tensors() if id(t) not in pruned]
        for p in params:
            p.requires_grad = True
        extra = (params, Adam(params, lr=rest_lr))
    rng = np.random.default_rng(seed + 1)
    model.calibrate(_chunks(x, batch_size * 4), T)
    history = []
    for epoch in range(epochs):
        losses = []
        for sl in batches(len(y), batch_size, rng):
            losses.append(score_step(state, model, x[sl], y[sl], T=T, extra=extra))
            if mask_every == "step":
                recompute_mask(state, pa)
        recompute_mask(state, pa)
        if bn_recalibrate:
            model.calibrate(_chunks(x, batch_size * 4), T)
        rec = {"epoch": epoch + 1, "loss": float(np.mean(losses)),
               "train_acc": evaluate(model, x, y, T)}
        history.append(rec)
        log.info("search epoch %d loss %.4f acc %.3f", rec["epoch"], rec["loss"], rec["train_acc"])
        if on_epoch:
            on_epoch(epoch, rec)
    for l in state.layers.values():
        l.ticket.scores.requires_grad = False
    if extra:
        for p in extra[0]:
            p.requires_grad = False
    return model, state, history


def _chunks(x: np.ndarray, size: int):
    return [x[i:i + size] for i in range(0, len(x), size)]
