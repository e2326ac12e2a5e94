"""Dense weight training and post-search fine-tuning."""
from __future__ import annotations

import logging
import math
from typing import Callable

import numpy as np

from . import tensor as tn
from .layers import gain
from .optim import Adam
from .pruner import PruneError, PruneState, _chunks, batches, evaluate

log = logging.getLogger(__name__)


def _epoch(model, params, opt, x, y, batch_size, rng, T) -> float:
    losses = []
    for sl in batches(len(y), batch_size, rng):
        for p in params:
            p.grad = None
        with tn.Graph() as g:
            loss = tn.cross_entropy(model(x[sl], T), y[sl])
        value = loss.item()
        if not math.isfinite(value):
            raise PruneError(f"non-finite loss {value}")
        tn.backward(g, loss)
        opt.step()
        losses.append(value)
    return float(np.mean(losses))


def train_dense(model, x, y, epochs: int = 10, lr: float = 1e-3, *, seed: int = 0, batch_size: int = 32,
                T: int | None = None, bn_recalibrate: bool = False,
                on_epoch: Callable[[int, dict], None] | None = None) -> list[dict]:
    """Ordinary weight training of every parameter (the dense baseline).

    Batch-norm statistics are estimated once up front and then act as a
    fixed affine map, the same treatment the ticket search gets.
    """
    params = [t for _, t in model.named_tensors()]
    for p in params:
        p.requires_grad = True
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed + 1)
    history = []
    try:
        model.calibrate(_chunks(x, batch_size * 4), T)
        for epoch in range(epochs):
            if bn_recalibrate and epoch:
                model.calibrate(_chunks(x, batch_size * 4), T)
            loss = _epoch(model, params, opt, x, y, batch_size, rng, T)
            rec = {"epoch": epoch + 1, "loss": loss}
            history.append(rec)
            log.info("dense epoch %d loss %.4f", epoch + 1, loss)
            if on_epoch:
                on_epoch(epoch, rec)
    finally:
        for p in params:
            p.requires_grad = False
    for rec in history[-1:]:
        rec["train_acc"] = evaluate(model, x, y, T)
    return history


def finetune(model, state: PruneState, x, y, epochs: int = 5, lr: float = 1e-4, *, seed: int = 0,
             batch_size: int = 32, T: int | None = None, train_rest: bool = False,
             on_epoch: Callable[[int, dict], None] | None = None) -> list[dict]:
    """Train ticket weights through sign-STE with masks frozen; gain refreshed each epoch."""
    params = [l.weight for l in state.layers.values()]
    if train_rest:
        pruned = {id(p) for p in params}
        params += [t for _, t in model.named_tensors() if id(t) not in pruned]
    for p in params:
        p.requires_grad = True
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed + 2)
    history = []
    try:
        for epoch in range(epochs):
            loss = _epoch(model, params, opt, x, y, batch_size, rng, T)
            for layer in state.layers.values():
                layer.ticket.alpha = gain(layer.weight.data, layer.ticket.mask)
            rec = {"epoch": epoch + 1, "loss": loss, "train_acc": evaluate(model, x, y, T)}
            history.append(rec)
            log.info("finetune epoch %d loss %.4f acc %.3f", epoch + 1, loss, rec["train_acc"])
            if on_epoch:
                on_epoch(epoch, rec)
    finally:
        for p in params:
            p.requires_grad = False
    return history
