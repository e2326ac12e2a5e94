"""Patch-level tickets: rank ConvPEP output tokens and keep the strongest."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .pruner import keep_count
from .tensor import ShapeError


@dataclass(frozen=True)
class PatchSelection:
    kept: tuple[int, ...]
    pb: float
    scores: tuple[float, ...]

    @property
    def n_p(self) -> int:
        return len(self.scores)

    def to_dict(self) -> dict:
        return {"kept": list(self.kept), "pb": self.pb, "scores": list(self.scores)}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchSelection":
        return cls(tuple(int(i) for i in d["kept"]), float(d["pb"]), tuple(float(s) for s in d["scores"]))


def patch_scores_from_embeddings(pat: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Mean L1 norm of ``PatE + PosE`` rows; ``pat`` is ``[..., n_p, D]``."""
    if pat.shape[-2:] != pos.shape:
        raise ShapeError(f"patch embeddings {pat.shape[-2:]} do not match position embeddings {pos.shape}")
    l1 = np.abs(pat + pos).sum(axis=-1)
    return l1.reshape(-1, l1.shape[-1]).mean(axis=0)


def score_patches(model, batches, T: int | None = None) -> np.ndarray:
    """Per-patch score averaged over every calibration sample and timestep."""
    batches = list(batches)
    if not batches:
        raise ValueError("score_patches needs at least one calibration batch")
    T = T or model.cfg.lif.timesteps
    steps = T if model.cfg.mode == "snn" else 1
    total, count = None, 0
    with tn.no_grad():
        for xb in batches:
            pat = model.patch_embed(tn.Tensor(np.asarray(xb, dtype=np.float64)), steps).data
            s = patch_scores_from_embeddings(pat, model.pos.data)
            n = pat.shape[0] * pat.shape[1]
            total = s * n if total is None else total + s * n
            count += n
    return total / count


def select_patches(scores, pb: float) -> PatchSelection:
    if not 0.0 <= pb < 1.0:
        raise ValueError(f"patch pruning ratio must lie in [0, 1), got {pb}")
    scores = np.asarray(scores, dtype=np.float64)
    k = keep_count(pb, len(scores))
    order = np.argsort(-scores, kind="stable")
    kept = tuple(sorted(int(i) for i in order[:k]))
    return PatchSelection(kept, pb, tuple(float(s) for s in scores))


def apply_selection(model, sel: PatchSelection):
    """Return a view of ``model`` that forwards only the kept patch tokens.

    Parameters are shared with ``model``, nothing on it is modified.
    """
    if not sel.kept:
        raise ValueError("empty patch selection")
    if not hasattr(model, "patch_embed"):
        raise TypeError("patch selection needs a transformer-style model")
    if sel.n_p != model.n_p:
        raise ShapeError(f"selection built for {sel.n_p} patches, model has {model.n_p}")
    sub = copy.copy(model)
    sub.kept = np.asarray(sel.kept, dtype=np.intp)
    return sub
