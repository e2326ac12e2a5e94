"""End-to-end runs: data, ticket search, patch selection, fine-tuning, energy, persistence.

A run lives in ``<out>/<config-hash>/`` and holds the config copy, the
checkpoint (SLTT tensors plus JSON metadata), the run record and the energy
report.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import json
import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import container, energy, patches, pruner, training
from .data import Dataset, gen_synthetic, load_idx
from .layers import Ticket
from .models import ModelConfig, build_model
from .patches import PatchSelection
from .pruner import PruneState
from .tensor import Tensor

log = logging.getLogger(__name__)

PA_RANGE = (0.2, 0.8)
PB_RANGE = (0.1, 0.6)
SWEEP_AXES = ("pa", "pb", "T", "lambda")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"            # synthetic | idx
    n_per_class: int = 100
    classes: int = 2
    contrast: float = 1.0
    noise: float = 0.3
    images: str | None = None
    labels: str | None = None
    train_fraction: float = 0.8


@dataclass(frozen=True)
class FineTuneConfig:
    enabled: bool = False
    epochs: int = 3
    lr: float = 1e-4


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pa: float = 0.4
    epochs_na: int = 30
    eta: float = 0.1
    pb: float = 0.0
    epochs_nb: int = 1                   # calibration batches for patch scoring
    T: int = 4
    lambda_: float = 0.99                # LIF decay
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out: str = "runs"
    fine_tune: FineTuneConfig = field(default_factory=FineTuneConfig)
    layer_filter: str = "all"
    binarize_weights: bool = True
    binarize_activations: bool = False
    batch_size: int = 32
    train_rest: bool = False             # train weights outside the filter alongside the scores
    rest_lr: float = 3e-3
    mask_every: str = "epoch"            # epoch | step
    dense_epochs: int = 10
    dense_lr: float = 3e-3

    def __post_init__(self):
        if not 0.0 <= self.pa < 1.0:
            raise ConfigError(f"pa must lie in [0, 1), got {self.pa}")
        if not 0.0 <= self.pb < 1.0:
            raise ConfigError(f"pb must lie in [0, 1), got {self.pb}")
        if self.T < 1 or self.epochs_na < 1 or self.epochs_nb < 1:
            raise ConfigError("T, epochs_na and epochs_nb must be positive")
        if not 0.0 < self.lambda_ <= 1.0:
            raise ConfigError(f"lambda must lie in (0, 1], got {self.lambda_}")
        if self.mask_every not in ("epoch", "step"):
            raise ConfigError(f"mask_every must be 'epoch' or 'step', got {self.mask_every!r}")
        if self.data.source not in ("synthetic", "idx"):
            raise ConfigError(f"unknown data source {self.data.source!r}")
        if not PA_RANGE[0] <= self.pa <= PA_RANGE[1]:
            warnings.warn(f"pa={self.pa} is outside the studied range {PA_RANGE}", stacklevel=3)
        if self.pb and not PB_RANGE[0] <= self.pb <= PB_RANGE[1]:
            warnings.warn(f"pb={self.pb} is outside the studied range {PB_RANGE}", stacklevel=3)

    def model_config(self) -> ModelConfig:
        """Model config with T, decay, activation binarization and seed folded in."""
        lif = replace(self.model.lif, timesteps=self.T, beta=self.lambda_)
        return replace(self.model, lif=lif, binarize_activations=self.binarize_activations, seed=self.seed)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["model"] = self.model.to_dict()
        d["data"] = dataclasses.asdict(self.data)
        d["fine_tune"] = dataclasses.asdict(self.fine_tune)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            if "data" in d:
                d["data"] = DataConfig(**d["data"])
            if "fine_tune" in d:
                d["fine_tune"] = FineTuneConfig(**d["fine_tune"])
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.out) / self.hash()


def load_config(path) -> ExperimentConfig:
    """Read a YAML or JSON config file."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} is not a mapping")
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    stages: list[str]
    history: list[dict]
    train_acc: float
    test_acc: float
    sparsity: float | None
    layer_sparsity: dict[str, float]
    kept_patches: int | None
    n_patches: int | None
    energy: dict
    init_hash: str
    pre_finetune_test_acc: float | None = None
    wall_time: float = 0.0

    def metrics(self) -> dict:
        """Everything except wall time; equal across identical runs."""
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return d

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


@dataclass
class Session:
    """Mutable state threaded through the stages of one run."""

    config: ExperimentConfig
    model: object
    train: Dataset
    test: Dataset
    state: PruneState | None = None
    selection: PatchSelection | None = None
    history: list[dict] = field(default_factory=list)
    stages: list[str] = field(default_factory=list)
    init_hash: str = ""
    pre_finetune_test_acc: float | None = None

    @property
    def evaluated(self):
        """The model as evaluated: the patch-selected view when stage 2 ran."""
        if self.selection is not None:
            return patches.apply_selection(self.model, self.selection)
        return self.model


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "idx":
        if not d.images or not d.labels:
            raise ConfigError("idx data needs both 'images' and 'labels' paths")
        ds = load_idx(d.images, d.labels)
    else:
        ds = gen_synthetic(cfg.seed, d.n_per_class, d.classes, cfg.model.input_shape, d.contrast, d.noise)
    if tuple(ds.x.shape[1:]) != tuple(cfg.model.input_shape):
        raise ConfigError(f"data shape {ds.x.shape[1:]} does not match model input {cfg.model.input_shape}")
    return ds.split(d.train_fraction, cfg.seed)


def _digest(model) -> str:
    h = hashlib.sha256()
    for name, t in model.named_tensors():
        h.update(name.encode())
        h.update(t.data.tobytes())
    return h.hexdigest()[:16]


def prepare(cfg: ExperimentConfig) -> Session:
    train, test = load_data(cfg)
    try:
        model = build_model(cfg.model_config())
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return Session(cfg, model, train, test)


def _tag(stage: str, rows: list[dict]) -> list[dict]:
    return [{"stage": stage, **r} for r in rows]


def _stage(name):
    def wrap(fn):
        def inner(s: Session, *a, **kw):
            try:
                out = fn(s, *a, **kw)
            except (StageError, ConfigError):
                raise
            except Exception as e:
                raise StageError(name, e) from e
            s.stages.append(name)
            return out
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


@_stage("dense")
def stage_dense(s: Session) -> None:
    """Dense baseline: every weight trained, no ticket."""
    c = s.config
    s.init_hash = _digest(s.model)
    h = training.train_dense(s.model, s.train.x, s.train.y, c.dense_epochs, c.dense_lr, seed=c.seed,
                             batch_size=c.batch_size, T=c.T)
    s.history += _tag("dense", h)


@_stage("prune")
def stage_prune(s: Session) -> None:
    """Stage 1: score search for the parameter-level ticket."""
    c = s.config
    model, state, h = pruner.search(
        s.model, s.train.x, s.train.y, c.pa, c.epochs_na, c.eta, layer_filter=c.layer_filter, seed=c.seed,
        batch_size=c.batch_size, T=c.T, binarize=c.binarize_weights, train_rest=c.train_rest,
        rest_lr=c.rest_lr, mask_every=c.mask_every)
    s.state = state
    s.history += _tag("prune", h)


@_stage("patch-prune")
def stage_patches(s: Session) -> None:
    """Stage 2: rank ConvPEP output tokens and keep the top fraction."""
    c = s.config
    if not hasattr(s.model, "patch_embed"):
        raise TypeError(f"patch pruning needs transformer-micro, got {c.model.family}")
    calib = np.array_split(s.train.x, c.epochs_nb) if c.epochs_nb > 1 else [s.train.x[:64]]
    scores = patches.score_patches(s.model, [b for b in calib if len(b)], c.T)
    s.selection = patches.select_patches(scores, c.pb)


@_stage("finetune")
def stage_finetune(s: Session) -> None:
    """Weights unfrozen under sign-STE, masks and patch selection fixed."""
    c = s.config
    if s.state is None:
        raise ValueError("fine-tuning needs a pruned model")
    s.pre_finetune_test_acc = pruner.evaluate(s.evaluated, s.test.x, s.test.y, c.T)
    h = training.finetune(s.evaluated, s.state, s.train.x, s.train.y, c.fine_tune.epochs, c.fine_tune.lr,
                          seed=c.seed, batch_size=c.batch_size, T=c.T, train_rest=c.train_rest)
    s.history += _tag("finetune", h)


def energy_report(s: Session, n_calibration: int = 64) -> dict:
    """Energy summary; snn models are profiled on a slice of the training set."""
    model = s.evaluated
    macs = sum(energy.layer_flops(d) for d in model.descriptors() if d.kind != "attention-matmul")
    out = {"effective_macs": macs, "total_ann": energy.ann_energy(model)}
    if s.config.model.mode == "snn":
        rep = energy.model_energy(model, [s.train.x[:n_calibration]], s.config.T)
        out.update(total_snn=rep.total_snn, attention_snn=rep.attention_snn, attention_ann=rep.attention_ann,
                   savings=rep.savings, report=rep)
    return out


def make_record(s: Session, wall_time: float = 0.0) -> RunRecord:
    c = s.config
    model = s.evaluated
    layer_sp = pruner.sparsity(s.state) if s.state else {}
    if layer_sp:
        kept = sum(l.ticket.mask.sum() for l in s.state.layers.values())
        total = sum(l.ticket.mask.size for l in s.state.layers.values())
        overall = float(1 - kept / total)
    else:
        overall = None
    en = energy_report(s)
    en.pop("report", None)
    n_p = getattr(s.model, "n_p", None)
    return RunRecord(
        config_hash=c.hash(), seed=c.seed, stages=list(s.stages), history=s.history,
        train_acc=pruner.evaluate(model, s.train.x, s.train.y, c.T),
        test_acc=pruner.evaluate(model, s.test.x, s.test.y, c.T),
        sparsity=overall, layer_sparsity=layer_sp,
        kept_patches=getattr(model, "tokens", None) if n_p else None, n_patches=n_p,
        energy=en, init_hash=s.init_hash, pre_finetune_test_acc=s.pre_finetune_test_acc, wall_time=wall_time)


# -- checkpoints

def save_checkpoint(s: Session, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {n: t.data for n, t in s.model.named_tensors()}
    for bn in s.model.batchnorms():
        tensors[f"bn:{bn.name}.mean"] = bn.mean
        tensors[f"bn:{bn.name}.var"] = bn.var
    meta = {"config": s.config.to_dict(), "stages": s.stages, "init_hash": s.init_hash,
            "pre_finetune_test_acc": s.pre_finetune_test_acc, "history": s.history,
            "selection": s.selection.to_dict() if s.selection else None, "tickets": {}}
    if s.state:
        meta["prune"] = {"pa": s.state.pa, "eta": s.state.eta, "epochs": s.state.epochs}
        for name, layer in s.state.layers.items():
            t = layer.ticket
            tensors[f"ticket:{name}.scores"] = t.scores.data
            tensors[f"ticket:{name}.mask"] = t.mask
            meta["tickets"][name] = {"alpha": t.alpha, "binarize": t.binarize}
    container.save_tensors(path / "checkpoint.sltt", tensors)
    (path / "checkpoint.json").write_text(json.dumps(meta, indent=2))


def load_checkpoint(path) -> Session:
    """Rebuild a session (model, tickets, BN statistics, selection, data) from disk."""
    path = Path(path)
    try:
        meta = json.loads((path / "checkpoint.json").read_text())
        tensors = container.load_tensors(path / "checkpoint.sltt")
    except (OSError, ValueError) as e:
        raise StageError("load", e) from e
    cfg = ExperimentConfig.from_dict(meta["config"])
    s = prepare(cfg)
    for name, t in s.model.named_tensors():
        t.data = tensors[name].copy()
    for bn in s.model.batchnorms():
        bn.mean = tensors[f"bn:{bn.name}.mean"].copy()
        bn.var = tensors[f"bn:{bn.name}.var"].copy()
    if meta["tickets"]:
        by_name = {l.name: l for l in s.model.layers()}
        layers = {}
        for name, info in meta["tickets"].items():
            layer = by_name[name]
            layer.ticket = Ticket(Tensor(tensors[f"ticket:{name}.scores"].copy(), name=name + ".scores"),
                                  tensors[f"ticket:{name}.mask"].copy(), info["alpha"], info["binarize"])
            layers[name] = layer
        s.state = PruneState(layers, **meta["prune"])
    if meta["selection"]:
        s.selection = PatchSelection.from_dict(meta["selection"])
    s.stages = list(meta["stages"])
    s.history = list(meta["history"])
    s.init_hash = meta["init_hash"]
    s.pre_finetune_test_acc = meta["pre_finetune_test_acc"]
    return s


def write_outputs(s: Session, rec: RunRecord, path=None) -> Path:
    path = Path(path) if path else s.config.run_dir()
    save_checkpoint(s, path)
    (path / "config.yaml").write_text(dump_config(s.config))
    (path / "record.json").write_text(rec.to_json())
    en = energy_report(s)
    if "report" in en:
        (path / "energy.json").write_text(en["report"].to_json())
        (path / "energy.csv").write_text(en["report"].to_csv())
    return path


# -- orchestration

def run(cfg: ExperimentConfig, *, dense: bool = False, write: bool = True) -> RunRecord:
    """Stage 1, then stage 2 for transformers with ``pb > 0``, then optional fine-tuning.

    With ``dense`` the ticket stages are replaced by ordinary weight training.
    """
    t0 = time.perf_counter()
    s = prepare(cfg)
    if dense:
        stage_dense(s)
    else:
        s.init_hash = _init_digest(s)
        stage_prune(s)
        if cfg.pb > 0 and cfg.model.family == "transformer-micro":
            stage_patches(s)
        if cfg.fine_tune.enabled:
            stage_finetune(s)
    rec = make_record(s, time.perf_counter() - t0)
    if write:
        write_outputs(s, rec)
    log.info("run %s: train %.3f test %.3f", rec.config_hash, rec.train_acc, rec.test_acc)
    return rec


def _init_digest(s: Session) -> str:
    # the search draws fresh weights from the seed; hash the model as it will start
    probe = build_model(s.config.model_config())
    pruner.init_prune(probe, s.config.layer_filter, s.config.seed, s.config.binarize_weights)
    return _digest(probe)


def _apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "pa":
        return replace(cfg, pa=float(value))
    if axis == "pb":
        return replace(cfg, pb=float(value))
    if axis == "T":
        return replace(cfg, T=int(value))
    if axis == "lambda":
        return replace(cfg, lambda_=float(value))
    raise ConfigError(f"cannot sweep over {axis!r}; choose from {SWEEP_AXES}")


SUMMARY_FIELDS = ("train_acc", "test_acc", "sparsity", "kept_patches", "effective_macs", "total_snn",
                  "total_ann", "savings")


def _row(rec: RunRecord) -> dict:
    en = rec.energy
    return {"train_acc": rec.train_acc, "test_acc": rec.test_acc, "sparsity": rec.sparsity,
            "kept_patches": rec.kept_patches, "effective_macs": en.get("effective_macs"),
            "total_snn": en.get("total_snn"), "total_ann": en.get("total_ann"), "savings": en.get("savings")}


def sweep(cfg: ExperimentConfig, grid: dict[str, list], *, write: bool = True,
          dense: bool = False) -> tuple[list[RunRecord], str, str]:
    """Run every grid point with the config's seed.

    Returns the records, a summary CSV (one row per point) and a long-format
    CSV (one row per point and metric).
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("sweep grid is empty")
    if len(grid) > 2:
        raise ConfigError("sweep over at most two axes")
    for axis in grid:
        if axis not in SWEEP_AXES:
            raise ConfigError(f"cannot sweep over {axis!r}; choose from {SWEEP_AXES}")
    axes = list(grid)
    records, rows = [], []
    for point in itertools.product(*(grid[a] for a in axes)):
        c = cfg
        for a, v in zip(axes, point):
            c = _apply_axis(c, a, v)
        rec = run(c, dense=dense, write=write)
        records.append(rec)
        rows.append({**dict(zip(axes, point)), **_row(rec)})
    summary, long = io.StringIO(), io.StringIO()
    w = csv.DictWriter(summary, fieldnames=axes + list(SUMMARY_FIELDS), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    lw = csv.writer(long, lineterminator="\n")
    lw.writerow(axes + ["metric", "value"])
    for r in rows:
        for m in SUMMARY_FIELDS:
            lw.writerow([r[a] for a in axes] + [m, r[m]])
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        tag = "_".join(axes)
        (out / f"sweep_{tag}.csv").write_text(summary.getvalue())
        (out / f"sweep_{tag}_long.csv").write_text(long.getvalue())
    return records, summary.getvalue(), long.getvalue()
