"""Qualitative comparison tables: ann vs snn tickets across P_a, and a timestep sweep."""
from __future__ import annotations

from dataclasses import replace

from . import experiment
from .experiment import ExperimentConfig


def _fmt(v, spec):
    return "-" if v is None else format(v, spec)


def reward_table(cfg: ExperimentConfig, pas=(0.2, 0.4, 0.6, 0.8), write: bool = False) -> tuple[str, list]:
    """Paired ann-mode and snn-mode ticket searches at each P_a on the same data and seed."""
    rows, out = [], []
    for pa in pas:
        pair = {}
        for mode in ("ann", "snn"):
            c = replace(cfg, pa=pa, model=replace(cfg.model, mode=mode))
            pair[mode] = experiment.run(c, write=write)
        ann, snn = pair["ann"], pair["snn"]
        rows.append((pa, ann, snn))
        out.append(f"{pa:>4.2f} | {ann.test_acc:>8.4f} | {snn.test_acc:>8.4f} | "
                   f"{snn.test_acc - ann.test_acc:>+7.4f} | {_fmt(ann.energy['total_ann'], '.3e'):>10} | "
                   f"{_fmt(snn.energy.get('total_snn'), '.3e'):>10}")
    head = f"{'P_a':>4} | {'ann acc':>8} | {'snn acc':>8} | {'gap':>7} | {'ann J':>10} | {'snn J':>10}"
    return "\n".join([head, "-" * len(head), *out]), rows


def timestep_table(cfg: ExperimentConfig, Ts=(1, 2, 4, 8), write: bool = False) -> tuple[str, list]:
    """Accuracy and energy of the snn ticket as the number of timesteps grows."""
    records, _, _ = experiment.sweep(cfg, {"T": list(Ts)}, write=write)
    head = f"{'T':>3} | {'train':>7} | {'test':>7} | {'snn J':>10} | {'savings':>8}"
    lines = [head, "-" * len(head)]
    for T, r in zip(Ts, records):
        lines.append(f"{T:>3} | {r.train_acc:>7.4f} | {r.test_acc:>7.4f} | "
                     f"{_fmt(r.energy.get('total_snn'), '.3e'):>10} | {_fmt(r.energy.get('savings'), '.2f'):>8}")
    return "\n".join(lines), records
