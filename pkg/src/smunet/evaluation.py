"""Hard-Dice evaluation over WT/CT/ET for every modality subset, CSV and plots."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .phantom import LabeledVolume, ModalityMask, derive_regions, enumerate_subsets

REGIONS = ("wt", "ct", "et")
CSV_HEADER = ["flair", "t1", "t1c", "t2", "dice_wt", "dice_ct", "dice_et"]


def dice_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|P & T| / (|P| + |T|); 1.0 when both are empty."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / total


@dataclass
class SubsetRow:
    mask: ModalityMask
    dice_wt: float
    dice_ct: float
    dice_et: float

    @property
    def scores(self) -> tuple[float, float, float]:
        return self.dice_wt, self.dice_ct, self.dice_et


@dataclass
class SubsetReport:
    rows: list[SubsetRow]

    @property
    def means(self) -> tuple[float, float, float]:
        if not self.rows:
            raise ValueError("empty report")
        arr = np.array([r.scores for r in self.rows], dtype=np.float64)
        return tuple(float(v) for v in arr.mean(axis=0))

    def row(self, mask: ModalityMask | str) -> SubsetRow:
        bits = mask if isinstance(mask, str) else mask.bits
        for r in self.rows:
            if r.mask.bits == bits:
                return r
        raise KeyError(bits)


Predictor = Callable[[LabeledVolume, ModalityMask], np.ndarray]


def _as_predictor(model) -> Callable[[ModalityMask], Predictor]:
    """Normalise a state, a {mask bits: state} mapping or a callable."""
    from .engine import TrainState, infer

    if isinstance(model, TrainState):
        return lambda mask: (lambda vol, m: infer(model, vol, m))
    if isinstance(model, Mapping):
        def pick(mask):
            state = model.get(mask.bits)
            if state is None:
                raise KeyError(f"no trained state for subset {mask.bits}")
            return _as_predictor(state)(mask)
        return pick
    if callable(model):
        return lambda mask: model
    raise TypeError(f"cannot evaluate {type(model).__name__}")


def evaluate_subsets(model, dataset: Sequence[LabeledVolume],
                     masks: Sequence[ModalityMask] | None = None) -> SubsetReport:
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    pick = _as_predictor(model)
    rows = []
    for mask in masks or enumerate_subsets():
        predict = pick(mask)
        scores = np.zeros((len(dataset), len(REGIONS)))
        for i, vol in enumerate(dataset):
            pred = derive_regions(predict(vol, mask))
            truth = derive_regions(vol.labels)
            scores[i] = [dice_score(getattr(pred, r), getattr(truth, r)) for r in REGIONS]
        mean = scores.mean(axis=0)
        rows.append(SubsetRow(mask, float(mean[0]), float(mean[1]), float(mean[2])))
    return SubsetReport(rows)


def format_table(report: SubsetReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in report.rows:
        writer.writerow([*(int(p) for p in r.mask.present), *(repr(s) for s in r.scores)])
    writer.writerow(["mean", "", "", "", *(repr(m) for m in report.means)])
    return buf.getvalue()


def emit_table(report: SubsetReport, path: str | os.PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(format_table(report))
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write table to {path}: {exc}") from exc
    return path


def read_table(path: str | os.PathLike) -> SubsetReport:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        rows = []
        for rec in reader:
            if rec[0] == "mean":
                continue
            mask = ModalityMask(tuple(v == "1" for v in rec[:4]))
            rows.append(SubsetRow(mask, *(float(v) for v in rec[4:7])))
    return SubsetReport(rows)


def plot_reports(reports: Mapping[str, SubsetReport]):
    """Grouped bars per subset (one bar per method), one panel per region."""
    if not reports:
        raise ValueError("need at least one report to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(reports)
    masks = [r.mask.bits for r in next(iter(reports.values())).rows]
    x = np.arange(len(masks))
    width = 0.8 / len(names)
    fig, axes = plt.subplots(len(REGIONS), 1, figsize=(max(8, len(masks) * 0.7), 8), sharex=True)
    axes = np.atleast_1d(axes)
    for ax, region in zip(axes, REGIONS):
        for k, name in enumerate(names):
            vals = [getattr(reports[name].row(m), f"dice_{region}") for m in masks]
            ax.bar(x + (k - (len(names) - 1) / 2) * width, vals, width, label=name)
        ax.set_ylabel(f"Dice {region.upper()}")
        ax.set_ylim(0, 1)
    axes[-1].set_xticks(x)
    axes[-1].set_xticklabels(masks, rotation=45)
    axes[-1].set_xlabel("modalities present (FLAIR T1 T1c T2)")
    axes[0].legend(loc="upper left", fontsize="small")
    fig.tight_layout()
    return fig


def emit_plot(reports: Mapping[str, SubsetReport], path: str | os.PathLike) -> Path:
    import matplotlib.pyplot as plt

    fig = plot_reports(reports)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=80)
    except OSError as exc:
        raise OSError(f"cannot write plot to {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path
