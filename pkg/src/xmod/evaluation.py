"""Segmentation metrics, ROC analysis and result tables.

Dice and IoU are pooled over every evaluated pixel (micro average); the
per-image values ride along in the report but are not what the tables show.
For pooled binary counts IoU = Dice / (2 - Dice) holds exactly.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Dice/IoU published for full-scale runs (58 real MR test slices)
REFERENCE_TABLE3 = {
    "Real only (350)": (0.9459, 0.8974),
    "Combined (704)": (0.9467, 0.8989),
    "Combined (1064)": (0.9524, 0.9091),
    "Combined (1384)": (0.9485, 0.9020),
    "Combined (1837)": (0.9475, 0.9002),
    "Combined (2400)": (0.9505, 0.9058),
}
REFERENCE_TABLE4 = {
    "Real images only (350)": (0.9459, 0.8974),
    "Combined (1064) Real+Synthetic": (0.9460, 0.8976),
}


class MetricError(ValueError):
    pass


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise MetricError(f"{name} must be a binary mask")
    return a.astype(bool)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_masks(cls, pred, gt) -> ConfusionCounts:
        p, g = _binary(pred, "pred"), _binary(gt, "gt")
        if p.shape != g.shape:
            raise MetricError(f"shape mismatch {p.shape} vs {g.shape}")
        tp = int(np.count_nonzero(p & g))
        fp = int(np.count_nonzero(p & ~g))
        fn = int(np.count_nonzero(~p & g))
        return cls(tp, fp, fn, p.size - tp - fp - fn)

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def dice(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom

    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else self.tp / denom


def dice(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1."""
    return ConfusionCounts.from_masks(pred, gt).dice()


def iou(pred, gt) -> float:
    """|P & G| / |P | G|; two empty masks score 1."""
    return ConfusionCounts.from_masks(pred, gt).iou()


def iou_from_dice(d: float) -> float:
    return d / (2.0 - d)


@dataclass
class ROCCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, r in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(r))])


def roc_curve(scores, labels) -> ROCCurve:
    """ROC over the distinct score values, highest threshold first.

    Equal scores form one threshold group, so the trapezoid over a tie gives
    the half-credit of the rank-statistic definition of AUC.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _binary(labels, "labels").ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs at least one positive and one negative label")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[ends]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return ROCCurve(thresholds=thresholds, tpr=tpr, fpr=fpr, auc=auc)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    run_id: str
    arrangement: str
    dice: float
    iou: float
    auc: float | None = None
    counts: dict = field(default_factory=dict)
    per_image: list = field(default_factory=list)
    # "essnet", "cyclegan" or None for real-only training
    generator: str | None = None
    n_train: int | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> MetricsReport:
        return cls(**data)

    def write(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> MetricsReport:
        return cls.from_json(json.loads(Path(path).read_text()))


def evaluate_predictions(
    scores: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    ids: Sequence[str],
    threshold: float = 0.5,
    run_id: str = "",
    arrangement: str = "",
    with_roc: bool = True,
) -> tuple[MetricsReport, ROCCurve | None]:
    """Pool Dice/IoU over all slices after thresholding; pixel ROC from raw scores."""
    if not scores:
        raise MetricError("nothing to evaluate")
    pooled = ConfusionCounts()
    per_image = []
    for sid, sc, gt in zip(ids, scores, masks, strict=True):
        c = ConfusionCounts.from_masks(np.asarray(sc) >= threshold, gt)
        pooled = pooled + c
        per_image.append({"id": sid, "dice": c.dice(), "iou": c.iou()})
    roc = None
    flat_gt = np.concatenate([np.asarray(m).ravel() for m in masks])
    if with_roc and 0 < flat_gt.sum() < flat_gt.size:
        roc = roc_curve(np.concatenate([np.asarray(s).ravel() for s in scores]), flat_gt)
    report = MetricsReport(
        run_id=run_id,
        arrangement=arrangement,
        dice=pooled.dice(),
        iou=pooled.iou(),
        auc=None if roc is None else roc.auc,
        counts=asdict(pooled),
        per_image=per_image,
    )
    return report, roc


def arrangement_label(n_real: int, n_synthetic: int, generator: str | None = None) -> str:
    if n_synthetic == 0:
        return f"Real only ({n_real})"
    label = f"Combined ({n_real + n_synthetic})"
    if generator == "cyclegan":
        label += " Real+Synthetic (CycleGAN)"
    return label


# ---------------------------------------------------------------------------
# tables


@dataclass
class Tables:
    table3_rows: list[tuple[str, float, float]]
    table4_rows: list[tuple[str, float, float]]

    def _csv(self, rows) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Number of training images (MRI)", "Dice", "IoU", "Reference Dice", "Reference IoU"])
        for label, d, j in rows:
            ref = REFERENCE_TABLE3.get(label) or REFERENCE_TABLE4.get(label) or ("", "")
            w.writerow([label, f"{d:.4f}", f"{j:.4f}", *ref])
        return buf.getvalue()

    def _text(self, title: str, rows) -> str:
        width = max([len(r[0]) for r in rows] + [31])
        lines = [title, f"{'Number of training images (MRI)':<{width}}  {'Dice':>6}  {'IoU':>6}"]
        for label, d, j in rows:
            lines.append(f"{label:<{width}}  {d:.4f}  {j:.4f}")
        return "\n".join(lines) + "\n"

    def as_csv(self) -> dict[str, str]:
        out = {"table3": self._csv(self.table3_rows)}
        if self.table4_rows:
            out["table4"] = self._csv(self.table4_rows)
        return out

    def as_text(self) -> str:
        text = self._text("Segmentation results (U-Net)", self.table3_rows)
        if self.table4_rows:
            text += "\n" + self._text("Ablation: synthesis without segmentation branch", self.table4_rows)
        return text


def reproduce_tables(runs: Iterable[MetricsReport]) -> Tables:
    """Arrange reports into the real-vs-combined table and, when CycleGAN-only
    runs are present, the ablation table."""
    runs = list(runs)
    if not runs:
        raise MetricError("need at least one report")
    labels = [r.arrangement for r in runs]
    if len(set(labels)) != len(labels):
        dup = sorted({l for l in labels if labels.count(l) > 1})
        raise MetricError(f"duplicate arrangement labels: {dup}")

    def size(r: MetricsReport) -> int:
        return r.n_train if r.n_train is not None else 0

    main = sorted((r for r in runs if r.generator != "cyclegan"), key=size)
    table3 = [(r.arrangement, r.dice, r.iou) for r in main]
    table4 = []
    ablation = [r for r in runs if r.generator == "cyclegan"]
    if ablation:
        real = [r for r in main if r.generator is None]
        for r in real[:1]:
            table4.append((r.arrangement.replace("Real only", "Real images only"), r.dice, r.iou))
        for r in sorted(ablation, key=size):
            table4.append((f"Combined ({size(r)}) Real+Synthetic", r.dice, r.iou))
    return Tables(table3, table4)


def evaluate_segmentation(
    checkpoint,
    test_manifest,
    threshold: float = 0.5,
    run_id: str = "",
    arrangement: str = "",
    include_liver_absent: bool = False,
) -> tuple[MetricsReport, ROCCurve | None]:
    """Run a U-Net checkpoint over a masked test set and score it."""
    from .dataset import load_slice
    from .training import load_checkpoint, predict_unet, resolve_checkpoint

    missing = [e.id for e in test_manifest.entries if e.mask_path is None]
    if missing:
        raise MetricError(f"test entries without masks: {missing[:5]}")
    entries = test_manifest.entries if include_liver_absent else test_manifest.liver_visible
    if not entries:
        raise MetricError(f"{test_manifest.root_path}: no evaluable test slices")
    state = load_checkpoint(resolve_checkpoint(checkpoint))
    if getattr(state, "unet", None) is None:
        raise MetricError(f"{checkpoint}: not a U-Net checkpoint")
    slices = [load_slice(test_manifest, e) for e in entries]
    scores = predict_unet(state.unet, slices)
    return evaluate_predictions(
        scores, [s.mask for s in slices], [s.id for s in slices], threshold, run_id, arrangement
    )
