# evaluator.py - confusion matrices, IoU and evaluation reports
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from PIL import Image

from autograd.tensor import no_grad
from dataio.class_maps import IGNORE_ID, ClassMap, palette_for
from exceptions import DataError, ShapeError
from extensions import worker_count

logger = logging.getLogger(__name__)


class ConfusionMatrix:
    """
    counts[g][p] = pixels with ground truth g predicted as p.

    Pixels whose ground truth is the ignore id are never counted.
    """

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        if num_classes < 1:
            raise ShapeError("a confusion matrix needs at least one class")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes):
            raise ShapeError(f"counts must be {num_classes}x{num_classes}, got {list(self.counts.shape)}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, ground_truth, prediction) -> "ConfusionMatrix":
        gt = np.asarray(ground_truth).astype(np.int64)
        pred = np.asarray(prediction).astype(np.int64)
        if gt.shape != pred.shape:
            raise ShapeError(f"ground truth {list(gt.shape)} and prediction {list(pred.shape)} differ")
        k = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= k):
            raise DataError(f"prediction ids must lie in [0, {k})")
        valid = gt != IGNORE_ID
        if valid.any() and (gt[valid].min() < 0 or gt[valid].max() >= k):
            raise DataError(f"ground-truth ids must lie in [0, {k}) or be {IGNORE_ID}")
        index = gt[valid] * k + pred[valid]
        self.counts += np.bincount(index, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError(f"cannot merge {self.num_classes}- and {other.num_classes}-class matrices")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    def iou(self) -> "IoUResult":
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        union = tp + fp + fn
        present = union > 0
        per_class = np.full(self.num_classes, np.nan)
        per_class[present] = tp[present] / union[present]
        mean = float(per_class[present].mean()) if present.any() else float("nan")
        return IoUResult(per_class=per_class, mean=mean, present=present)

    def pixel_accuracy(self) -> float:
        total = self.total
        return float(np.trace(self.counts)) / total if total else float("nan")


@dataclass
class IoUResult:
    """Per-class IoU (NaN where a class never occurs in ground truth or prediction) and their mean."""

    per_class: np.ndarray
    mean: float
    present: np.ndarray


def accumulate(cm: ConfusionMatrix, ground_truth, prediction) -> ConfusionMatrix:
    return cm.accumulate(ground_truth, prediction)


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    return a.merge(b)


def iou(cm: ConfusionMatrix) -> IoUResult:
    return cm.iou()


@dataclass
class Report:
    class_names: Sequence[str]
    confusion: ConfusionMatrix
    split: str = ""
    samples: int = 0
    predictions: List[str] = field(default_factory=list)

    @property
    def result(self) -> IoUResult:
        return self.confusion.iou()

    @property
    def mean_iou(self) -> float:
        return self.result.mean

    @property
    def pixel_accuracy(self) -> float:
        return self.confusion.pixel_accuracy()

    def frame(self) -> pd.DataFrame:
        result = self.result
        return pd.DataFrame({
            "class": list(self.class_names),
            "iou": result.per_class.astype(float),
            "evaluated": result.present.tolist(),
        })

    def to_text(self) -> str:
        frame = self.frame()
        width = max(len("Pixel accuracy"), *(len(name) for name in frame["class"]))
        lines = [f"{'Class':<{width}}  IoU (%)", "-" * (width + 9)]
        for name, value in zip(frame["class"], frame["iou"]):
            cell = "n/a" if pd.isna(value) else f"{100.0 * value:.2f}"
            lines.append(f"{name:<{width}}  {cell:>7}")
        lines.append("-" * (width + 9))
        mean = "n/a" if np.isnan(self.mean_iou) else f"{100.0 * self.mean_iou:.2f}"
        accuracy = "n/a" if np.isnan(self.pixel_accuracy) else f"{100.0 * self.pixel_accuracy:.2f}"
        lines.append(f"{'Mean IoU':<{width}}  {mean:>7}")
        lines.append(f"{'Pixel accuracy':<{width}}  {accuracy:>7}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict:
        return {
            "split": self.split,
            "samples": self.samples,
            "classes": [
                {**row, "iou": None if pd.isna(row["iou"]) else float(row["iou"]), "evaluated": bool(row["evaluated"])}
                for row in self.frame().to_dict(orient="records")
            ],
            "mean_iou": None if np.isnan(self.mean_iou) else self.mean_iou,
            "pixel_accuracy": None if np.isnan(self.pixel_accuracy) else self.pixel_accuracy,
            "confusion": self.confusion.counts.tolist(),
        }

    def write(self, output_dir) -> Dict[str, str]:
        os.makedirs(output_dir, exist_ok=True)
        paths = {
            "text": os.path.join(output_dir, "report.txt"),
            "json": os.path.join(output_dir, "report.json"),
        }
        with open(paths["text"], "w", encoding="utf-8") as f:
            f.write(self.to_text())
        with open(paths["json"], "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return paths


def load_report(path) -> Dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def save_prediction(prediction: np.ndarray, path, palette: np.ndarray):
    """Write class ids as an 8-bit indexed PNG coloured by `palette`."""
    image = Image.fromarray(prediction.astype(np.uint8))
    flat = np.zeros((256, 3), dtype=np.uint8)
    flat[: len(palette)] = palette[:256]
    image.putpalette(flat.reshape(-1).tolist())
    image.save(path)


def _evaluate_one(model, dataset, index: int, num_classes: int, dump_dir, palette):
    sample = dataset[index]
    rgb, depth, _ = sample.batch()
    with no_grad():
        prediction = model.predict(
            rgb if model.config.rgb_branch else None,
            depth if model.config.depth_branch else None,
        )[0]
    cm = ConfusionMatrix(num_classes).accumulate(sample.labels, prediction)
    dumped = None
    if dump_dir is not None:
        dumped = os.path.join(dump_dir, f"{sample.name or index}.png")
        save_prediction(prediction, dumped, palette)
    return cm, dumped


def evaluate(
    model,
    dataset,
    class_map: ClassMap,
    output_dir=None,
    dump_dir=None,
    palette_path=None,
    workers: Optional[int] = None,
    split: str = "",
) -> Report:
    """
    Frozen-BN inference over every sample of a split, one merged confusion matrix.

    Args:
        model: SegNet (anything with `config` and `predict(rgb, depth)`)
        dataset: indexable samples whose labels are training ids of class_map
        class_map: supplies the class count and names
        output_dir: write report.txt / report.json here when given
        dump_dir: write one indexed prediction PNG per sample here when given
        palette_path: palette file for the dumped predictions
        workers: parallel evaluation threads, capped by SEGNET_THREADS
    """
    k = class_map.num_classes
    if model.config.num_classes != k:
        raise DataError(f"model predicts {model.config.num_classes} classes, class map '{class_map.name}' has {k}")
    if dump_dir is not None:
        os.makedirs(dump_dir, exist_ok=True)
    palette = palette_for(class_map, palette_path)

    model.eval()
    n = len(dataset)
    logger.info(f"🔄 Evaluating {n} samples ({k} classes)")
    results = Parallel(n_jobs=worker_count(workers), backend="threading")(
        delayed(_evaluate_one)(model, dataset, i, k, dump_dir, palette) for i in range(n)
    )
    confusion = ConfusionMatrix(k)
    dumped = []
    for cm, path in results:
        confusion = confusion.merge(cm)
        if path is not None:
            dumped.append(path)

    report = Report(class_map.target_classes, confusion, split=split, samples=n, predictions=dumped)
    if output_dir is not None:
        report.write(output_dir)
    logger.info(f"✅ Mean IoU {100.0 * report.mean_iou:.2f}% over {n} samples")
    return report


def compare_reports(baseline: Report, candidate: Report, names=("rgb", "rgbd")) -> pd.DataFrame:
    """Per-class and mean IoU of two reports side by side, with the candidate-minus-baseline delta."""
    if list(baseline.class_names) != list(candidate.class_names):
        raise DataError("reports cover different class sets")
    first, second = names
    frame = pd.DataFrame({
        "class": list(baseline.class_names) + ["Mean IoU"],
        first: list(baseline.result.per_class) + [baseline.mean_iou],
        second: list(candidate.result.per_class) + [candidate.mean_iou],
    })
    frame["delta"] = frame[second] - frame[first]
    return frame
