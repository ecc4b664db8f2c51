"""AP50 evaluation: greedy matching, all-point interpolated AP, macro mean over present classes."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Annotation, Box, iou
from .data import SHAPES, DomainDataset
from .toydet import Detection, Detector, detect, images_to_tensor


@dataclass
class EvalResult:
    per_class_ap: list[float | None]  # None for classes without ground truth
    map50: float
    num_gt: list[int]
    num_det: list[int]
    pr_curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def to_json(self, class_names: Sequence[str] | None = None) -> dict:
        names = class_names or [class_name(k) for k in range(len(self.per_class_ap))]
        return {
            "map50": self.map50,
            "per_class": {names[k]: ap for k, ap in enumerate(self.per_class_ap)},
            "counts": {names[k]: {"gt": self.num_gt[k], "det": self.num_det[k]}
                       for k in range(len(self.per_class_ap))},
        }

    def write(self, directory: str | Path, pr_csv: bool = False) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "eval.json"
        path.write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")
        if pr_csv:
            for k, (rec, prec) in self.pr_curves.items():
                with open(out / f"pr_{class_name(k)}.csv", "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["recall", "precision"])
                    w.writerows(zip(rec.tolist(), prec.tolist()))
        return path


def class_name(k: int) -> str:
    return SHAPES[k] if k < len(SHAPES) else f"class{k}"


def match_detections(dets: Sequence[Box], gts: Sequence[Box], iou_thr: float = 0.5) -> list[bool]:
    """TP/FP flag per detection (given in descending score order) for one image and class.

    Each detection takes the highest-IoU ground truth not yet matched, if
    that IoU reaches ``iou_thr``.
    """
    matched = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_iou = -1, iou_thr
        for g, gt in enumerate(gts):
            if matched[g]:
                continue
            o = iou(d, gt)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = g, o
        if best >= 0:
            matched[best] = True
        flags.append(best >= 0)
    return flags


def pr_curve(flags: Sequence[bool], scores: Sequence[float], num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(flags, dtype=np.float64)[order]
    ctp, cfp = np.cumsum(tp), np.cumsum(1.0 - tp)
    recall = ctp / max(num_gt, 1)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    return recall, precision


def average_precision(flags: Sequence[bool], scores: Sequence[float], num_gt: int) -> float | None:
    """All-point interpolated area under the precision/recall curve.

    Returns None when ``num_gt`` is 0 (the class is absent and excluded from
    the mean).
    """
    if num_gt == 0:
        return None
    if len(flags) == 0:
        return 0.0
    recall, precision = pr_curve(flags, scores, num_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_detections(predictions: Sequence[Sequence[Detection]], ground_truth: Sequence[Sequence[Annotation]],
                        num_classes: int, iou_thr: float = 0.5) -> EvalResult:
    if len(predictions) != len(ground_truth):
        raise ValueError("one prediction list per image is required")
    flags: list[list[bool]] = [[] for _ in range(num_classes)]
    scores: list[list[float]] = [[] for _ in range(num_classes)]
    num_gt = [0] * num_classes
    for dets, gts in zip(predictions, ground_truth):
        for k in range(num_classes):
            gk = [a.box for a in gts if a.class_id == k]
            dk = sorted((d for d in dets if d.class_id == k), key=lambda d: -d.score)
            num_gt[k] += len(gk)
            flags[k].extend(match_detections([d.box for d in dk], gk, iou_thr))
            scores[k].extend(d.score for d in dk)
    aps, curves = [], {}
    for k in range(num_classes):
        aps.append(average_precision(flags[k], scores[k], num_gt[k]))
        if flags[k]:
            curves[k] = pr_curve(flags[k], scores[k], num_gt[k])
    present = [ap for ap in aps if ap is not None]
    map50 = float(np.mean(present)) if present else 0.0
    return EvalResult(aps, map50, num_gt, [len(f) for f in flags], curves)


def evaluate(model: Detector, dataset: DomainDataset, num_classes: int, score_threshold: float = 0.05,
             nms_iou: float = 0.5, batch_size: int = 64) -> EvalResult:
    """Detect on every image of a labeled split and score AP50 per class."""
    if not dataset.labeled:
        raise ValueError("evaluation needs a labeled dataset")
    was_training = model.training
    model.eval()
    preds: list[list[Detection]] = []
    try:
        for start in range(0, len(dataset), batch_size):
            batch = images_to_tensor(dataset.images[start:start + batch_size])
            preds.extend(detect(batch, model, score_threshold, nms_iou))
    finally:
        model.train(was_training)
    return evaluate_detections(preds, dataset.annotations, num_classes)
