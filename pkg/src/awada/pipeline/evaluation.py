"""Detection AP, style-fidelity metrics and the evaluation report format."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..nets import Proposal, iou


def compute_ap(predictions: Sequence[Sequence[Proposal]], gt: Sequence[Sequence[Sequence[float]]],
               iou_thresh: float = 0.5) -> float:
    """Single-class average precision with all-points interpolation.

    Predictions across all images are visited by descending confidence; each
    one claims the unmatched ground-truth box of its image with the highest
    IoU, and counts as a true positive if that IoU reaches ``iou_thresh``.
    With no ground truth at all, AP is 1.0 for no predictions and 0.0 otherwise.
    """
    n_gt = sum(len(g) for g in gt)
    recall, precision = precision_recall(predictions, gt, iou_thresh)
    if n_gt == 0:
        return 1.0 if len(recall) == 0 else 0.0
    if len(recall) == 0:
        return 0.0
    return interpolated_area(recall, precision)


def precision_recall(predictions: Sequence[Sequence[Proposal]], gt: Sequence[Sequence[Sequence[float]]],
                     iou_thresh: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each prediction, in descending confidence order."""
    if len(predictions) != len(gt):
        raise ValueError("predictions and ground truth cover different numbers of images")
    n_gt = sum(len(g) for g in gt)
    flat = [(p.confidence, img, p) for img, preds in enumerate(predictions) for p in preds]
    order = sorted(range(len(flat)), key=lambda k: -flat[k][0])
    matched = [np.zeros(len(g), dtype=bool) for g in gt]
    tp = np.zeros(len(flat))
    for rank, k in enumerate(order):
        _, img, p = flat[k]
        best, best_j = -1.0, -1
        for j, box in enumerate(gt[img]):
            if matched[img][j]:
                continue
            o = iou(p.box, box)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_thresh:
            matched[img][best_j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / max(n_gt, 1)
    precision = ctp / np.arange(1, len(flat) + 1)
    return recall, precision


def interpolated_area(recall: np.ndarray, precision: np.ndarray) -> float:
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    steps = np.where(r[1:] != r[:-1])[0]
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def fidelity_l1(stylized: np.ndarray, oracle: np.ndarray, masks: np.ndarray) -> Tuple[float, float]:
    """Mean absolute error to the oracle over foreground and background pixels.

    Images are N x H x W x 3 in [0, 1]; the per-pixel error is averaged over channels.
    """
    err = np.abs(stylized - oracle).mean(axis=-1)
    fg = masks.astype(bool)
    fg_l1 = float(err[fg].mean()) if fg.any() else 0.0
    bg_l1 = float(err[~fg].mean()) if (~fg).any() else 0.0
    return fg_l1, bg_l1


@dataclass
class EvalRow:
    gan_seed: int
    det_seed: int
    fg_l1: float
    bg_l1: float
    ap: float
    pr: Tuple[Tuple[float, float], ...] = ()

    @property
    def seed(self) -> str:
        return f"g{self.gan_seed}-d{self.det_seed}"


class ReportError(ValueError):
    pass


@dataclass
class EvalReport:
    label: str
    rows: List[EvalRow] = field(default_factory=list)

    def __post_init__(self):
        for r in self.rows:
            if not 0.0 <= r.ap <= 1.0 or r.fg_l1 < 0 or r.bg_l1 < 0:
                raise ReportError(f"invalid report row {r}")

    def aggregate(self) -> Dict[str, float]:
        out = {}
        for key in ("fg_l1", "bg_l1", "ap"):
            vals = [getattr(r, key) for r in self.rows]
            out[f"{key}_mean"] = statistics.fmean(vals) if vals else float("nan")
            out[f"{key}_std"] = statistics.pstdev(vals) if len(vals) > 1 else 0.0
            out[f"{key}_median"] = statistics.median(vals) if vals else float("nan")
        return out

    def to_text(self) -> str:
        lines = [f"label = {self.label}", f"n_runs = {len(self.rows)}"]
        for k, v in self.aggregate().items():
            lines.append(f"{k} = {v!r}")
        for r in self.rows:
            lines.append(f"run.{r.seed} = fg_l1={r.fg_l1!r} bg_l1={r.bg_l1!r} ap={r.ap!r}")
        for r in self.rows:
            if r.pr:
                lines.append(f"pr.{r.seed} = " + " ".join(f"{rc!r}:{pc!r}" for rc, pc in r.pr))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["seed,fg_l1,bg_l1,ap"]
        lines += [f"{r.seed},{r.fg_l1!r},{r.bg_l1!r},{r.ap!r}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def equals(self, other: "EvalReport") -> bool:
        return self.to_text() == other.to_text()


def parse_report(text: str, origin: str = "<report>") -> EvalReport:
    label, rows, curves = None, [], {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if " = " not in line:
            raise ReportError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = line.split(" = ", 1)
        if key == "label":
            label = value
        elif key.startswith("run."):
            seed = key[4:]
            try:
                g, d = seed.split("-")
                fields_ = dict(item.split("=") for item in value.split())
                rows.append(EvalRow(int(g[1:]), int(d[1:]), float(fields_["fg_l1"]),
                                    float(fields_["bg_l1"]), float(fields_["ap"])))
            except (ValueError, KeyError) as exc:
                raise ReportError(f"{origin}:{lineno}: malformed run line") from exc
        elif key.startswith("pr."):
            try:
                curves[key[3:]] = tuple(tuple(float(v) for v in pt.split(":")) for pt in value.split())
            except ValueError as exc:
                raise ReportError(f"{origin}:{lineno}: malformed pr line") from exc
            if any(len(pt) != 2 for pt in curves[key[3:]]):
                raise ReportError(f"{origin}:{lineno}: malformed pr line")
    if label is None:
        raise ReportError(f"{origin}: missing label")
    for r in rows:
        r.pr = curves.pop(r.seed, ())
    if curves:
        raise ReportError(f"{origin}: pr curve for unknown run {sorted(curves)[0]}")
    return EvalReport(label, rows)
