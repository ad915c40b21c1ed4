"""Detection and range-error metrics plus report rendering.

Detection matching is single-class and greedy: detections are visited in
descending score order and each takes the unmatched ground-truth box of the
same image with the highest IoU, provided that IoU is at least 0.5.  AP uses
all-point interpolation of the precision-recall curve.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

IOU_THRESHOLD = 0.5
CONF_THRESHOLD = 0.25
BIN_EDGES = (0.0, 20.0, 40.0, 60.0, 80.0)
BIN_LABELS = ("[0,20)", "[20,40)", "[40,60)", "[60,80]")
METRIC_COLUMNS = ("err_0_20", "err_20_40", "err_40_60", "err_60_80", "map50", "precision", "recall")


def _corners(box, fmt):
    if fmt == "xyxy":
        x0, y0, x1, y1 = box
    elif fmt == "cxcywh":
        cx, cy, w, h = box
        x0, y0, x1, y1 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    else:
        raise ContractError(f"unknown box format {fmt!r}")
    if x1 <= x0 or y1 <= y0:
        raise ContractError(f"degenerate box {box}")
    return x0, y0, x1, y1


def iou(a, b, fmt="cxcywh"):
    """Intersection over union of two boxes, ``(cx, cy, w, h)`` or ``(x0, y0, x1, y1)``."""
    ax0, ay0, ax1, ay1 = _corners(a, fmt)
    bx0, by0, bx1, by1 = _corners(b, fmt)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def _gt_lists(gts):
    """Normalise ground truth to a list of box lists (``None`` means no object)."""
    out = []
    for g in gts:
        if g is None:
            out.append([])
        elif len(g) == 4 and not isinstance(g[0], (tuple, list, np.ndarray)):
            out.append([tuple(g)])
        else:
            out.append([tuple(b) for b in g])
    return out


def _scored(detections):
    flat = []
    for img, dets in enumerate(detections):
        for d in dets:
            box, score = (d.box, d.score) if hasattr(d, "box") else (d[0], d[1])
            flat.append((float(score), img, tuple(box)))
    # stable: ties keep image order then within-image order
    flat.sort(key=lambda t: -t[0])
    return flat


def match(detections, gts, conf=0.0):
    """Greedy one-to-one matching; returns (scores, tp flags, number of GT boxes)."""
    gt = _gt_lists(gts)
    if len(gt) != len(detections):
        raise ContractError("one ground-truth entry per image required")
    used = [[False] * len(g) for g in gt]
    scores, tps = [], []
    for score, img, box in _scored(detections):
        if score < conf:
            continue
        best, best_iou = -1, IOU_THRESHOLD
        for k, g in enumerate(gt[img]):
            if used[img][k]:
                continue
            v = iou(box, g)
            if v >= best_iou:
                best, best_iou = k, v
        if best >= 0:
            used[img][best] = True
        scores.append(score)
        tps.append(best >= 0)
    return np.array(scores), np.array(tps, dtype=bool), sum(len(g) for g in gt)


def average_precision_50(detections, gts):
    """All-point interpolated AP at IoU 0.5 for a single class."""
    _, tp, npos = match(detections, gts)
    if npos == 0:
        return 1.0 if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / npos
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def precision_recall(detections, gts, conf=CONF_THRESHOLD):
    """Precision and recall of detections scoring at least ``conf``."""
    _, tp, npos = match(detections, gts, conf)
    n_tp = int(tp.sum())
    n_det = tp.size
    if n_det == 0:
        precision = 1.0 if npos == 0 else 0.0
    else:
        precision = n_tp / n_det
    if npos == 0:
        recall = 1.0 if n_det == 0 else 0.0
    else:
        recall = n_tp / npos
    return precision, recall


@dataclass
class DetectionMetrics:
    map50: float
    precision: float
    recall: float
    matches: list = field(default_factory=list)


def detection_metrics(detections, gts, conf=CONF_THRESHOLD):
    scores, tp, _ = match(detections, gts)
    p, r = precision_recall(detections, gts, conf)
    return DetectionMetrics(average_precision_50(detections, gts), p, r, list(zip(scores.tolist(), tp.tolist())))


@dataclass
class RangeBinnedError:
    """Per-bin signed mean error (metres), mean absolute error and frame count."""

    means: list
    abs_means: list
    counts: list
    edges: tuple = BIN_EDGES

    def as_dict(self):
        return dict(zip(BIN_LABELS, self.means))


def bin_index(clean_preds):
    """Bin of each clean prediction; values outside [0, 80] go to the end bins."""
    v = np.clip(np.asarray(clean_preds, dtype=np.float64), BIN_EDGES[0], BIN_EDGES[-1])
    return np.minimum(np.searchsorted(BIN_EDGES, v, side="right") - 1, len(BIN_LABELS) - 1)


def binned_signed_error(clean_preds, cond_preds):
    """Group ``cond - clean`` by the bin of the clean prediction."""
    clean = np.asarray(clean_preds, dtype=np.float64)
    cond = np.asarray(cond_preds, dtype=np.float64)
    if clean.shape != cond.shape:
        raise ContractError("clean and conditioned predictions differ in length")
    err = cond - clean
    idx = bin_index(clean)
    means, abs_means, counts = [], [], []
    for b in range(len(BIN_LABELS)):
        sel = err[idx == b]
        counts.append(int(sel.size))
        means.append(float(sel.sum() / sel.size) if sel.size else float("nan"))
        abs_means.append(float(np.abs(sel).sum() / sel.size) if sel.size else float("nan"))
    return RangeBinnedError(means, abs_means, counts)


def psnr(a, b, peak=1.0):
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# report tables


@dataclass
class ReportRow:
    attack: str
    defense: str
    metrics: dict
    run_id: str = ""


@dataclass
class ReportTable:
    rows: list = field(default_factory=list)
    columns: tuple = METRIC_COLUMNS
    metadata: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)


def _header_comment(table):
    meta = table.metadata
    if not meta:
        return ""
    parts = [f"{k}={meta[k]}" for k in sorted(meta)]
    return "# " + " ".join(parts) + "\n"


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.2f}"


def emit_report(table, fmt="csv"):
    """Render the table as CSV (two-decimal display values) or Markdown, as bytes."""
    cols = list(table.columns)
    if fmt == "csv":
        buf = io.StringIO()
        buf.write(_header_comment(table))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", "defense"] + cols)
        for r in table.rows:
            w.writerow([r.attack, r.defense] + [_fmt(r.metrics.get(c)) for c in cols])
        return buf.getvalue().encode("utf-8")
    if fmt == "markdown":
        lines = []
        head = _header_comment(table)
        if head:
            lines.append(f"<!-- {head[2:].strip()} -->")
        lines.append("| attack | defense | " + " | ".join(cols) + " |")
        lines.append("|" + "---|" * (len(cols) + 2))
        for r in table.rows:
            lines.append(f"| {r.attack} | {r.defense} | " + " | ".join(_fmt(r.metrics.get(c)) for c in cols) + " |")
        return ("\n".join(lines) + "\n").encode("utf-8")
    if fmt == "raw":
        return emit_raw(table)
    raise ContractError(f"unknown report format {fmt!r}")


def emit_raw(table):
    """Full-precision sidecar: ``repr`` of every float so parsing is lossless."""
    buf = io.StringIO()
    buf.write(_header_comment(table))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attack", "defense", "run_id"] + list(table.columns))
    for r in table.rows:
        w.writerow([r.attack, r.defense, r.run_id] + [repr(float(r.metrics.get(c, float("nan")))) for c in table.columns])
    return buf.getvalue().encode("utf-8")


def parse_raw(data):
    """Inverse of :func:`emit_raw` (metadata comment lines are skipped)."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    cols = tuple(header[3:])
    rows = [ReportRow(rec[0], rec[1], {c: float(v) for c, v in zip(cols, rec[3:])}, rec[2]) for rec in reader]
    return ReportTable(rows, cols)


def run_benchmark_matrix(models, attacks, defenses, data, seed=0, **kwargs):
    """Attack x defense matrix; see :func:`arwb.bench.run_benchmark_matrix`."""
    from .bench import run_benchmark_matrix as run

    return run(models, attacks, defenses, data, seed, **kwargs)
