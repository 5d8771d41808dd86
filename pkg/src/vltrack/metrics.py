"""Success/precision metrics, evaluation reports and the held-out risk probe.

Boundary convention, applied everywhere: a frame passes an overlap threshold
when ``IoU > t`` and a distance threshold when ``dist < r``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import lang as L
from .errors import MetricError, ProbeError
from .tensor import Tensor, no_grad
from .tracker import tracking_loss

N_SUC_THRESHOLDS = 21  # t = k / 20, k = 0..20
PRECISION_RADIUS = 8.0
PNORM_THRESHOLDS = tuple(k / 20 for k in range(11))  # 0.00 .. 0.50


def _cxcywh(b):
    if hasattr(b, "as_tuple"):
        return b.as_tuple()
    cx, cy, w, h = (float(v) for v in b)
    return cx, cy, w, h


def iou(a, b) -> float:
    """Overlap of two (cx, cy, w, h) boxes or :class:`~vltrack.tracker.Box` objects."""
    acx, acy, aw, ah = _cxcywh(a)
    bcx, bcy, bw, bh = _cxcywh(b)
    iw = min(acx + aw / 2, bcx + bw / 2) - max(acx - aw / 2, bcx - bw / 2)
    ih = min(acy + ah / 2, bcy + bh / 2) - max(acy - ah / 2, bcy - bh / 2)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return float(min(1.0, inter / union)) if union > 0 else 0.0


def iou_series(pred, gt):
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise MetricError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    return np.array([iou(p, g) for p, g in zip(pred, gt)])


def suc(series) -> float:
    """Mean over t in {0, 0.05, ..., 1} of the fraction of frames with IoU > t."""
    s = np.asarray(series, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise MetricError("success score of an empty series")
    passed = sum(int(np.count_nonzero(s > k / 20)) for k in range(N_SUC_THRESHOLDS))
    return passed / (N_SUC_THRESHOLDS * s.size)


def center_distances(pred_centers, gt_centers):
    p, g = np.asarray(pred_centers, float), np.asarray(gt_centers, float)
    if p.shape != g.shape:
        raise MetricError(f"{len(p)} predicted centres vs {len(g)} ground-truth centres")
    if p.size == 0:
        raise MetricError("precision of an empty series")
    return np.hypot(p[:, 0] - g[:, 0], p[:, 1] - g[:, 1])


def precision(pred_centers, gt_centers, radius=PRECISION_RADIUS) -> float:
    d = center_distances(pred_centers, gt_centers)
    return int(np.count_nonzero(d < radius)) / d.size


def p_norm(pred_centers, gt_centers, gt_sizes, thresholds=PNORM_THRESHOLDS) -> float:
    """Precision on centre offsets divided by the gt width/height, averaged over thresholds."""
    p, g = np.asarray(pred_centers, float), np.asarray(gt_centers, float)
    center_distances(p, g)
    wh = np.asarray(gt_sizes, float)
    d = np.hypot((p[:, 0] - g[:, 0]) / wh[:, 0], (p[:, 1] - g[:, 1]) / wh[:, 1])
    passed = sum(int(np.count_nonzero(d < t)) for t in thresholds)
    return passed / (len(thresholds) * d.size)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

BREAKDOWN_KEYS = ("distractor", "occlusion")


@dataclass
class SequenceResult:
    name: str
    iou: list
    suc: float
    precision: float
    p_norm: float
    distractor: bool = False
    occlusion: bool = False


@dataclass
class EvalReport:
    sequences: list
    suc: float
    precision: float
    p_norm: float
    breakdown: dict
    config_fingerprint: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["sequences"] = [SequenceResult(**s) for s in d["sequences"]]
        return cls(**d)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())


def sequence_result(name, pred, gt, distractor=False, occlusion=False) -> SequenceResult:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    ious = iou_series(pred, gt)
    return SequenceResult(
        name=str(name),
        iou=[float(v) for v in ious],
        suc=suc(ious),
        precision=precision(pred[:, :2], gt[:, :2]),
        p_norm=p_norm(pred[:, :2], gt[:, :2], gt[:, 2:]),
        distractor=bool(distractor),
        occlusion=bool(occlusion),
    )


def _summary(results):
    if not results:
        return {"n": 0, "suc": None, "precision": None}
    return {
        "n": len(results),
        "suc": math.fsum(r.suc for r in results) / len(results),
        "precision": math.fsum(r.precision for r in results) / len(results),
    }


def build_report(results, config_fingerprint, extra=None) -> EvalReport:
    """Aggregate per-sequence results; overall scores are means over sequences."""
    if not results:
        raise MetricError("no sequences to report")
    n = len(results)
    breakdown = {
        key: {
            "present": _summary([r for r in results if getattr(r, key)]),
            "absent": _summary([r for r in results if not getattr(r, key)]),
        }
        for key in BREAKDOWN_KEYS
    }
    return EvalReport(
        sequences=list(results),
        suc=math.fsum(r.suc for r in results) / n,
        precision=math.fsum(r.precision for r in results) / n,
        p_norm=math.fsum(r.p_norm for r in results) / n,
        breakdown=breakdown,
        config_fingerprint=str(config_fingerprint),
        extra=dict(extra or {}),
    )


# ---------------------------------------------------------------------------
# held-out risk probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeSubject:
    """A trained model plus what it needs to be scored on held-out pairs.

    ``schedule`` fingerprints the training schedule; two subjects can only be
    compared when it matches. ``uses_language`` selects description input
    versus the zero selector.
    """

    model: object
    genome: object
    schedule: str
    uses_language: bool = True


@dataclass
class RiskGapReport:
    risk_multi: float
    risk_single: float
    gap: float
    n_pairs: int
    schedule: str

    def to_dict(self):
        return asdict(self)


def heldout_risk(subject: ProbeSubject, pairs, batch_size=8) -> float:
    """Mean tracking loss of ``subject`` over fixed held-out pairs (eval mode, no grad)."""
    model = subject.model
    plan = model.plan
    dtype = model.supernet.template.stem.conv.weight.dtype
    model.eval()
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(pairs), batch_size):
            chunk = pairs[s : s + batch_size]
            descs = [p.description for p in chunk]
            boxes = np.stack([p.template_box for p in chunk])
            if subject.uses_language:
                lin = L.LanguageInput(descs, L.ZERO, boxes)
            else:
                lin = L.LanguageInput(descs, L.ZERO, boxes, force_mode=L.ZERO)
            maps = model(
                Tensor(np.stack([p.template for p in chunk]).astype(dtype)),
                Tensor(np.stack([p.search for p in chunk]).astype(dtype)),
                lin,
                subject.genome,
            )
            loss = tracking_loss(maps, np.stack([p.search_box for p in chunk]), plan.total_stride, plan.search_size)
            total += float(loss.data) * len(chunk)
            count += len(chunk)
    return total / count


def risk_gap_probe(model_multi: ProbeSubject, model_single: ProbeSubject, heldout) -> RiskGapReport:
    """Held-out risk of each model and ``gap = risk_single - risk_multi``.

    Positive gap means the model trained with language generalizes better.
    Nothing is asserted about its sign.
    """
    if model_multi.schedule != model_single.schedule:
        raise ProbeError(f"schedule fingerprints differ: {model_multi.schedule} vs {model_single.schedule}")
    pairs = list(heldout)
    if not pairs:
        raise ProbeError("empty held-out set")
    r_multi = heldout_risk(model_multi, pairs)
    r_single = r_multi if model_single is model_multi else heldout_risk(model_single, pairs)
    return RiskGapReport(r_multi, r_single, r_single - r_multi, len(pairs), model_multi.schedule)
