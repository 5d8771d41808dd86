"""Matching head, box geometry, tracking loss and the frame-by-frame tracker.

Coordinates: a search image is ``search_size`` pixels wide and response cell
``(i, j)`` is centred at ``search_size / 2 + (j - (R - 1) / 2) * stride``.
Regression outputs are distances (l, t, r, b) from the cell centre to the box
sides, in units of cells.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import lang as L
from . import ops
from .nn import Conv2d, ConvBN, Module, Sequential
from .supernet import DESK_PLAN, Genome, StagePlan, Supernet, TemplateState
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

TEMPLATE_CONTEXT = 2.0  # template crop side / box scale
SEARCH_CONTEXT = 2.5  # search window side / template crop side
POSITIVE_FRACTION = 0.6  # central part of the gt box whose cells count as positive
REG_LOG_LIMIT = 6.0  # regression logits are clipped before exp; e^6 cells spans any window


@dataclass
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive extent, got w={self.w}, h={self.h}")

    @property
    def scale(self):
        return math.sqrt(self.w * self.h)

    def xyxy(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_tuple(self):
        return (self.cx, self.cy, self.w, self.h)


@dataclass
class ResponseMaps:
    cls: Tensor  # (N, 1, R, R) logits
    ctr: Tensor  # (N, 1, R, R) logits
    reg: Tensor  # (N, 4, R, R) positive distances in cells


@dataclass
class Window:
    """Square crop of a frame: centre and side in frame pixels, output size in pixels."""

    cx: float
    cy: float
    side: float
    size: int

    @property
    def scale(self):
        return self.side / self.size

    def to_frame(self, u, v):
        return self.cx + (u - self.size / 2) * self.scale, self.cy + (v - self.size / 2) * self.scale

    def from_frame(self, x, y):
        return (x - self.cx) / self.scale + self.size / 2, (y - self.cy) / self.scale + self.size / 2

    def box_to_crop(self, box: Box):
        u, v = self.from_frame(box.cx, box.cy)
        return Box(u, v, box.w / self.scale, box.h / self.scale)


def template_window(box: Box, plan: StagePlan):
    return Window(box.cx, box.cy, TEMPLATE_CONTEXT * box.scale, plan.template_size)


def search_window(cx, cy, box_scale, plan: StagePlan):
    return Window(cx, cy, SEARCH_CONTEXT * TEMPLATE_CONTEXT * box_scale, plan.search_size)


def crop(frame, win: Window, pad_value=None):
    """Bilinear resample of ``frame`` (3, H, W) inside ``win`` -> (3, size, size)."""
    c, h, w = frame.shape
    if pad_value is None:
        pad_value = frame.mean(axis=(1, 2))
    t = (np.arange(win.size) + 0.5) * win.scale
    xs = win.cx - win.side / 2 + t - 0.5
    ys = win.cy - win.side / 2 + t - 0.5
    padded = np.empty((c, h + 2, w + 2), dtype=frame.dtype)
    padded[:] = np.asarray(pad_value, dtype=frame.dtype)[:, None, None]
    padded[:, 1:-1, 1:-1] = frame
    xs = np.clip(xs + 1, 0, w + 1 - 1e-6)
    ys = np.clip(ys + 1, 0, h + 1 - 1e-6)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h)
    fx = (xs - x0).astype(frame.dtype)
    fy = (ys - y0).astype(frame.dtype)
    top = padded[:, y0][:, :, x0] * (1 - fx) + padded[:, y0][:, :, x0 + 1] * fx
    bot = padded[:, y0 + 1][:, :, x0] * (1 - fx) + padded[:, y0 + 1][:, :, x0 + 1] * fx
    return top * (1 - fy)[None, :, None] + bot * fy[None, :, None]


def template_box_in_crop(plan: StagePlan):
    """(x1, y1, x2, y2) of a square target in its own template crop."""
    half = plan.template_size / (2 * TEMPLATE_CONTEXT)
    c = plan.template_size / 2
    return (c - half, c - half, c + half, c + half)


def template_boxes_in_crop(boxes, plan: StagePlan):
    out = []
    for b in boxes:
        s = plan.template_size / (TEMPLATE_CONTEXT * b.scale)
        c = plan.template_size / 2
        out.append((c - b.w * s / 2, c - b.h * s / 2, c + b.w * s / 2, c + b.h * s / 2))
    return np.asarray(out, dtype=np.float64)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

def dw_xcorr(f_t, f_s):
    return ops.dw_xcorr(f_s, f_t)


class Head(Module):
    """Classification/centerness tower and regression tower, three 3x3 convs each."""

    def __init__(self, cin, hidden, rng=None):
        self.cls_tower = Sequential([ConvBN(cin, hidden, 3, rng=rng), ConvBN(hidden, hidden, 3, rng=rng), ConvBN(hidden, hidden, 3, rng=rng)])
        self.reg_tower = Sequential([ConvBN(cin, hidden, 3, rng=rng), ConvBN(hidden, hidden, 3, rng=rng), ConvBN(hidden, hidden, 3, rng=rng)])
        self.cls_out = Conv2d(hidden, 1, 3, bias=True, rng=rng)
        self.ctr_out = Conv2d(hidden, 1, 3, bias=True, rng=rng)
        self.reg_out = Conv2d(hidden, 4, 3, bias=True, rng=rng)
        for conv in (self.cls_out, self.ctr_out, self.reg_out):
            conv.weight.data *= 0.1

    def zero_init_final(self):
        for conv in (self.cls_out, self.ctr_out, self.reg_out):
            conv.weight.data[:] = 0
            conv.bias.data[:] = 0

    def forward(self, corr):
        c = self.cls_tower(corr)
        r = self.reg_tower(corr)
        return ResponseMaps(self.cls_out(c), self.ctr_out(c), ops.exp(ops.clip(self.reg_out(r), -REG_LOG_LIMIT, REG_LOG_LIMIT)))


def head_forward(head, corr):
    return head(corr)


class TrackerNet(Module):
    """Supernet backbone + depthwise cross-correlation + head."""

    def __init__(self, plan: StagePlan = DESK_PLAN, vocab=None, seed=0, use_modamixer=True, selector_activation="none"):
        rng = np.random.default_rng(seed)
        self.plan = plan
        self.supernet = Supernet(plan, vocab, rng=rng, use_modamixer=use_modamixer, selector_activation=selector_activation)
        self.head = Head(plan.out_channels, plan.head_channels, rng=rng)

    @property
    def vocab(self):
        return self.supernet.lang.vocab

    def response_size(self):
        return self.plan.feature_size(self.plan.search_size) - self.plan.feature_size(self.plan.template_size) + 1

    def forward(self, x_t, x_s, lang_input, genome: Genome):
        f_t, f_s = self.supernet(x_t, x_s, lang_input, genome)
        return self.head(dw_xcorr(f_t, f_s))

    def match(self, state, x_s, genome):
        f_s = self.supernet.forward_search(x_s, state, genome)
        if state.feature.shape[0] != f_s.shape[0]:
            raise ValueError("template/search batch mismatch")
        return self.head(dw_xcorr(state.feature, f_s))


# ---------------------------------------------------------------------------
# targets, loss, decoding
# ---------------------------------------------------------------------------

def cell_centers(r, stride, size):
    return size / 2 + (np.arange(r) - (r - 1) / 2) * stride


def centerness(l, t, r, b):
    lr = np.minimum(l, r) / np.maximum(l, r)
    tb = np.minimum(t, b) / np.maximum(t, b)
    return np.sqrt(lr * tb)


def build_targets(gt_xyxy, r, stride, size):
    """Per-sample targets for boxes given in search-image pixels.

    Returns (positive mask (N, R, R), ltrb distances in cells (N, 4, R, R),
    centerness targets (N, R, R)).
    """
    gt = np.asarray(gt_xyxy, dtype=np.float64).reshape(-1, 4)
    c = cell_centers(r, stride, size)
    px = c[None, None, :]
    py = c[None, :, None]
    x1, y1, x2, y2 = (gt[:, i, None, None] for i in range(4))
    l, t = (px - x1) / stride, (py - y1) / stride
    rr, b = (x2 - px) / stride, (y2 - py) / stride
    ltrb = np.stack(np.broadcast_arrays(l, t, rr, b), axis=1)
    gcx, gcy = (x1 + x2) / 2, (y1 + y2) / 2
    hw, hh = (x2 - x1) * POSITIVE_FRACTION / 2, (y2 - y1) * POSITIVE_FRACTION / 2
    pos = (np.abs(px - gcx) <= hw) & (np.abs(py - gcy) <= hh)
    pos = pos & (ltrb.min(axis=1) > 0)
    ctr = np.where(pos, centerness(*np.clip(ltrb, 1e-6, None).transpose(1, 0, 2, 3)), 0.0)
    return pos, ltrb, ctr


def tracking_loss(maps: ResponseMaps, gt_xyxy, stride, size, reg_weight=3.0):
    """cls + ctr + reg_weight * IoU loss, for gt boxes in search-image pixels."""
    n, _, r, _ = maps.cls.shape
    pos, ltrb, ctr_t = build_targets(gt_xyxy, r, stride, size)
    npos = int(pos.sum())
    neg = ~pos
    dtype = maps.cls.dtype
    for i in range(n):
        if not pos[i].any():
            logger.warning("sample %d has no positive cells; only its classification loss is used", i)
    # classification: positives and negatives weighted to equal total mass
    w = np.zeros((n, 1, r, r))
    if npos:
        w[:, 0][pos] = 0.5 / npos
        w[:, 0][neg] = 0.5 / neg.sum()
    else:
        w[:] = 1.0 / w.size
    loss = ops.bce_with_logits(maps.cls, pos[:, None].astype(dtype), w)
    if npos:
        wp = pos[:, None].astype(dtype) / npos
        loss = ops.add(loss, ops.bce_with_logits(maps.ctr, ctr_t[:, None].astype(dtype), wp))
        iou = ops.iou_loss(maps.reg, np.clip(ltrb, 0, None).astype(dtype), pos.astype(dtype) / npos)
        loss = ops.add(loss, ops.mul(iou, reg_weight))
    return loss


def score_map(maps: ResponseMaps):
    return ops._sigmoid(maps.cls.data[:, 0]) * ops._sigmoid(maps.ctr.data[:, 0])


def decode(maps: ResponseMaps, window: Window, stride, index=0):
    """argmax of sigmoid(cls) * sigmoid(ctr) -> (frame Box, score)."""
    p = score_map(maps)[index]
    r = p.shape[0]
    flat = int(np.argmax(p))  # first maximum in row-major order
    i, j = divmod(flat, r)
    c = cell_centers(r, stride, window.size)
    l, t, rr, b = (float(v) for v in maps.reg.data[index, :, i, j])
    u1, v1 = c[j] - l * stride, c[i] - t * stride
    u2, v2 = c[j] + rr * stride, c[i] + b * stride
    cx, cy = window.to_frame((u1 + u2) / 2, (v1 + v2) / 2)
    box = Box(cx, cy, (u2 - u1) * window.scale, (v2 - v1) * window.scale)
    return box, float(p[i, j])


# ---------------------------------------------------------------------------
# tracking loop
# ---------------------------------------------------------------------------

@dataclass
class TrackResult:
    boxes: list
    scores: list
    selectors: dict  # (stage, branch) -> selector vector


def track_sequences(model: TrackerNet, genome: Genome, sequences, lang_mode=L.DESCRIPTION, fallback=L.ZERO, descriptions=None):
    """Track several sequences in lock-step, one frame at a time.

    Each sequence is causal on its own: frame k's prediction uses frames <= k.
    ``lang_mode`` is ``description`` (missing/empty descriptions use
    ``fallback``), ``zero`` or ``template_pool``.
    """
    plan = model.plan
    model.eval()
    n = len(sequences)
    if descriptions is None:
        descriptions = [s.description for s in sequences]
    init = [Box(*s.gt[0]) for s in sequences]
    tb = template_boxes_in_crop(init, plan)
    if lang_mode == L.DESCRIPTION:
        lin = L.LanguageInput(list(descriptions), fallback=fallback, template_boxes=tb)
    else:
        lin = L.LanguageInput(list(descriptions), fallback=L.ZERO, template_boxes=tb, force_mode=lang_mode)
    for i, m in enumerate(lin.modes):
        if lang_mode == L.DESCRIPTION and m != L.DESCRIPTION:
            logger.info("sequence %d has no description; using %s fallback", i, m)
    dtype = model.supernet.template.stem.conv.weight.dtype
    stride = plan.total_stride
    with no_grad():
        x_t = np.stack([crop(np.asarray(s.frame(0)), template_window(b, plan)) for s, b in zip(sequences, init)]).astype(dtype)
        model.supernet.last_selectors = {}
        state = model.supernet.forward_template(Tensor(x_t), lin, genome)
        centers = [(b.cx, b.cy) for b in init]
        scales = [b.scale for b in init]
        boxes = [[b.as_tuple()] for b in init]
        scores = [[1.0] for _ in init]
        lengths = [len(s) for s in sequences]
        sels = {key: v.copy() for key, v in model.supernet.last_selectors.items()}
        for k in range(1, max(lengths)):
            active = [i for i in range(n) if k < lengths[i]]
            wins = [search_window(centers[i][0], centers[i][1], scales[i], plan) for i in active]
            x_s = np.stack([crop(np.asarray(sequences[i].frame(k)), w) for i, w in zip(active, wins)]).astype(dtype)
            sub = _select_state(state, active, n)
            maps = model.match(sub, Tensor(x_s), genome)
            for row, (i, w) in enumerate(zip(active, wins)):
                if not all(np.isfinite(m.data[row]).all() for m in (maps.cls, maps.ctr, maps.reg)):
                    logger.warning("non-finite response for sequence %d frame %d; keeping the previous box", i, k)
                    boxes[i].append(boxes[i][-1])
                    scores[i].append(0.0)
                    continue
                box, sc = decode(maps, w, stride, index=row)
                fh, fw = np.asarray(sequences[i].frame(k)).shape[1:]
                cx = min(max(box.cx, 0.0), float(fw))
                cy = min(max(box.cy, 0.0), float(fh))
                centers[i] = (cx, cy)
                boxes[i].append((cx, cy, box.w, box.h))
                scores[i].append(sc)
            if k == 1:
                sels.update({key: v.copy() for key, v in model.supernet.last_selectors.items()})
    return [
        TrackResult(boxes[i], scores[i], {key: v[i] for key, v in sels.items()}) for i in range(n)
    ]


def _select_state(state, rows, n):
    if len(rows) == n:
        return state

    idx = np.asarray(rows)
    lin = state.lang_input
    sub_lin = L.LanguageInput(
        [lin.descriptions[i] for i in rows],
        fallback=lin.fallback,
        template_boxes=None if lin.template_boxes is None else lin.template_boxes[idx],
        force_mode=lin.force_mode,
    )
    emb = None if state.embeddings is None else Tensor(state.embeddings.data[idx])
    return TemplateState(
        Tensor(state.feature.data[idx]), [Tensor(f.data[idx]) for f in state.stage_feats], sub_lin, emb
    )


def track_sequence(model, genome, seq, lang_mode=L.DESCRIPTION, fallback=L.ZERO, description=None):
    descs = None if description is None else [description]
    return track_sequences(model, genome, [seq], lang_mode, fallback, descs)[0]


def write_predictions(path, boxes, scores):
    with open(path, "w", encoding="ascii", newline="\n") as f:
        for k, (b, s) in enumerate(zip(boxes, scores)):
            f.write(f"{k} {b[0]:.4f} {b[1]:.4f} {b[2]:.4f} {b[3]:.4f} {s:.6f}\n")


def read_predictions(path):
    boxes, scores = [], []
    with open(path, encoding="ascii") as f:
        for line in f:
            parts = line.split()
            boxes.append(tuple(float(v) for v in parts[1:5]))
            scores.append(float(parts[5]))
    return boxes, scores
