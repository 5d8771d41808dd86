"""Sentence embeddings from descriptions, and the two missing-language fallbacks.

A description is tokenized, wrapped in ``[CLS] ... [SEP]`` and embedded as the
mean of its N+2 token rows. When no description exists the channel selector
is either all zeros or the template feature pooled inside the target box.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import DimensionError
from .nn import Module, Parameter
from .tensor import Tensor

logger = logging.getLogger(__name__)

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, UNK)

# colors, shapes, sizes, motion and a few function words
DEFAULT_WORDS = (
    "the a an of and with is in on near object shape "
    "small large big tiny fast slow "
    "red green blue yellow cyan magenta white black gray orange purple "
    "square circle triangle cross star "
    "moving left right up down"
).split()

_TOKEN_RE = re.compile(r"[a-z0-9]+")

DESCRIPTION, ZERO, TEMPLATE_POOL = "description", "zero", "template_pool"
FALLBACK_MODES = (ZERO, TEMPLATE_POOL)


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        for s in SPECIALS:
            if s not in tokens:
                raise ValueError(f"vocabulary lacks special token {s}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}
        self.pad_id, self.cls_id, self.sep_id, self.unk_id = (self.ids[s] for s in SPECIALS)

    @classmethod
    def default(cls):
        return cls(list(SPECIALS) + DEFAULT_WORDS)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self.ids

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, word):
        return self.ids.get(word, self.unk_id)

    def dumps(self) -> str:
        return "".join(t + "\n" for t in self.tokens)

    @classmethod
    def loads(cls, text: str):
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8", newline="\n") as f:
            return cls.loads(f.read())


def words(description: str):
    return _TOKEN_RE.findall(description.lower())


def tokenize(description: str, vocab: Vocabulary):
    """Lowercase, split on anything non-alphanumeric, map with UNK fallback, add CLS/SEP."""
    return [vocab.cls_id] + [vocab.id(w) for w in words(description)] + [vocab.sep_id]


class LanguageEncoder(Module):
    """Trainable embedding table; a sentence is the mean of its token rows."""

    def __init__(self, vocab: Vocabulary, dim=32, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab = vocab
        self.dim = dim
        self.table = Parameter(rng.standard_normal((len(vocab), dim)) * 0.5)

    def encode(self, token_seqs):
        """(B, d) embeddings for a batch of id sequences (each non-empty)."""
        return ops.embedding_mean(self.table, token_seqs)

    def forward(self, descriptions):
        return self.encode([tokenize(d, self.vocab) for d in descriptions])


@dataclass
class LanguageEmbedding:
    vector: Tensor
    source: str = DESCRIPTION


def encode(tokens, encoder: LanguageEncoder) -> LanguageEmbedding:
    """Single-sequence convenience wrapper around :meth:`LanguageEncoder.encode`."""
    return LanguageEmbedding(encoder.encode([tokens]), DESCRIPTION)


@dataclass
class LanguageInput:
    """Per-sample language for one batch.

    ``descriptions[i]`` is ``None`` for a sample without language; such a sample
    uses ``fallback``. ``template_boxes`` are (x1, y1, x2, y2) in template-crop
    pixels and are required by the ``template_pool`` fallback.
    """

    descriptions: list
    fallback: str = ZERO
    template_boxes: np.ndarray | None = None
    force_mode: str | None = None
    modes: list = field(init=False)

    def __post_init__(self):
        if self.fallback not in FALLBACK_MODES:
            raise ValueError(f"unknown fallback mode {self.fallback!r}")
        if self.force_mode is not None:
            if self.force_mode not in (DESCRIPTION,) + FALLBACK_MODES:
                raise ValueError(f"unknown language mode {self.force_mode!r}")
            self.modes = [self.force_mode] * len(self.descriptions)
        else:
            self.modes = [DESCRIPTION if d else self.fallback for d in self.descriptions]
        if TEMPLATE_POOL in self.modes and self.template_boxes is None:
            raise ValueError("template_pool fallback needs template boxes")

    def __len__(self):
        return len(self.descriptions)

    def mask(self, mode):
        return np.array([m == mode for m in self.modes])


def project_box(box, stride, grid_h, grid_w):
    """Pixel box (x1, y1, x2, y2) -> cell ranges [r0, r1) x [c0, c1), rounded outward and clipped."""
    x1, y1, x2, y2 = box
    c0, r0 = math.floor(x1 / stride), math.floor(y1 / stride)
    c1, r1 = math.ceil(x2 / stride), math.ceil(y2 / stride)
    c0, c1 = max(c0, 0), min(c1, grid_w)
    r0, r1 = max(r0, 0), min(r1, grid_h)
    return r0, r1, c0, c1


def pool_weights(boxes, stride, grid_h, grid_w, dtype=np.float32):
    """Averaging weights (B, H, W) over each projected box; empty boxes pool globally."""
    wts = np.zeros((len(boxes), grid_h, grid_w), dtype=dtype)
    for i, box in enumerate(boxes):
        r0, r1, c0, c1 = project_box(box, stride, grid_h, grid_w)
        if r1 <= r0 or c1 <= c0:
            logger.warning("target box %s projects to no feature cell; using global average pooling", tuple(box))
            wts[i] = 1.0 / (grid_h * grid_w)
        else:
            wts[i, r0:r1, c0:c1] = 1.0 / ((r1 - r0) * (c1 - c0))
    return wts


def fallback_selector(mode, channels, template_feature=None, target_box=None, stride=8):
    """Selector used in place of a projected description.

    ``zero`` returns an exact zero vector of length ``channels``. ``template_pool``
    averages ``template_feature`` (N, C, H, W) over the box projected onto its
    grid, returning (N, C). ``target_box`` may be one box or one per sample.
    """
    if mode == ZERO:
        n = 1 if template_feature is None else template_feature.shape[0]
        return Tensor(np.zeros((n, channels), dtype=np.float32 if template_feature is None else template_feature.dtype))
    if mode != TEMPLATE_POOL:
        raise ValueError(f"unknown fallback mode {mode!r}")
    if template_feature is None or target_box is None:
        raise ValueError("template_pool needs a template feature and a target box")
    if template_feature.shape[1] != channels:
        raise DimensionError(f"template feature has {template_feature.shape[1]} channels, selector needs {channels}")
    boxes = np.atleast_2d(np.asarray(target_box, dtype=np.float64))
    if len(boxes) == 1 and template_feature.shape[0] > 1:
        boxes = np.repeat(boxes, template_feature.shape[0], axis=0)
    n, _, h, w = template_feature.shape
    return ops.spatial_pool(template_feature, pool_weights(boxes, stride, h, w, template_feature.dtype))
