"""Language-as-channel-selector fusion cell.

``mix(f_v, s) = block_a(s * f_v) + block_b(f_v)``: the selector ``s`` (one
value per channel, broadcast over all positions) reweights the visual
feature, one searched block processes the reweighted feature, another the raw
one, and the two are summed. The selector is applied bare; no squashing.
"""
from __future__ import annotations

import json

import numpy as np

from . import ops
from .blocks import ChoiceBlock
from .errors import DimensionError
from .nn import Linear, Module


class ModaMixerCell(Module):
    def __init__(self, embed_dim, channels, stage=1, rng=None, blocks=None):
        self.stage = stage
        self.channels = channels
        self.proj = Linear(embed_dim, channels, rng=rng)
        if blocks is None:
            blocks = (ChoiceBlock(channels, channels, 1, rng=rng), ChoiceBlock(channels, channels, 1, rng=rng))
        # never shared, even when both genes pick the same block type
        self.block_a, self.block_b = blocks

    def project(self, f_l):
        """(B, d) sentence embeddings -> (B, C) selectors."""
        if f_l.shape[-1] != self.proj.weight.shape[1]:
            raise DimensionError(f"embedding dim {f_l.shape[-1]} != projection input {self.proj.weight.shape[1]}")
        return self.proj(f_l)

    def mix(self, f_v, selector, gene_a=0, gene_b=0):
        if selector.shape != f_v.shape[:2]:
            raise DimensionError(f"selector {selector.shape} does not match feature {f_v.shape}")
        selected = ops.channel_scale(f_v, selector)
        return ops.add(self.block_a(selected, gene_a), self.block_b(f_v, gene_b))

    forward = mix


def selector_ranking(selector):
    """Channels ordered by descending selector score; ties keep channel order."""
    s = np.asarray(selector, dtype=np.float64)
    return [int(i) for i in np.argsort(-s, kind="stable")]


def selector_report(selector, **key):
    """One report record for a selector vector.

    ``key`` identifies the record (sequence, frame, stage, branch).
    """
    s = np.asarray(selector)
    order = selector_ranking(s)
    rec = dict(key)
    rec.update(
        max_channel=order[0],
        min_channel=order[-1],
        ranking=order,
        selector=[float(v) for v in s.reshape(-1)],
    )
    return rec


def write_selector_reports(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_selector_reports(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
