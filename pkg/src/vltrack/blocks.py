"""ShuffleNetV2-style candidate blocks and the single-path choice container.

Four candidates per searchable slot, indexed by gene value:

=====  ==========================================
gene   block
=====  ==========================================
0      shuffle unit, depthwise 3x3
1      shuffle unit, depthwise 5x5
2      shuffle unit, depthwise 7x7
3      shuffle-xception unit (three depthwise 3x3)
=====  ==========================================
"""
from __future__ import annotations

import numpy as np

from . import ops
from .nn import ConvBN, Module, ModuleList
from .tensor import Tensor

BLOCK_NAMES = ("shuffle3", "shuffle5", "shuffle7", "xception3")
N_CHOICES = len(BLOCK_NAMES)


def _dw(c, k, stride, rng):
    return ConvBN(c, c, k, stride=stride, groups=c, relu=False, rng=rng)


class ShuffleUnit(Module):
    """One candidate block.

    With ``cin == cout`` and stride 1 the input is split in half, one half is
    processed and the halves are concatenated and channel-shuffled. Otherwise
    (down-sampling or widening) both a strided shortcut branch and the main
    branch see the full input and each yields ``cout // 2`` channels.
    """

    def __init__(self, cin, cout, kernel, stride=1, xception=False, rng=None):
        if cout % 2:
            raise ValueError(f"shuffle units need an even channel count, got {cout}")
        self.cin, self.cout, self.stride = cin, cout, stride
        self.kernel, self.xception = kernel, xception
        self.project = cin != cout or stride != 1
        half = cout // 2
        main_in = cin if self.project else half
        if xception:
            self.main = ModuleList(
                [
                    _dw(main_in, 3, stride, rng),
                    ConvBN(main_in, half, 1, rng=rng),
                    _dw(half, 3, 1, rng),
                    ConvBN(half, half, 1, rng=rng),
                    _dw(half, 3, 1, rng),
                    ConvBN(half, half, 1, rng=rng),
                ]
            )
        else:
            self.main = ModuleList(
                [
                    ConvBN(main_in, half, 1, rng=rng),
                    _dw(half, kernel, stride, rng),
                    ConvBN(half, half, 1, rng=rng),
                ]
            )
        if self.project:
            self.shortcut = ModuleList([_dw(cin, kernel, stride, rng), ConvBN(cin, half, 1, rng=rng)])

    def forward(self, x):
        if self.project:
            a = x
            for m in self.shortcut:
                a = m(a)
            b = x
        else:
            a, b = ops.split(x, [self.cout // 2, self.cout // 2])
        for m in self.main:
            b = m(b)
        return ops.channel_shuffle(ops.concat([a, b], axis=1), 2)


def make_candidate(gene, cin, cout, stride, rng=None):
    if gene == 3:
        return ShuffleUnit(cin, cout, 3, stride, xception=True, rng=rng)
    return ShuffleUnit(cin, cout, (3, 5, 7)[gene], stride, rng=rng)


class ChoiceBlock(Module):
    """All candidates for one slot; only the gene-selected one runs.

    After pruning, ``choices`` holds a subset and selecting a removed candidate
    is an error.
    """

    def __init__(self, cin, cout, stride=1, rng=None, choices=range(N_CHOICES)):
        self.cin, self.cout, self.stride = cin, cout, stride
        self.choices = tuple(choices)
        for g in self.choices:
            setattr(self, f"c{g}", make_candidate(g, cin, cout, stride, rng))

    def candidate(self, gene):
        if gene not in self.choices:
            raise KeyError(f"candidate {gene} not present in this block (have {self.choices})")
        return getattr(self, f"c{gene}")

    def forward(self, x, gene):
        return self.candidate(gene)(x)

    def prune(self, keep):
        for g in self.choices:
            if g != keep:
                delattr(self, f"c{g}")
        self.choices = (keep,)


class IdentityChoice(Module):
    """Test stub standing in for a :class:`ChoiceBlock`: returns its input."""

    def forward(self, x, gene=0):
        return x


class ZeroPreservingChoice(Module):
    """Test stub: a fixed per-channel scale, so zero in -> zero out."""

    def __init__(self, scale):
        self.scale = np.asarray(scale)

    def forward(self, x, gene=0):
        s = Tensor(self.scale.astype(x.dtype)[None].repeat(x.shape[0], axis=0))
        return ops.channel_scale(x, s)

