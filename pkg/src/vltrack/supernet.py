"""Asymmetric two-stream supernet with a ModaMixer after every stage.

Genome layout (48 genes, each 0..3, see :mod:`vltrack.blocks`)::

    template backbone (3+3+7+3 = 16) | search backbone (16)
    | template mixers (2 per stage = 8) | search mixers (8)

Mixer genes come in (block_a, block_b) pairs per stage.
"""
from __future__ import annotations

import copy
import re
from dataclasses import asdict, dataclass

import numpy as np

from . import lang as L
from . import ops
from .blocks import N_CHOICES, ChoiceBlock
from .errors import GenomeError
from .modamixer import ModaMixerCell
from .nn import ConvBN, Module, ModuleList
from .tensor import Tensor

BLOCKS_PER_STAGE = (3, 3, 7, 3)
N_BACKBONE = sum(BLOCKS_PER_STAGE)
N_MIXER = 2 * len(BLOCKS_PER_STAGE)
GENOME_LENGTH = 2 * N_BACKBONE + 2 * N_MIXER
_GROUPS = (("T", N_BACKBONE), ("S", N_BACKBONE), ("TM", N_MIXER), ("SM", N_MIXER))


@dataclass(frozen=True)
class StagePlan:
    """Widths and strides of one branch. Block counts are fixed by the genome layout."""

    stem_channels: int = 16
    channels: tuple = (64, 160, 320, 640)
    strides: tuple = (2, 2, 1, 1)
    out_channels: int = 256
    head_channels: int = 128
    embed_dim: int = 32
    template_size: int = 64
    search_size: int = 160
    blocks: tuple = BLOCKS_PER_STAGE

    def __post_init__(self):
        if tuple(self.blocks) != BLOCKS_PER_STAGE:
            raise ValueError(f"block counts are fixed at {BLOCKS_PER_STAGE}")
        if len(self.channels) != 4 or len(self.strides) != 4:
            raise ValueError("four stages expected")

    def stage_strides(self):
        """Cumulative stride after each stage (stem stride 2 included)."""
        out, s = [], 2
        for p in self.strides:
            s *= p
            out.append(s)
        return out

    @property
    def total_stride(self):
        return self.stage_strides()[-1]

    def feature_size(self, image_size):
        s = image_size
        for p in (2,) + tuple(self.strides):
            s = (s - 1) // p + 1
        return s

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


PAPER_PLAN = StagePlan()
DESK_PLAN = StagePlan(stem_channels=8, channels=(16, 24, 32, 48), out_channels=32, head_channels=32)
TINY_PLAN = StagePlan(stem_channels=4, channels=(8, 8, 8, 8), out_channels=8, head_channels=8, embed_dim=8)
PLANS = {"paper": PAPER_PLAN, "desk": DESK_PLAN, "tiny": TINY_PLAN}


@dataclass(frozen=True)
class Genome:
    genes: tuple

    def __post_init__(self):
        genes = tuple(int(g) for g in self.genes)
        object.__setattr__(self, "genes", genes)
        if len(genes) != GENOME_LENGTH:
            raise GenomeError(f"genome needs {GENOME_LENGTH} genes, got {len(genes)}")
        if any(g < 0 or g >= N_CHOICES for g in genes):
            raise GenomeError(f"genes must lie in 0..{N_CHOICES - 1}")

    @property
    def template(self):
        return self.genes[:N_BACKBONE]

    @property
    def search(self):
        return self.genes[N_BACKBONE : 2 * N_BACKBONE]

    @property
    def template_mixer(self):
        return self.genes[2 * N_BACKBONE : 2 * N_BACKBONE + N_MIXER]

    @property
    def search_mixer(self):
        return self.genes[2 * N_BACKBONE + N_MIXER :]

    def branch(self, name):
        return (self.template, self.template_mixer) if name == "template" else (self.search, self.search_mixer)

    def encode(self):
        parts, pos = [], 0
        for tag, n in _GROUPS:
            parts.append(f"{tag}:[{','.join(str(g) for g in self.genes[pos:pos + n])}]")
            pos += n
        return "|".join(parts)

    __str__ = encode

    def tied(self):
        """Symmetric version: search genes copied from the template genes."""
        return Genome(self.template + self.template + self.template_mixer + self.template_mixer)

    def is_symmetric(self):
        return self.template == self.search and self.template_mixer == self.search_mixer

    def with_fixed_mixers(self):
        """Mixer post-blocks replaced by each branch's last backbone block of that stage."""
        genes = list(self.genes)
        ends = np.cumsum(BLOCKS_PER_STAGE) - 1
        for b, (bb_off, mx_off) in enumerate(((0, 2 * N_BACKBONE), (N_BACKBONE, 2 * N_BACKBONE + N_MIXER))):
            for s, e in enumerate(ends):
                genes[mx_off + 2 * s] = genes[mx_off + 2 * s + 1] = genes[bb_off + e]
        return Genome(tuple(genes))


_GENOME_RE = re.compile(r"^T:\[([0-9,\s]*)\]\|S:\[([0-9,\s]*)\]\|TM:\[([0-9,\s]*)\]\|SM:\[([0-9,\s]*)\]$")


def encode_genome(g: Genome) -> str:
    return g.encode()


def decode_genome(text: str) -> Genome:
    m = _GENOME_RE.match(text.strip())
    if not m:
        raise GenomeError(f"malformed genome string {text!r}")
    genes = []
    for (tag, n), body in zip(_GROUPS, m.groups()):
        vals = [v for v in body.replace(" ", "").split(",") if v != ""]
        if len(vals) != n:
            raise GenomeError(f"group {tag} needs {n} genes, got {len(vals)}")
        genes.extend(int(v) for v in vals)
    return Genome(tuple(genes))


def sample_genome(rng, symmetric=False) -> Genome:
    """Uniform i.i.d. gene draw; ``symmetric`` ties search genes to template genes."""
    g = Genome(tuple(rng.integers(0, N_CHOICES, GENOME_LENGTH)))
    return g.tied() if symmetric else g


# colors of the published architecture table, read with 3x3 -> 0, 5x5 -> 1, 7x7 -> 2, xception -> 3
PAPER_GENOME = Genome(
    (2, 2, 2, 3, 1, 3, 3, 0, 2, 3, 0, 2, 2, 2, 3, 2)
    + (1, 3, 0, 1, 2, 2, 1, 2, 3, 0, 3, 1, 2, 3, 3, 2)
    + (0, 3, 3, 0, 2, 3, 1, 0)
    + (2, 3, 3, 0, 3, 3, 0, 0)
)


class Branch(Module):
    """stem -> (stage_k -> ModaMixer_k) x 4 -> 1x1 output conv."""

    def __init__(self, plan: StagePlan, rng=None):
        self.plan = plan
        self.stem = ConvBN(3, plan.stem_channels, 3, stride=2, rng=rng)
        self.stages = ModuleList()
        cin = plan.stem_channels
        for c, p, n in zip(plan.channels, plan.strides, plan.blocks):
            stage = ModuleList()
            for b in range(n):
                stage.append(ChoiceBlock(cin if b == 0 else c, c, p if b == 0 else 1, rng=rng))
            self.stages.append(stage)
            cin = c
        self.mixers = ModuleList([ModaMixerCell(plan.embed_dim, c, stage=i + 1, rng=rng) for i, c in enumerate(plan.channels)])
        self.out = ConvBN(plan.channels[-1], plan.out_channels, 1, relu=False, rng=rng)

    def forward(self, x, backbone_genes, mixer_genes, selector_fn=None):
        """Run the branch.

        ``selector_fn(stage_index, cell, f_v)`` returns the (B, C) selector for a
        stage or ``None`` to skip that ModaMixer. Returns the output feature and
        the pre-mixer stage features.
        """
        x = self.stem(x)
        pos, stage_feats = 0, []
        for k, stage in enumerate(self.stages):
            for blk in stage:
                x = blk(x, backbone_genes[pos])
                pos += 1
            stage_feats.append(x)
            if selector_fn is not None:
                cell = self.mixers[k]
                sel = selector_fn(k, cell, x)
                if sel is not None:
                    x = cell.mix(x, sel, mixer_genes[2 * k], mixer_genes[2 * k + 1])
        return self.out(x), stage_feats


class TemplateState:
    """Everything the search branch needs from the template branch."""

    def __init__(self, feature, stage_feats, lang_input, embeddings):
        self.feature = feature
        self.stage_feats = stage_feats
        self.lang_input = lang_input
        self.embeddings = embeddings


class Supernet(Module):
    def __init__(self, plan: StagePlan = DESK_PLAN, vocab=None, rng=None, use_modamixer=True, selector_activation="none"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.plan = plan
        self.use_modamixer = use_modamixer
        self.selector_activation = selector_activation
        self.lang = L.LanguageEncoder(vocab or L.Vocabulary.default(), plan.embed_dim, rng=rng)
        self.template = Branch(plan, rng=rng)
        self.search = Branch(plan, rng=rng)
        self.last_selectors = {}

    # -- selectors --------------------------------------------------------------
    def _embed(self, lang_input):
        desc = lang_input.mask(L.DESCRIPTION)
        if not desc.any():
            return None
        seqs = [L.tokenize(d or "", self.lang.vocab) for d in lang_input.descriptions]
        return self.lang.encode(seqs)

    def _selector(self, branch, k, cell, template_feat, lang_input, emb):
        if not self.use_modamixer:
            return None
        n, c = template_feat.shape[:2]
        dtype = template_feat.dtype
        modes = lang_input.modes
        parts = []
        if emb is not None:
            proj = cell.project(emb)
            if self.selector_activation == "sigmoid":
                proj = ops.sigmoid(proj)
            m = lang_input.mask(L.DESCRIPTION)
            parts.append(proj if m.all() else ops.mul(proj, Tensor(np.repeat(m[:, None], c, 1).astype(dtype))))
        pool_mask = lang_input.mask(L.TEMPLATE_POOL)
        if pool_mask.any():
            stride = self.plan.stage_strides()[k]
            boxes = np.asarray(lang_input.template_boxes, dtype=np.float64)
            pooled = L.fallback_selector(L.TEMPLATE_POOL, c, template_feat, boxes, stride)
            parts.append(pooled if pool_mask.all() else ops.mul(pooled, Tensor(np.repeat(pool_mask[:, None], c, 1).astype(dtype))))
        if not parts:
            sel = Tensor(np.zeros((n, c), dtype=dtype))
        else:
            sel = parts[0] if len(parts) == 1 else ops.add(parts[0], parts[1])
        self.last_selectors[(k + 1, branch)] = sel.data
        return sel

    # -- forward ----------------------------------------------------------------
    def forward_template(self, x_t, lang_input, genome: Genome):
        if x_t.shape[0] != len(lang_input):
            raise ValueError("language batch does not match image batch")
        emb = self._embed(lang_input)
        bb, mx = genome.branch("template")

        def sel_fn(k, cell, f_v):
            return self._selector("template", k, cell, f_v, lang_input, emb)

        feat, stage_feats = self.template(x_t, bb, mx, sel_fn)
        return TemplateState(feat, stage_feats, lang_input, emb)

    def forward_search(self, x_s, state: TemplateState, genome: Genome):
        bb, mx = genome.branch("search")

        def sel_fn(k, cell, f_v):
            return self._selector("search", k, cell, state.stage_feats[k], state.lang_input, state.embeddings)

        feat, _ = self.search(x_s, bb, mx, sel_fn)
        return feat

    def forward(self, x_t, x_s, lang_input, genome: Genome):
        """-> (template feature, search feature)."""
        state = self.forward_template(x_t, lang_input, genome)
        return state.feature, self.forward_search(x_s, state, genome)


def iter_choice_blocks(module):
    """Yield ``(name, ChoiceBlock, branch, kind, index)`` in genome order within each branch."""
    for bname in ("template", "search"):
        branch = getattr(module, bname)
        pos = 0
        for k, stage in enumerate(branch.stages):
            for blk in stage:
                yield bname, blk, "backbone", pos
                pos += 1
        for k, cell in enumerate(branch.mixers):
            yield bname, cell.block_a, "mixer", 2 * k
            yield bname, cell.block_b, "mixer", 2 * k + 1


def genome_slot_gene(genome: Genome, branch, kind, index):
    bb, mx = genome.branch(branch)
    return bb[index] if kind == "backbone" else mx[index]


def prune(supernet_module, genome: Genome):
    """Deep copy keeping only the genome's candidate in every choice block."""
    pruned = copy.deepcopy(supernet_module)
    net = pruned.supernet if hasattr(pruned, "supernet") else pruned
    for branch, blk, kind, idx in iter_choice_blocks(net):
        if isinstance(blk, ChoiceBlock):
            blk.prune(genome_slot_gene(genome, branch, kind, idx))
    return pruned


def path_parameter_ids(net, genome: Genome):
    """ids of the candidate-block parameters that the genome's path uses."""
    ids = set()
    for branch, blk, kind, idx in iter_choice_blocks(net):
        if isinstance(blk, ChoiceBlock):
            ids.update(id(p) for p in blk.candidate(genome_slot_gene(genome, branch, kind, idx)).parameters())
    return ids


def candidate_parameter_ids(net):
    ids = set()
    for _, blk, _, _ in iter_choice_blocks(net):
        ids.update(id(p) for p in blk.parameters())
    return ids
