"""One-shot architecture search: supernet training, evolutionary search, retraining.

The supernet is trained with one uniformly sampled path per iteration. Paths
are then ranked by validation success score, with batch-norm statistics
recalibrated for each path before it is scored, and the best path is pruned
out and fine-tuned.
"""
from __future__ import annotations

import json
import logging
import math
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import lang as L
from .errors import ConfigError, NumericAbort
from .metrics import iou_series, suc
from .nn import BatchNorm2d
from .optim import SGD, cosine_lr
from .supernet import GENOME_LENGTH, Genome, decode_genome, prune, sample_genome
from .tensor import Tensor, no_grad
from .tracker import track_sequences, tracking_loss

logger = logging.getLogger(__name__)


@dataclass
class TrainSchedule:
    iters: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 8
    warmup_frac: float = 0.05

    def validate(self):
        if self.iters < 0 or self.batch < 1:
            raise ConfigError("schedule needs iters >= 0 and batch >= 1")
        if not (0 <= self.momentum < 1) or self.lr < 0:
            raise ConfigError("schedule needs lr >= 0 and momentum in [0, 1)")
        return self


@dataclass
class SearchConfig:
    supernet_iters: int = 2000
    population: int = 16
    generations: int = 8
    top_k: int = 4
    crossover: int = 6
    mutation: int = 6
    mutation_prob: float = 0.1
    seed: int = 0
    fitness_budget: int = 20
    symmetric: bool = False
    fixed_mixers: bool = False

    def validate(self):
        if self.population != self.top_k + self.crossover + self.mutation:
            raise ConfigError(
                f"population {self.population} != top_k {self.top_k} + crossover {self.crossover} + mutation {self.mutation}"
            )
        if self.top_k < 1 or self.generations < 1:
            raise ConfigError("need at least one elite and one generation")
        if self.crossover and self.top_k < 2:
            raise ConfigError("crossover needs at least two elites")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ConfigError("mutation_prob must lie in [0, 1]")
        if self.fitness_budget < 1:
            raise ConfigError("fitness_budget must be positive")
        return self


@dataclass
class FitnessRecord:
    genome: str
    suc: float
    generation: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.suc <= 1.0:
            raise ValueError(f"SUC {self.suc} outside [0, 1]")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    losses: list
    genomes: list = field(default_factory=list)
    n_pairs: int = 0
    n_missing: int = 0  # pairs trained without a description

    @property
    def missing_rate(self):
        return self.n_missing / self.n_pairs if self.n_pairs else 0.0


def _batch(pairs, dtype, fallback):
    lin = L.LanguageInput([p.description for p in pairs], fallback, np.stack([p.template_box for p in pairs]))
    x_t = Tensor(np.stack([p.template for p in pairs]).astype(dtype))
    x_s = Tensor(np.stack([p.search for p in pairs]).astype(dtype))
    return x_t, x_s, lin, np.stack([p.search_box for p in pairs])


def train_supernet(model, pairs, schedule: TrainSchedule, rng, sampler=None, fallback=L.ZERO, diag_path=None, log_every=50):
    """Single-path training.

    ``sampler(rng) -> Genome`` picks the path of each iteration (uniform by
    default). Parameters off the sampled path receive no gradient and are left
    untouched by the optimizer. A non-finite loss writes ``diag_path`` (when
    given) and raises :class:`NumericAbort`.
    """
    schedule.validate()
    sampler = sampler or (lambda r: sample_genome(r))
    opt = SGD(model.parameters(), schedule.lr, schedule.momentum, schedule.weight_decay)
    plan = model.plan
    dtype = model.supernet.template.stem.conv.weight.dtype
    model.train()
    out = TrainResult([])
    for it in range(schedule.iters):
        genome = sampler(rng)
        batch = [next(pairs) for _ in range(schedule.batch)]
        out.n_pairs += len(batch)
        out.n_missing += sum(p.description is None for p in batch)
        x_t, x_s, lin, gt = _batch(batch, dtype, fallback)
        maps = model(x_t, x_s, lin, genome)
        loss = tracking_loss(maps, gt, plan.total_stride, plan.search_size)
        value = float(loss.data)
        if not math.isfinite(value):
            if diag_path is not None:
                checkpoint.save(diag_path, model.state_dict(), {"kind": "diagnostic", "iteration": it, "genome": genome.encode()})
            raise NumericAbort(f"non-finite loss at iteration {it} (genome {genome.encode()})")
        opt.zero_grad()
        loss.backward()
        opt.lr = cosine_lr(it, schedule.iters, schedule.lr, schedule.warmup_frac)
        opt.step()
        out.losses.append(value)
        out.genomes.append(genome.encode())
        if log_every and (it % log_every == 0 or it == schedule.iters - 1):
            logger.info("iter %d/%d loss %.4f lr %.4g", it, schedule.iters, value, opt.lr)
    opt.zero_grad()
    model.eval()
    return out


def retrain(model, genome: Genome, pairs, schedule: TrainSchedule, rng, fallback=L.ZERO, diag_path=None):
    """Prune to ``genome`` (weights copied from ``model``) and train that path only."""
    sub = prune(model, genome)
    result = train_supernet(sub, pairs, schedule, rng, sampler=lambda r: genome, fallback=fallback, diag_path=diag_path)
    return sub, result


# ---------------------------------------------------------------------------
# batch-norm recalibration
# ---------------------------------------------------------------------------

def bn_modules(model):
    return [m for _, m in model.named_modules() if isinstance(m, BatchNorm2d)]


def bn_buffers(model):
    return [(m.running_mean.copy(), m.running_var.copy(), m.num_batches_tracked) for m in bn_modules(model)]


def restore_bn_buffers(model, saved):
    for m, (mean, var, n) in zip(bn_modules(model), saved):
        m.running_mean, m.running_var, m.num_batches_tracked = mean.copy(), var.copy(), n


def recalibrate_bn(model, genome, calib_batches, fallback=L.ZERO):
    """Replace running statistics with exact averages over ``calib_batches`` for this path."""
    mods = bn_modules(model)
    saved_momentum = [m.momentum for m in mods]
    for m in mods:
        m.reset_running_stats()
        m.momentum = None
    dtype = model.supernet.template.stem.conv.weight.dtype
    model.train()
    try:
        with no_grad():
            for pairs in calib_batches:
                x_t, x_s, lin, _ = _batch(pairs, dtype, fallback)
                model(x_t, x_s, lin, genome)
    finally:
        for m, mom in zip(mods, saved_momentum):
            m.momentum = mom
        model.eval()


# ---------------------------------------------------------------------------
# fitness
# ---------------------------------------------------------------------------

class OracleTracker:
    """Stub tracker that reports the ground truth."""

    def __call__(self, genome, sequences):
        return [np.asarray(s.gt, float) for s in sequences]


class ConstantTracker:
    """Stub tracker that always reports one fixed box."""

    def __init__(self, box=(-100.0, -100.0, 4.0, 4.0)):
        self.box = tuple(box)

    def __call__(self, genome, sequences):
        return [np.tile(np.asarray(self.box, float), (len(s), 1)) for s in sequences]


class ModelTracker:
    """Runs a (super)network along one path, with batch-norm recalibrated for it first.

    Running statistics are restored afterwards so evaluations do not leak into
    each other.
    """

    def __init__(self, model, calib_batches=(), lang_mode=L.DESCRIPTION, fallback=L.ZERO):
        self.model = model
        self.calib_batches = [list(b) for b in calib_batches]
        self.lang_mode = lang_mode
        self.fallback = fallback

    def __call__(self, genome, sequences):
        saved = bn_buffers(self.model)
        try:
            if self.calib_batches:
                recalibrate_bn(self.model, genome, self.calib_batches, self.fallback)
            res = track_sequences(self.model, genome, sequences, self.lang_mode, self.fallback)
        finally:
            restore_bn_buffers(self.model, saved)
        return [np.asarray(r.boxes, float) for r in res]


def evaluate_fitness(tracker, genome, val) -> float:
    """Mean per-sequence success score of ``tracker`` along ``genome``."""
    val = list(val)
    if not val:
        raise ConfigError("fitness evaluation needs a non-empty validation set")
    preds = tracker(genome, val)
    scores = [suc(iou_series(p, s.gt)) for p, s in zip(preds, val)]
    return math.fsum(scores) / len(scores)


_WORKER = {}


def _init_worker(tracker, val):
    _WORKER["tracker"], _WORKER["val"] = tracker, val


def _eval_in_worker(genome_str):
    return evaluate_fitness(_WORKER["tracker"], decode_genome(genome_str), _WORKER["val"])


def worker_count():
    try:
        return max(1, int(os.environ.get("VLT_THREADS", "1")))
    except ValueError:
        raise ConfigError("VLT_THREADS must be an integer") from None


def evaluate_many(tracker, genomes, val, workers=None):
    """Fitness of each genome, returned in input order whatever the worker count."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(genomes) <= 1:
        return [evaluate_fitness(tracker, g, val) for g in genomes]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(min(workers, len(genomes)), mp_context=ctx, initializer=_init_worker, initargs=(tracker, list(val))) as ex:
        return list(ex.map(_eval_in_worker, [g.encode() for g in genomes]))


# ---------------------------------------------------------------------------
# evolution
# ---------------------------------------------------------------------------

def _constrain(genome: Genome, config: SearchConfig) -> Genome:
    if config.symmetric:
        genome = genome.tied()
    if config.fixed_mixers:
        genome = genome.with_fixed_mixers()
    return genome


def crossover(a: Genome, b: Genome, rng) -> Genome:
    """Uniform gene-wise mix of two parents."""
    take_a = rng.random(GENOME_LENGTH) < 0.5
    return Genome(tuple(int(x if t else y) for x, y, t in zip(a.genes, b.genes, take_a)))


def mutate(parent: Genome, prob, rng) -> Genome:
    """Each gene moves to a uniformly chosen different value with probability ``prob``."""
    flip = rng.random(GENOME_LENGTH) < prob
    shift = rng.integers(1, 4, GENOME_LENGTH)
    genes = np.asarray(parent.genes)
    return Genome(tuple(int(v) for v in np.where(flip, (genes + shift) % 4, genes)))


def rank(population, fitness):
    """Sort by fitness descending; equal fitness goes to the smaller genome string."""
    return sorted(population, key=lambda g: (-fitness[g.encode()], g.encode()))


@dataclass
class SearchState:
    generation: int
    population: list  # genome strings
    cache: dict  # genome string -> suc
    history: list  # FitnessRecord dicts
    rng_state: dict
    best_per_generation: list

    def save(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            json.dump(asdict(self), f, sort_keys=True)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls(**json.load(f))


@dataclass
class SearchResult:
    best: Genome
    best_suc: float
    history: list
    best_per_generation: list


def _best(cache):
    g = min(cache, key=lambda s: (-cache[s], s))
    return g, cache[g]


def evolve(config: SearchConfig, tracker, val, log_path=None, state_path=None, workers=None) -> SearchResult:
    """Evolutionary search over genomes, rewarded by validation success score.

    ``log_path`` receives one JSON line per newly evaluated genome. With
    ``state_path``, progress is saved after every generation and an existing
    state file is resumed from, continuing the same random stream.
    """
    config.validate()
    val = list(val)[: config.fitness_budget]
    if not val:
        raise ConfigError("evolution needs a non-empty validation set")
    rng = np.random.default_rng(config.seed)
    if state_path is not None and os.path.exists(state_path):
        st = SearchState.load(state_path)
        rng.bit_generator.state = st.rng_state
        logger.info("resuming search at generation %d", st.generation)
        if log_path is not None:
            # drop lines of a generation that was interrupted before its state was saved
            with open(log_path, "w", encoding="utf-8", newline="\n") as f:
                for rec in st.history:
                    f.write(json.dumps(rec, sort_keys=True) + "\n")
    else:
        pop = [_constrain(sample_genome(rng), config).encode() for _ in range(config.population)]
        st = SearchState(0, pop, {}, [], rng.bit_generator.state, [])
        if log_path is not None:
            open(log_path, "w").close()

    while st.generation < config.generations:
        gen = st.generation
        population = [decode_genome(s) for s in st.population]
        todo, seen = [], set()
        for g in population:
            s = g.encode()
            if s not in st.cache and s not in seen:
                todo.append(g)
                seen.add(s)
        scores = evaluate_many(tracker, todo, val, workers)
        new = []
        for g, v in zip(todo, scores):
            st.cache[g.encode()] = v
            rec = FitnessRecord(g.encode(), v, gen, config.seed)
            new.append(rec)
            st.history.append(asdict(rec))
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8", newline="\n") as f:
                for rec in new:
                    f.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
        best_s, best_v = _best(st.cache)
        st.best_per_generation.append(best_v)
        logger.info("generation %d: %d new, best %.4f", gen, len(todo), best_v)

        ranked, elites = rank(population, st.cache), []
        for g in ranked:
            if g not in elites:
                elites.append(g)
            if len(elites) == config.top_k:
                break
        children = list(elites)
        for _ in range(config.crossover):
            i, j = rng.choice(len(elites), 2, replace=len(elites) < 2)
            children.append(_constrain(crossover(elites[i], elites[j], rng), config))
        for _ in range(config.mutation):
            parent = elites[int(rng.integers(len(elites)))]
            children.append(_constrain(mutate(parent, config.mutation_prob, rng), config))
        while len(children) < config.population:  # fewer distinct elites than top_k
            children.append(_constrain(sample_genome(rng), config))
        st.population = [g.encode() for g in children]
        st.generation = gen + 1
        st.rng_state = rng.bit_generator.state
        if state_path is not None:
            st.save(state_path)

    best_s, best_v = _best(st.cache)
    history = [FitnessRecord(**r) for r in st.history]
    return SearchResult(decode_genome(best_s), best_v, history, list(st.best_per_generation))

