"""Experiment orchestration: the search -> retrain -> eval pipeline and paired ablations.

A run directory holds the resolved ``config.json`` plus every artifact, each
tagged with the config fingerprint. Stages whose artifact already exists for
the same fingerprint are loaded instead of recomputed, and an interrupted
search resumes from its per-generation state file.
"""
from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass

import numpy as np
from filelock import FileLock, Timeout

from . import checkpoint, synth
from . import lang as L
from . import search as S
from .config import ExperimentConfig
from .errors import CheckpointError, ConfigError, DataConflictError
from .metrics import build_report, sequence_result
from .supernet import PLANS, Genome, StagePlan, decode_genome, prune
from .tracker import TrackerNet, track_sequences

logger = logging.getLogger(__name__)

AXES = ("modamixer", "ass", "symmetry", "fixed-block", "no-language", "fallback")
BASELINE_GENOME = Genome((0,) * 48)  # every slot the 3x3 shuffle unit


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def run_lock(path):
    """Exclusive ownership of a run directory for the duration of the block."""
    os.makedirs(path, exist_ok=True)
    lock = FileLock(os.path.join(path, ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise DataConflictError(f"run directory {path} is in use by another process") from None
    try:
        yield
    finally:
        lock.release()


def write_config(cfg: ExperimentConfig, path):
    """Write the resolved config; an existing run with a different config is a conflict."""
    os.makedirs(path, exist_ok=True)
    target = os.path.join(path, "config.json")
    text = cfg.dumps()
    if os.path.exists(target):
        old = ExperimentConfig.load(target)
        if old.fingerprint() != cfg.fingerprint():
            raise DataConflictError(f"{path} already holds a run with config {old.fingerprint()}")
    with open(target, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class LoadedModel:
    model: TrackerNet | None
    genome: Genome | None
    meta: dict

    @property
    def kind(self):
        return self.meta.get("kind", "model")


def model_meta(model: TrackerNet, genome, cfg_fingerprint, kind="model", pruned=False):
    return {
        "kind": kind,
        "genome": None if genome is None else genome.encode(),
        "plan": model.plan.to_dict(),
        "pruned": pruned,
        "use_modamixer": model.supernet.use_modamixer,
        "selector_activation": model.supernet.selector_activation,
        "vocab": list(model.vocab.tokens),
        "config_fingerprint": cfg_fingerprint,
        "data": synth.data_fingerprint(),
    }


def save_model(path, model, genome, cfg_fingerprint, kind="model", pruned=False):
    checkpoint.save(path, model.state_dict(), model_meta(model, genome, cfg_fingerprint, kind, pruned))


def save_oracle(path, cfg_fingerprint="oracle"):
    """A checkpoint with no weights that tracks by reading the ground truth."""
    checkpoint.save(path, {}, {"kind": "oracle", "genome": None, "config_fingerprint": cfg_fingerprint, "data": synth.data_fingerprint()})


def load_model(path, genome: Genome | None = None) -> LoadedModel:
    """Rebuild a network from a checkpoint.

    ``genome`` overrides the stored one; for a pruned checkpoint it must agree
    with the kept candidates or loading fails naming the first missing
    parameter.
    """
    tensors, meta = checkpoint.load(path)
    kind = meta.get("kind", "model")
    if kind == "oracle":
        return LoadedModel(None, None, meta)
    if "plan" not in meta:
        raise CheckpointError(f"{path} has no network description")
    plan = StagePlan.from_dict(meta["plan"])
    vocab = L.Vocabulary(meta["vocab"])
    net = TrackerNet(plan, vocab, seed=0, use_modamixer=meta["use_modamixer"], selector_activation=meta["selector_activation"])
    g = genome or (decode_genome(meta["genome"]) if meta.get("genome") else None)
    if meta.get("pruned"):
        if g is None:
            raise CheckpointError(f"{path} is pruned but records no genome")
        net = prune(net, g)
    net.load_state_dict(tensors)
    net.eval()
    return LoadedModel(net, g, meta)


def check_compatible(meta, manifest, force=False):
    """Refuse a checkpoint/benchmark pair built for different synthetic worlds."""
    want = meta.get("data", {})
    have = {"world_version": manifest.get("world_version"), "canvas": manifest.get("canvas")}
    bad = {k: (want.get(k), v) for k, v in have.items() if want.get(k) != v}
    if bad:
        msg = f"checkpoint/benchmark mismatch: {bad}"
        if not force:
            raise DataConflictError(msg + " (use --force to evaluate anyway)")
        logger.warning("%s; continuing because of --force", msg)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(loaded: LoadedModel, sequences, lang_mode=L.DESCRIPTION, fallback=L.ZERO, descriptions=None, genome=None):
    g = genome or loaded.genome
    if loaded.kind == "oracle":
        return [np.asarray(s.gt, float) for s in sequences], None
    res = track_sequences(loaded.model, g, sequences, lang_mode, fallback, descriptions)
    return [np.asarray(r.boxes, float) for r in res], res


def evaluate_sequences(preds, sequences, manifest, fingerprint, extra=None):
    results = []
    for entry, seq, pred in zip(manifest["sequences"], sequences, preds):
        spec = seq.spec
        results.append(
            sequence_result(
                f"{manifest['name']}/{entry['index']}",
                pred,
                seq.gt,
                distractor=bool(spec.distractors),
                occlusion=bool(spec.occlusions),
            )
        )
    return build_report(results, fingerprint, extra)


def evaluate_model(loaded: LoadedModel, manifest, lang_mode=L.DESCRIPTION, fallback=L.ZERO, force=False, extra=None, genome=None):
    check_compatible(loaded.meta, manifest, force)
    seqs = synth.manifest_sequences(manifest)
    preds, _ = predict(loaded, seqs, lang_mode, fallback, genome=genome)
    info = {"benchmark": manifest["name"], "profile": manifest["profile"], "lang_mode": lang_mode, "fallback": fallback}
    info.update(extra or {})
    return evaluate_sequences(preds, seqs, manifest, loaded.meta.get("config_fingerprint", ""), info)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

class Pipeline:
    """search -> retrain -> eval for one config inside one run directory."""

    def __init__(self, cfg: ExperimentConfig, out_dir=None):
        self.cfg = cfg.validate()
        self.out = out_dir or cfg.output_dir
        self.fp = cfg.fingerprint()
        self.plan = PLANS[cfg.plan]
        self._data = None
        self._calib = None

    def path(self, name):
        return os.path.join(self.out, name)

    # -- data -------------------------------------------------------------------
    def data(self):
        if self._data is None:
            c, d = self.cfg, self.cfg.data
            train = synth.build_benchmark("train", d.n_train, d.train_profile, c.seed_for("train-data"))
            val = synth.build_benchmark("val", d.n_val, d.val_profile, c.seed_for("val-data"))
            self._data = (synth.manifest_sequences(train), synth.manifest_sequences(val))
        return self._data

    def benchmark(self, profile):
        d = self.cfg.data
        return synth.build_benchmark(profile, d.n_eval, profile, d.eval_seed)

    def pairs(self, stream):
        train, _ = self.data()
        rng = np.random.default_rng(self.cfg.seed_for(f"pairs/{stream}"))
        return synth.make_training_pairs(train, self.cfg.lang_missing_fraction, rng, self.plan)

    def calib(self):
        if self._calib is None:
            gen = self.pairs("calib")
            self._calib = [[next(gen) for _ in range(self.cfg.train.batch)] for _ in range(self.cfg.data.calib_batches)]
        return self._calib

    # -- stages -----------------------------------------------------------------
    def new_model(self, use_modamixer=None):
        c = self.cfg
        mm = c.use_modamixer if use_modamixer is None else use_modamixer
        return TrackerNet(self.plan, seed=c.seed_for("init"), use_modamixer=mm, selector_activation=c.selector_activation)

    def _cached(self, name):
        p = self.path(name)
        if os.path.exists(p):
            _, meta = checkpoint.load(p)
            if meta.get("config_fingerprint") == self.fp:
                return p
        return None

    def train_supernet(self, tag="supernet", use_modamixer=None):
        ck = self._cached(f"{tag}.ckpt")
        if ck:
            logger.info("reusing %s", ck)
            return load_model(ck).model
        model = self.new_model(use_modamixer)
        rng = np.random.default_rng(self.cfg.seed_for(f"paths/{tag}"))
        res = S.train_supernet(
            model, self.pairs(tag), self.cfg.train, rng, fallback=self.cfg.fallback, diag_path=self.path(f"{tag}.diag.ckpt")
        )
        _write_loss(self.path(f"{tag}_loss.json"), res, self.fp)
        save_model(self.path(f"{tag}.ckpt"), model, None, self.fp, kind="supernet")
        return model

    def search(self, model, tag="search", symmetric=None, fixed_mixers=None, lang_mode=L.DESCRIPTION):
        sc = self.cfg.search
        sc = dataclasses.replace(
            sc,
            seed=self.cfg.seed_for(f"search/{sc.seed}"),
            symmetric=sc.symmetric if symmetric is None else symmetric,
            fixed_mixers=sc.fixed_mixers if fixed_mixers is None else fixed_mixers,
        )
        _, val = self.data()
        tracker = S.ModelTracker(model, self.calib(), lang_mode, self.cfg.fallback)
        result = S.evolve(sc, tracker, val, log_path=self.path(f"{tag}_log.jsonl"), state_path=self.path(f"{tag}_state.json"))
        with open(self.path(f"{tag}_best.txt"), "w", encoding="utf-8", newline="\n") as f:
            f.write(f"{result.best.encode()}\n# config {self.fp} suc {result.best_suc:.6f}\n")
        return result

    def retrain(self, model, genome, tag="model"):
        ck = self._cached(f"{tag}.ckpt")
        if ck:
            _, meta = checkpoint.load(ck)
            if meta.get("genome") == genome.encode():
                logger.info("reusing %s", ck)
                return load_model(ck)
        # every retrain of a config sees the same pair stream, so ablation arms stay paired
        rng = np.random.default_rng(self.cfg.seed_for("retrain"))
        if self.cfg.retrain_init == "scratch":
            model = self.new_model(model.supernet.use_modamixer)
        sub, res = S.retrain(model, genome, self.pairs("retrain"), self.cfg.retrain, rng, self.cfg.fallback, self.path(f"{tag}.diag.ckpt"))
        _write_loss(self.path(f"{tag}_loss.json"), res, self.fp)
        save_model(self.path(f"{tag}.ckpt"), sub, genome, self.fp, pruned=True)
        return LoadedModel(sub, genome, model_meta(sub, genome, self.fp, pruned=True))

    def evaluate(self, loaded: LoadedModel, tag, lang_mode=L.DESCRIPTION, fallback=None, profile=None, missing_language=False):
        profile = profile or self.cfg.data.eval_benchmarks[0]
        fallback = fallback or self.cfg.fallback
        manifest = self.benchmark(profile)
        seqs = synth.manifest_sequences(manifest)
        descs = [None] * len(seqs) if missing_language else None
        preds, _ = predict(loaded, seqs, lang_mode, fallback, descs)
        extra = {"benchmark": manifest["name"], "profile": profile, "lang_mode": lang_mode, "fallback": fallback}
        extra["missing_language"] = missing_language
        ck = self.path(f"{tag.split('@')[0]}.ckpt")
        if os.path.exists(ck):
            extra["checkpoint_hash"] = file_hash(ck)
        report = evaluate_sequences(preds, seqs, manifest, self.fp, extra)
        report.save(self.path(f"eval_{tag.replace('@', '_')}.json"))
        return report

    def run(self):
        """Full pipeline; returns a summary dict (also written to summary.json)."""
        with run_lock(self.out):
            write_config(self.cfg, self.out)
            supernet = self.train_supernet()
            result = self.search(supernet)
            loaded = self.retrain(supernet, result.best)
            reports = {p: self.evaluate(loaded, f"model@{p}", profile=p) for p in self.cfg.data.eval_benchmarks}
            summary = {
                "config_fingerprint": self.fp,
                "genome": result.best.encode(),
                "search_best_suc": result.best_suc,
                "eval": {p: {"suc": r.suc, "precision": r.precision, "p_norm": r.p_norm} for p, r in reports.items()},
            }
            _write_json(self.path("summary.json"), summary)
            return summary


def _write_loss(path, res, fp):
    _write_json(path, {"losses": res.losses, "n_pairs": res.n_pairs, "missing_rate": res.missing_rate, "config_fingerprint": fp})


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def _row(arm, report, genome=None, **extra):
    row = {"arm": arm, "suc": report.suc, "precision": report.precision, "p_norm": report.p_norm}
    if genome is not None:
        row["genome"] = genome.encode()
    row.update(extra)
    return row


def ablate(cfg: ExperimentConfig, axis, out_dir=None):
    """Paired runs that differ only on ``axis``; writes ``ablation_<axis>.json`` and ``.md``."""
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    pl = Pipeline(cfg, out_dir)
    with run_lock(pl.out):
        write_config(cfg, pl.out)
        rows = _ABLATIONS[axis](pl)
    table = {"axis": axis, "config_fingerprint": pl.fp, "rows": rows}
    _write_json(pl.path(f"ablation_{axis}.json"), table)
    with open(pl.path(f"ablation_{axis}.md"), "w", encoding="utf-8", newline="\n") as f:
        f.write(format_table(rows))
    return table


def format_table(rows):
    cols = ["arm", "suc", "precision", "p_norm"]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def _ablate_no_language(pl: Pipeline):
    sn = pl.train_supernet()
    res = pl.search(sn)
    loaded = pl.retrain(sn, res.best)
    with_lang = pl.evaluate(loaded, "model@language")
    zero = pl.evaluate(loaded, "model@zero", lang_mode=L.ZERO)
    return [
        _row("language", with_lang, res.best, checkpoint_hash=with_lang.extra.get("checkpoint_hash")),
        _row("zero-selector", zero, res.best, checkpoint_hash=zero.extra.get("checkpoint_hash")),
    ]


def _ablate_symmetry(pl: Pipeline):
    sn = pl.train_supernet()
    rows = []
    for arm, sym in (("asymmetric", False), ("symmetric", True)):
        res = pl.search(sn, tag=f"search_{arm}", symmetric=sym)
        loaded = pl.retrain(sn, res.best, tag=f"model_{arm}")
        rep = pl.evaluate(loaded, f"model_{arm}")
        rows.append(_row(arm, rep, res.best, search_suc=res.best_suc, tied=res.best.is_symmetric()))
    return rows


def _ablate_fixed_block(pl: Pipeline):
    sn = pl.train_supernet()
    rows = []
    for arm, fixed in (("searched-mixer", False), ("fixed-mixer", True)):
        res = pl.search(sn, tag=f"search_{arm}", fixed_mixers=fixed)
        loaded = pl.retrain(sn, res.best, tag=f"model_{arm}")
        rows.append(_row(arm, pl.evaluate(loaded, f"model_{arm}"), res.best, search_suc=res.best_suc))
    return rows


def _ablate_ass(pl: Pipeline):
    sn = pl.train_supernet()
    rows = []
    loaded = pl.retrain(sn, BASELINE_GENOME, tag="model_baseline")
    rows.append(_row("fixed-architecture", pl.evaluate(loaded, "model_baseline"), BASELINE_GENOME))
    res = pl.search(sn, tag="search_ass")
    loaded = pl.retrain(sn, res.best, tag="model_ass")
    rows.append(_row("searched-asymmetric", pl.evaluate(loaded, "model_ass"), res.best, search_suc=res.best_suc))
    return rows


def _ablate_modamixer(pl: Pipeline):
    rows = []
    for arm, mm in (("with-modamixer", True), ("without-modamixer", False)):
        sn = pl.train_supernet(tag=f"supernet_{arm}", use_modamixer=mm)
        res = pl.search(sn, tag=f"search_{arm}")
        loaded = pl.retrain(sn, res.best, tag=f"model_{arm}")
        rows.append(_row(arm, pl.evaluate(loaded, f"model_{arm}"), res.best))
    return rows


def _ablate_fallback(pl: Pipeline):
    rows = []
    base = pl.cfg
    for mode in L.FALLBACK_MODES:
        arm = Pipeline(dataclasses.replace(base, fallback=mode), pl.out)
        sn = arm.train_supernet(tag=f"supernet_{mode}")
        res = arm.search(sn, tag=f"search_{mode}")
        loaded = arm.retrain(sn, res.best, tag=f"model_{mode}")
        rows.append(_row(f"{mode}/language", arm.evaluate(loaded, f"model_{mode}@language"), res.best))
        rows.append(_row(f"{mode}/missing", arm.evaluate(loaded, f"model_{mode}@missing", missing_language=True), res.best))
    return rows


_ABLATIONS = {
    "modamixer": _ablate_modamixer,
    "ass": _ablate_ass,
    "symmetry": _ablate_symmetry,
    "fixed-block": _ablate_fixed_block,
    "no-language": _ablate_no_language,
    "fallback": _ablate_fallback,
}
