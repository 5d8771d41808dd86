"""``vlt`` command line: data generation, search, retraining, evaluation, tracking, ablations.

Exit codes: 0 success, 2 usage, 3 configuration or checkpoint, 4 data
conflict, 5 numeric abort.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import lang as L
from . import synth
from .config import PRESETS, ExperimentConfig
from .errors import ConfigError, DataConflictError, GenomeError, VLTError
from .experiments import AXES, Pipeline, ablate, evaluate_model, load_model, run_lock, write_config
from .modamixer import selector_report, write_selector_reports
from .supernet import PAPER_GENOME, decode_genome, prune
from .tensor import Tensor, no_grad
from .tracker import TrackerNet, track_sequences, write_predictions

logger = logging.getLogger("vltrack")


def _setup_logging(verbose, log_file=None):
    root = logging.getLogger()
    root.handlers.clear()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(fmt)
    root.addHandler(h)
    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        fh = logging.FileHandler(log_file, encoding="utf-8")
        fh.setFormatter(fmt)
        root.addHandler(fh)


def _load_config(path, out=None):
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig().validate()
    if out:
        cfg.output_dir = out
    return cfg


def _parse_genome(text):
    if text == "paper":
        return PAPER_GENOME
    if os.path.exists(text):
        with open(text, encoding="utf-8") as f:
            lines = [ln for ln in f.read().splitlines() if ln.strip() and not ln.startswith("#")]
        text = lines[0] if lines else ""
    try:
        return decode_genome(text)
    except GenomeError as e:
        raise ConfigError(f"--genome: {e}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    manifest = synth.build_benchmark(args.name or args.profile, args.n, args.profile, args.seed, args.length)
    text = synth.manifest_dumps(manifest)
    if os.path.exists(args.out):
        with open(args.out, encoding="utf-8") as f:
            if f.read() == text:
                logger.info("%s already up to date", args.out)
                return 0
        raise DataConflictError(f"{args.out} exists with different content")
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    logger.info("wrote %d sequences to %s", args.n, args.out)
    return 0


def cmd_defaults(args):
    sys.stdout.write(PRESETS[args.preset](args.seed).dumps())
    return 0


def cmd_search(args):
    cfg = _load_config(args.config, args.out)
    pl = Pipeline(cfg)
    with run_lock(pl.out):
        write_config(cfg, pl.out)
        supernet = pl.train_supernet()
        res = pl.search(supernet)
    print(res.best.encode())
    logger.info("best genome SUC %.4f", res.best_suc)
    return 0


def cmd_retrain(args):
    cfg = _load_config(args.config, args.out)
    genome = _parse_genome(args.genome)
    pl = Pipeline(cfg)
    if args.dry_run:
        net = TrackerNet(pl.plan, seed=cfg.seed_for("init"), use_modamixer=cfg.use_modamixer)
        sub = prune(net, genome)
        p = pl.plan
        x_t = Tensor(np.zeros((1, 3, p.template_size, p.template_size), np.float32))
        x_s = Tensor(np.zeros((1, 3, p.search_size, p.search_size), np.float32))
        lin = L.LanguageInput(["the small red square"], L.ZERO, np.array([p.template_size / 4, p.template_size / 4, p.template_size * 3 / 4, p.template_size * 3 / 4])[None])
        with no_grad():
            sub.eval()
            f_t, f_s = sub.supernet(x_t, x_s, lin, genome)
        n_sub = sum(q.data.size for q in sub.parameters())
        n_all = sum(q.data.size for q in net.parameters())
        print(f"genome {genome.encode()}")
        print(f"template feature {f_t.shape[1:]} search feature {f_s.shape[1:]}")
        print(f"parameters {n_sub} (supernet {n_all})")
        return 0
    with run_lock(pl.out):
        write_config(cfg, pl.out)
        supernet = pl.train_supernet()
        loaded = pl.retrain(supernet, genome)
        reports = {p: pl.evaluate(loaded, f"model@{p}", profile=p) for p in cfg.data.eval_benchmarks}
    for p, r in reports.items():
        print(f"{p}: SUC {r.suc:.4f} P {r.precision:.4f} P_norm {r.p_norm:.4f}")
    return 0


def cmd_eval(args):
    loaded = load_model(args.checkpoint)
    manifest = synth.load_manifest(args.benchmark)
    report = evaluate_model(
        loaded, manifest, args.lang_mode, args.fallback, force=args.force, extra={"manifest_hash": manifest.get("config_hash")}
    )
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), f"eval_{manifest['name']}.json")
    report.save(out)
    print(f"SUC {report.suc:.6f} P {report.precision:.6f} P_norm {report.p_norm:.6f}")
    logger.info("report written to %s", out)
    return 0


def _parse_sequence_ref(ref):
    path, _, idx = ref.rpartition(":")
    if not path or not idx.isdigit():
        path, idx = ref, "0"
    manifest = synth.load_manifest(path)
    i = int(idx)
    if not 0 <= i < len(manifest["sequences"]):
        raise ConfigError(f"sequence index {i} out of range for {path}")
    entry = manifest["sequences"][i]
    return manifest, i, synth.render_sequence(synth.SceneSpec.from_dict(entry["spec"]))


def cmd_track(args):
    loaded = load_model(args.checkpoint)
    manifest, idx, seq = _parse_sequence_ref(args.sequence)
    desc = seq.description if args.desc is None else args.desc
    os.makedirs(args.out, exist_ok=True)
    pred_path = os.path.join(args.out, "predictions.txt")
    sel_path = os.path.join(args.out, "selectors.jsonl")
    if loaded.kind == "oracle":
        write_predictions(pred_path, seq.gt, [1.0] * len(seq))
        write_selector_reports(sel_path, [])
        return 0
    if not desc.strip():
        logger.info("empty description: language fallback mode '%s' in use", args.fallback)
    res = track_sequences(loaded.model, loaded.genome, [seq], L.DESCRIPTION, args.fallback, [desc or None])[0]
    write_predictions(pred_path, res.boxes, res.scores)
    records = [
        selector_report(np.asarray(v), sequence=f"{manifest['name']}/{idx}", frame=0 if branch == "template" else 1, stage=stage, branch=branch)
        for (stage, branch), v in sorted(res.selectors.items())
    ]
    write_selector_reports(sel_path, records)
    print(pred_path)
    return 0


def cmd_ablate(args):
    cfg = _load_config(args.config, args.out)
    table = ablate(cfg, args.axis)
    for r in table["rows"]:
        print(f"{r['arm']:>22s}  SUC {r['suc']:.4f}  P {r['precision']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _positive_int(v):
    try:
        n = int(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {v!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {n}")
    return n


def build_parser():
    p = argparse.ArgumentParser(prog="vlt", description="Language-conditioned tracker search on a synthetic benchmark.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--log-file", help="also write the run log here")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a benchmark manifest")
    g.add_argument("--profile", choices=synth.PROFILES, required=True)
    g.add_argument("--n", type=_positive_int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--name")
    g.add_argument("--length", type=_positive_int, default=synth.DEFAULT_LENGTH)
    g.set_defaults(fn=cmd_gen_data)

    d = sub.add_parser("defaults", help="print an experiment config preset")
    d.add_argument("--preset", choices=sorted(PRESETS), default="default")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(fn=cmd_defaults)

    s = sub.add_parser("search", help="train the supernet and run the evolutionary search")
    s.add_argument("--config")
    s.add_argument("--out", help="run directory (overrides output_dir)")
    s.set_defaults(fn=cmd_search)

    r = sub.add_parser("retrain", help="prune to a genome and fine-tune it")
    r.add_argument("--config")
    r.add_argument("--genome", required=True, help="genome string, file, or 'paper'")
    r.add_argument("--out")
    r.add_argument("--dry-run", action="store_true", help="only build the network and run one forward pass")
    r.set_defaults(fn=cmd_retrain)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a benchmark manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--benchmark", required=True)
    e.add_argument("--lang-mode", choices=(L.DESCRIPTION,) + L.FALLBACK_MODES, default=L.DESCRIPTION)
    e.add_argument("--fallback", choices=L.FALLBACK_MODES, default=L.ZERO)
    e.add_argument("--out")
    e.add_argument("--force", action="store_true", help="evaluate despite a checkpoint/benchmark mismatch")
    e.set_defaults(fn=cmd_eval)

    t = sub.add_parser("track", help="track one sequence and write predictions plus selector reports")
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--sequence", required=True, help="MANIFEST[:INDEX]")
    t.add_argument("--desc", help="description to use instead of the sequence's own ('' for none)")
    t.add_argument("--fallback", choices=L.FALLBACK_MODES, default=L.ZERO)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_track)

    a = sub.add_parser("ablate", help="paired runs along one axis")
    a.add_argument("--config")
    a.add_argument("--axis", choices=AXES, required=True)
    a.add_argument("--out")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    log_file = args.log_file
    if log_file is None and getattr(args, "out", None) and args.command in ("track", "search", "retrain", "ablate"):
        log_file = os.path.join(args.out, "run.log")
    _setup_logging(args.verbose, log_file)
    try:
        return args.fn(args)
    except VLTError as e:
        logger.error("%s", e)
        return e.exit_code
    except FileNotFoundError as e:
        logger.error("%s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
