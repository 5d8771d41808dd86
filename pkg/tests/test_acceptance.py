"""Acceptance run: one test per criterion, each printing a PASS/FAIL line.

The training-based criteria (7, 8, 9) run the reference preset for master
seeds 0, 1 and 2, roughly 25 CPU-minutes per seed. Run directories and
per-seed reports are archived under ``$VLT_ACCEPTANCE_DIR`` (default
``runs/acceptance`` in the repository). Finished stages whose config
fingerprint matches are reused, so delete that directory to recompute.
"""
import json
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from vltrack import experiments as E
from vltrack import lang as L
from vltrack import ops
from vltrack import search as S
from vltrack.blocks import IdentityChoice, ZeroPreservingChoice
from vltrack.cli import main as cli
from vltrack.config import DataConfig, ExperimentConfig, reference_config
from vltrack.gradcheck import gradcheck
from vltrack.metrics import PRECISION_RADIUS, EvalReport, iou, precision, suc
from vltrack.modamixer import ModaMixerCell
from vltrack.nn import BatchNorm2d, Parameter
from vltrack.search import SearchConfig, TrainSchedule
from vltrack.supernet import DESK_PLAN, GENOME_LENGTH, PAPER_GENOME, PAPER_PLAN, Genome, Supernet, decode_genome, sample_genome
from vltrack.tensor import Tensor
from vltrack.tracker import TrackerNet

from test_metrics import iou_monte_carlo, suc_oracle
from test_search import GeneMatchTracker

SEEDS = (0, 1, 2)
ARCHIVE = Path(os.environ.get("VLT_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / "runs" / "acceptance"))
PAPER_STRING = "T:[2,2,2,3,1,3,3,0,2,3,0,2,2,2,3,2]|S:[1,3,0,1,2,2,1,2,3,0,3,1,2,3,3,2]|TM:[0,3,3,0,2,3,1,0]|SM:[2,3,3,0,3,3,0,0]"


@pytest.fixture
def verdict(request):
    """Print and archive one line per criterion; the caller still asserts."""

    def report(n, title, ok, detail):
        line = f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        tr = request.config.pluginmanager.get_plugin("terminalreporter")
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        ARCHIVE.mkdir(parents=True, exist_ok=True)
        with open(ARCHIVE / "verdicts.txt", "a", encoding="utf-8") as f:
            f.write(line + "\n")
        return ok

    return report


def _save_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- 1. gradients -----------------------------------------------------------------

def p64(rng, *shape, lo=-1.0, hi=1.0):
    return Parameter(rng.uniform(lo, hi, shape), dtype=np.float64)


def _sq(t):
    return ops.mean(ops.mul(t, t))


def _op_cases(rng):
    """(scalar closure, params) per differentiable op, on fresh float64 inputs."""
    x4, y4, v = p64(rng, 2, 4, 5, 5), p64(rng, 2, 4, 5, 5), p64(rng, 3, 4)
    xl, wl, bl = p64(rng, 3, 5), p64(rng, 2, 5), p64(rng, 2)
    wc, bc, wd = p64(rng, 4, 2, 3, 3), p64(rng, 4), p64(rng, 4, 1, 3, 3)
    ker, s = p64(rng, 2, 4, 3, 3), p64(rng, 2, 4)
    gam, bet, bn = p64(rng, 4), p64(rng, 4), BatchNorm2d(4)
    table = p64(rng, 6, 3)
    logits = p64(rng, 2, 1, 3, 3)
    tgt = (rng.random((2, 1, 3, 3)) > 0.5).astype(np.float64)
    bw = rng.random((2, 1, 3, 3))
    reg = p64(rng, 2, 4, 3, 3, lo=0.5, hi=2.0)
    reg_t = rng.uniform(0.5, 2.0, (2, 4, 3, 3))
    pool_w = rng.random((2, 5, 5))
    return {
        "add": (lambda: _sq(ops.add(x4, y4)), [x4, y4]),
        "sub": (lambda: _sq(ops.sub(x4, y4)), [x4, y4]),
        "mul": (lambda: ops.sum(ops.mul(ops.mul(x4, y4), y4)), [x4, y4]),
        "relu": (lambda: ops.sum(ops.mul(ops.relu(x4), y4)), [x4, y4]),
        "sigmoid": (lambda: ops.sum(ops.mul(ops.sigmoid(v), v)), [v]),
        "clip": (lambda: ops.sum(ops.mul(ops.clip(v, -0.5, 0.5), v)), [v]),
        "exp": (lambda: ops.sum(ops.exp(v)), [v]),
        "softmax": (lambda: ops.sum(ops.mul(ops.softmax(v), v)), [v]),
        "reshape": (lambda: ops.sum(ops.mul(ops.reshape(v, (4, 3)), ops.reshape(ops.exp(v), (4, 3)))), [v]),
        "concat_split": (lambda: ops.sum(ops.mul(ops.concat(ops.split(x4, [1, 3])[::-1]), y4)), [x4, y4]),
        "channel_shuffle": (lambda: ops.sum(ops.mul(ops.channel_shuffle(x4, 2), y4)), [x4, y4]),
        "linear": (lambda: ops.sum(ops.sigmoid(ops.linear(xl, wl, bl))), [xl, wl, bl]),
        "conv2d_grouped": (lambda: _sq(ops.conv2d(x4, wc, bc, stride=2, padding=1, groups=2)), [x4, wc, bc]),
        "conv2d_depthwise": (lambda: _sq(ops.conv2d(x4, wd, None, stride=1, padding=1, groups=4)), [x4, wd]),
        "dw_xcorr": (lambda: _sq(ops.dw_xcorr(x4, ker)), [x4, ker]),
        "channel_scale": (lambda: _sq(ops.channel_scale(x4, s)), [x4, s]),
        "spatial_pool": (lambda: _sq(ops.spatial_pool(x4, pool_w)), [x4]),
        "global_avg_pool": (lambda: _sq(ops.global_avg_pool(x4)), [x4]),
        "batch_norm": (lambda: ops.sum(ops.mul(ops.batch_norm(x4, gam, bet, bn, True), y4)), [x4, gam, bet]),
        "embedding_mean": (lambda: _sq(ops.embedding_mean(table, [[0, 2, 5], [1, 1]])), [table]),
        "bce_with_logits": (lambda: ops.bce_with_logits(logits, tgt, bw), [logits]),
        "iou_loss": (lambda: ops.iou_loss(reg, reg_t, np.ones((2, 3, 3)) / 18), [reg]),
    }


def _modamixer_case(rng):
    cell = ModaMixerCell(6, 4, rng=rng)
    cell.to(np.float64)
    ga, gb = (int(g) for g in rng.integers(0, 4, 2))
    f_v, f_l = p64(rng, 2, 4, 5, 5), p64(rng, 2, 6)
    params = [f_v, f_l] + cell.proj.parameters() + cell.block_a.candidate(ga).parameters() + cell.block_b.candidate(gb).parameters()

    def fn():
        out = cell.mix(f_v, cell.project(f_l), ga, gb)
        return _sq(out)

    return fn, params


def test_gradient_integrity(verdict):
    t0 = time.process_time()
    worst = {}
    for trial in range(20):
        rng = np.random.default_rng(1000 + trial)
        cases = _op_cases(rng)
        cases["modamixer_cell"] = _modamixer_case(rng)
        for name, (fn, params) in cases.items():
            res = gradcheck(fn, params, rng=rng, max_coords=60)
            worst[name] = max(worst.get(name, 0.0), res.max_rel_error)
    cpu = time.process_time() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and cpu < 120
    verdict(1, "gradient integrity", ok, f"{len(worst)} ops x 20 trials, worst {top} {worst[top]:.2e} (< 1e-4), {cpu:.0f} s CPU (< 120)")
    assert ok, worst


# -- 2. fusion algebra --------------------------------------------------------------

def test_fusion_algebra(verdict):
    rng = np.random.default_rng(2)
    f = rng.standard_normal((2, 8, 6, 6))
    ident = ModaMixerCell(5, 8, blocks=(IdentityChoice(), IdentityChoice()), rng=rng)
    doubled = ident.mix(Tensor(f), Tensor(np.ones((2, 8)))).data
    scale = rng.uniform(-2, 2, 8)
    zp = ModaMixerCell(5, 8, blocks=(ZeroPreservingChoice(scale), ZeroPreservingChoice(scale * 3)), rng=rng)
    zeroed = zp.mix(Tensor(f), Tensor(np.zeros((2, 8)))).data
    ok = np.array_equal(doubled, 2 * f) and np.array_equal(zeroed, zp.block_b(Tensor(f)).data)
    verdict(2, "fusion algebra", ok, "mix(f, ones) == 2f and mix(f, zeros) == block_b(f), exact equality")
    assert ok


# -- 3. sampling ------------------------------------------------------------------------

def test_sampling_uniformity(verdict):
    rng = np.random.default_rng(3)
    genes = np.array([sample_genome(rng).genes for _ in range(10_000)])
    freq = np.stack([(genes == v).mean(axis=0) for v in range(4)])
    ok = freq.min() >= 0.22 and freq.max() <= 0.28
    verdict(3, "sampling uniformity", ok, f"per-gene choice frequency in [{freq.min():.4f}, {freq.max():.4f}] (need [0.22, 0.28]) over {GENOME_LENGTH} genes")
    assert ok


# -- 4. evolution -------------------------------------------------------------------

def _quick_config(out, seed=0):
    """Desk-plan pipeline small enough to run twice inside the acceptance test."""
    return ExperimentConfig(
        seed=seed,
        data=DataConfig(n_train=8, n_val=3, n_eval=2, calib_batches=1),
        search=SearchConfig(supernet_iters=20, population=6, generations=3, top_k=2, crossover=2, mutation=2, fitness_budget=3),
        train=TrainSchedule(iters=20, batch=4),
        retrain=TrainSchedule(iters=10, batch=4),
        output_dir=str(out),
    ).validate()


def test_evolution_correctness(verdict, tmp_path):
    from vltrack import synth

    val = synth.manifest_sequences(synth.build_benchmark("accept-val", 3, "distract", 40, length=10))
    monotone, hits, identical = 0, 0, True
    for seed in range(10):
        tracker = GeneMatchTracker(seed)
        cfg = SearchConfig(population=8, generations=6, top_k=2, crossover=3, mutation=3, mutation_prob=0.1, seed=seed, fitness_budget=3)
        res = S.evolve(cfg, tracker, val)
        monotone += all(b >= a for a, b in zip(res.best_per_generation, res.best_per_generation[1:]))
        hits += cfg.population * cfg.generations - tracker.calls
        for r in res.history:
            g = Genome(tuple(int(c) for c in r.genome if c.isdigit()))
            identical &= S.evaluate_fitness(tracker, g, val) == r.suc
    logs = []
    for name in ("a", "b"):
        E.Pipeline(_quick_config(tmp_path / name, seed=7)).run()
        logs.append((tmp_path / name / "search_log.jsonl").read_bytes())
    same_log = logs[0] == logs[1] and len(logs[0]) > 0
    ok = monotone == 10 and hits > 0 and identical and same_log
    verdict(4, "evolution correctness", ok, f"monotone best in {monotone}/10 runs, {hits} cache hits bit-identical={identical}, pipeline search log byte-identical={same_log}")
    assert ok


# -- 5. paper genome ------------------------------------------------------------------

def test_paper_genome_builds_and_runs(verdict):
    g = decode_genome(PAPER_STRING)
    net = Supernet(PAPER_PLAN, rng=np.random.default_rng(5))
    rng = np.random.default_rng(5)
    x_t = Tensor(rng.random((1, 3, 64, 64)).astype(np.float32))
    x_s = Tensor(rng.random((1, 3, 160, 160)).astype(np.float32))
    lin = L.LanguageInput(["the small red square moving left"])
    f_t, f_s = net(x_t, x_s, lin, g)
    loss = ops.add(_sq(f_t), _sq(f_s))
    loss.backward()
    grads = [p.grad for p in net.template.stem.conv.parameters() + net.search.stem.conv.parameters()]
    ok = (
        g == PAPER_GENOME
        and f_t.shape[1:] == (256, 8, 8)
        and f_s.shape[1:] == (256, 20, 20)
        and np.isfinite(float(loss.data))
        and all(gr is not None and np.all(np.isfinite(gr)) for gr in grads)
    )
    verdict(5, "paper genome", ok, f"parses, template {f_t.shape[1:]} search {f_s.shape[1:]}, forward/backward finite")
    assert ok


# -- 6. metric oracles -------------------------------------------------------------

def precision_oracle(pred, gt, radius=PRECISION_RADIUS):
    return sum(1 for p, q in zip(pred, gt) if ((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) ** 0.5 < radius) / len(pred)


def test_metric_oracles(verdict):
    rng = np.random.default_rng(6)
    suc_bad = prec_bad = 0
    for i in range(1000):
        n = int(rng.integers(1, 51))
        series = rng.integers(0, 21, n) / 20 if i % 3 == 0 else rng.random(n)
        suc_bad += suc(series) != suc_oracle(series.tolist())
        gt = rng.uniform(0, 100, (n, 2))
        pred = gt + rng.normal(0, 15, (n, 2))
        if i % 4 == 0:  # exactly on the radius
            ang = rng.uniform(0, 2 * np.pi, n)
            pred = gt + 20.0 * np.stack([np.cos(ang), np.sin(ang)], 1)
        prec_bad += precision(pred, gt) != precision_oracle(pred.tolist(), gt.tolist())
    iou_err = 0.0
    for _ in range(100):
        a = (*rng.uniform(0, 10, 2), *rng.uniform(1, 6, 2))
        b = (*rng.uniform(0, 10, 2), *rng.uniform(1, 6, 2))
        iou_err = max(iou_err, abs(iou(a, b) - iou_monte_carlo(a, b, rng, n=2_000_000)))
    ok = suc_bad == 0 and prec_bad == 0 and iou_err < 1e-3
    verdict(6, "metric oracles", ok, f"suc mismatches {suc_bad}/1000, precision mismatches {prec_bad}/1000, iou max |err| {iou_err:.2e} (< 1e-3)")
    assert ok


# -- 7-9. reference runs ------------------------------------------------------------

@pytest.fixture(scope="module")
def reference_runs():
    """Per seed: symmetry ablation plus language / zero / missing evaluations of the asymmetric model."""
    runs = {}
    for seed in SEEDS:
        cfg = reference_config(seed, output_dir=str(ARCHIVE / f"seed{seed}"))
        t0 = time.process_time()
        table = E.ablate(cfg, "symmetry")
        pl = E.Pipeline(cfg)
        loaded = E.load_model(pl.path("model_asymmetric.ckpt"))
        reports = {
            "language": pl.evaluate(loaded, "model_asymmetric@language"),
            "zero": pl.evaluate(loaded, "model_asymmetric@zero", lang_mode=L.ZERO),
        }
        for mode in L.FALLBACK_MODES:
            reports[f"missing/{mode}"] = pl.evaluate(loaded, f"model_asymmetric@missing_{mode}", fallback=mode, missing_language=True)
        runs[seed] = {"dir": Path(pl.out), "table": table, "reports": reports, "cpu_s": time.process_time() - t0}
    return runs


@pytest.mark.slow
def test_language_helps(verdict, reference_runs):
    gaps = {}
    for seed, run in reference_runs.items():
        lang_suc, zero_suc = run["reports"]["language"].suc, run["reports"]["zero"].suc
        gaps[seed] = lang_suc - zero_suc
        _save_json(
            ARCHIVE / f"seed{seed}" / "language_gap.json",
            {"seed": seed, "suc_language": lang_suc, "suc_zero": zero_suc, "gap": gaps[seed], "checkpoint": "model_asymmetric.ckpt"},
        )
    wins = sum(g >= 0.03 for g in gaps.values())
    ok = wins >= 2
    detail = ", ".join(f"seed {s} {g:+.4f}" for s, g in gaps.items())
    verdict(7, "language helps", ok, f"SUC(language) - SUC(zero) {detail}; {wins}/3 seeds >= +0.03 (need 2)")
    assert ok, gaps


@pytest.mark.slow
def test_asymmetry_not_worse(verdict, reference_runs):
    asym, sym, lines = [], [], ["| seed | asymmetric | symmetric | tied |", "|---|---|---|---|"]
    for seed, run in reference_runs.items():
        rows = {r["arm"]: r for r in run["table"]["rows"]}
        asym.append(rows["asymmetric"]["suc"])
        sym.append(rows["symmetric"]["suc"])
        lines.append(f"| {seed} | {asym[-1]:.4f} | {sym[-1]:.4f} | {rows['symmetric']['tied']} |")
    ma, ms = statistics.median(asym), statistics.median(sym)
    lines.append(f"| median | {ma:.4f} | {ms:.4f} | |")
    (ARCHIVE / "symmetry_comparison.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    ok = ma >= ms - 0.01
    verdict(8, "asymmetric vs symmetric", ok, f"median SUC {ma:.4f} vs {ms:.4f} (need >= sym - 0.01); superior={ma > ms}")
    assert ok


@pytest.mark.slow
def test_missing_language_training(verdict, reference_runs, tmp_path):
    rates = []
    for run in reference_runs.values():
        for name in ("supernet_loss.json", "model_asymmetric_loss.json", "model_symmetric_loss.json"):
            rec = json.loads((run["dir"] / name).read_text())
            rates.append(rec["missing_rate"])
    reports_ok = True
    for run in reference_runs.values():
        for mode in L.FALLBACK_MODES:
            rep = run["reports"][f"missing/{mode}"]
            again = EvalReport.load(run["dir"] / f"eval_model_asymmetric_missing_{mode}.json")
            reports_ok &= again == rep and rep.extra["fallback"] == mode and 0.0 <= rep.suc <= 1.0 and len(rep.sequences) == 20
    # both fallbacks also used during training, end to end
    table = E.ablate(_quick_config(tmp_path / "fallback"), "fallback")
    arms = [r["arm"] for r in table["rows"]]
    e2e_ok = arms == [f"{m}/{k}" for m in L.FALLBACK_MODES for k in ("language", "missing")]
    for mode in L.FALLBACK_MODES:
        rep = EvalReport.load(tmp_path / "fallback" / f"eval_model_{mode}_missing.json")
        e2e_ok &= rep.extra["missing_language"] and rep.extra["fallback"] == mode
    ok = min(rates) >= 0.47 and max(rates) <= 0.53 and reports_ok and e2e_ok
    verdict(9, "missing-language training", ok, f"MISSING rate in [{min(rates):.4f}, {max(rates):.4f}] over {len(rates)} training runs (need [0.47, 0.53]); fallback reports valid={reports_ok and e2e_ok}")
    assert ok


# -- 10. determinism ------------------------------------------------------------------

def test_cli_determinism(verdict, tmp_path):
    ck = tmp_path / "desk.ckpt"
    net = TrackerNet(DESK_PLAN, seed=10)
    net.eval()
    E.save_model(ck, net, sample_genome(np.random.default_rng(10)), "acceptance")
    same = {}
    for k in ("a", "b"):
        d = tmp_path / k
        assert cli(["gen-data", "--profile", "distract", "--n", "3", "--seed", "10", "--out", str(d / "bench.json"), "--length", "12"]) == 0
        assert cli(["eval", "--checkpoint", str(ck), "--benchmark", str(d / "bench.json"), "--out", str(d / "report.json")]) == 0
        assert cli(["track", "--checkpoint", str(ck), "--sequence", f"{d / 'bench.json'}:2", "--out", str(d / "track")]) == 0
    for rel in ("bench.json", "report.json", "track/predictions.txt", "track/selectors.jsonl"):
        same[rel] = (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    ok = all(same.values())
    verdict(10, "determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok
