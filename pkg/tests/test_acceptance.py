"""Acceptance criteria 1-10.

Each test records one [PASS]/[FAIL] line (printed in the pytest terminal summary)
before asserting, so a failing criterion still reports its measured numbers.
"""
import math
import time

import numpy as np
import pytest
from scipy import optimize

from carm import compress as C
from carm import dataset as D
from carm import dsp
from carm import evosearch as es
from carm import runtime as R
from carm.armctl import (ActuationPolicy, ArmController, ArmState, COMMAND_WORDS, ServoFrame,
                         decode_frame, encode_frame)
from carm.eeg import ActionLabel, SynthConfig, generate_synthetic_session
from carm.models import evaluate, save_model
from carm.models.config import Family
import conftest
from conftest import record_acceptance
from gradcheck import TOL, layer_suite
from oracles import brute_front, ci_oracle, paired_t_oracle, select_best_direct

FS = 125.0


def report(number, name, ok, detail):
    record_acceptance(number, name, ok, detail)
    print(f"[{'PASS' if ok else 'FAIL'}] {number}. {name}: {detail}")
    assert ok, detail


# -- 1 ---------------------------------------------------------------------------------

def test_criterion_01_filter_correctness():
    t0 = time.perf_counter()
    bp = dsp.design_bandpass(dsp.BandpassSpec(FS))
    notch = dsp.design_notch(dsp.NotchSpec(FS))

    def mag(sos, f):
        return float(np.abs(dsp.frequency_response(sos, np.array([f]), FS))[0])

    edges = [mag(bp, 0.5), mag(bp, 45.0)]
    mid = mag(bp, 10.0)
    n50 = mag(notch, 50.0)
    g = lambda f: mag(notch, f) - 1 / math.sqrt(2)
    bw = optimize.brentq(g, 50.0, 55.0, xtol=1e-12) - optimize.brentq(g, 45.0, 50.0, xtol=1e-12)

    t = np.arange(int(20 * FS)) / FS
    x = np.sin(2 * np.pi * 10 * t) + np.sin(2 * np.pi * 50 * t)
    y = dsp.filter_batch(dsp.default_chain(FS), x[:, None])[:, 0]
    sx, sy = x[int(4 * FS):], y[int(4 * FS):]
    f = np.fft.rfftfreq(len(sx), 1 / FS)
    k = int(np.argmin(np.abs(f - 50)))
    residual = (np.abs(np.fft.rfft(sy))[k] / np.abs(np.fft.rfft(sx))[k]) ** 2
    elapsed = time.perf_counter() - t0

    ok = (all(abs(e - 1 / math.sqrt(2)) <= 1e-3 for e in edges) and mid >= 0.999
          and n50 <= 1e-6 and abs(bw - 50 / 30) <= 0.05 * 50 / 30 and residual <= 0.01
          and elapsed < 1.0)
    report(1, "filter correctness", ok,
           f"|H(0.5)|={edges[0]:.6f} |H(45)|={edges[1]:.6f} |H(10)|={mid:.6f} "
           f"|N(50)|={n50:.1e} bw={bw:.4f}Hz residual50={residual:.1e} ({elapsed:.2f}s)")


# -- 2 ---------------------------------------------------------------------------------

def test_criterion_02_gradient_suite():
    t0 = time.perf_counter()
    errs = layer_suite(0)
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = all(v <= TOL for v in errs.values()) and elapsed < 60
    report(2, "gradient suite", ok,
           f"max rel err {errs[worst]:.1e} ({worst}) over {sorted(errs)} ({elapsed:.1f}s)")


# -- 3 ---------------------------------------------------------------------------------

def test_criterion_03_loso_accuracy(loso_models):
    accs = {s: a for s, (_, _, a) in loso_models.items()}
    mean = float(np.mean(list(accs.values())))
    elapsed = sum(conftest.FIXTURE_SECONDS[k] for k in
                  ("synth_recordings", "loso_windows", "loso_models"))
    ok = mean >= 0.90 and elapsed < 15 * 60
    per = " ".join(f"s{s}={a:.3f}" for s, a in accs.items())
    report(3, "synthetic LOSO accuracy (best CNN)", ok,
           f"mean={mean:.4f} [{per}] ({elapsed:.0f}s)")


# -- 4 and 5 ---------------------------------------------------------------------------

SPACE_SHAPES = [(2, 2, 2), (2, 2, 2, 2), (2, 2, 2, 4), (2, 3, 4), (2, 2, 5), (3, 3, 3)]


def lookup_trial(seed):
    rng = np.random.default_rng(seed)
    shape = SPACE_SHAPES[rng.integers(len(SPACE_SHAPES))]
    names = ("window_samples", "kernel", "stride", "filters")[:len(shape)]
    space = es.GeneSpace({Family.CNN: {n: tuple(range(k)) for n, k in zip(names, shape)}})
    configs = list(space.enumerate())
    acc = rng.choice([0.5, 0.6, 0.7, 0.8, 0.9], len(configs))
    par = rng.integers(1, 8, len(configs)) * 100
    table = {c.key(): (float(a), int(p)) for c, a, p in zip(configs, acc, par)}
    res = es.evolve(es.SearchConfig(population=8, generations=10, seed=seed),
                    lambda c, s: table[c.key()], space)
    points = [table[c.key()] for c in configs]
    front_ok = {c.config.key() for c in res.front} == {configs[i].key() for i in brute_front(points)}
    cands = [es.ParetoCandidate(c, *table[c.key()]) for c in configs]
    best_ok = all(es.select_best(cands, a) is cands[select_best_direct(points, a)]
                  for a in (0.75, 0.85, 0.95))
    return front_ok, best_ok, len(configs)


def test_criterion_04_search_oracle_equivalence():
    t0 = time.perf_counter()
    results = [lookup_trial(seed) for seed in range(100)]
    elapsed = time.perf_counter() - t0
    fronts = sum(r[0] for r in results)
    bests = sum(r[1] for r in results)
    sizes = sorted({r[2] for r in results})
    ok = fronts == 100 and bests == 100 and elapsed < 60
    report(4, "evolutionary search oracle equivalence", ok,
           f"front {fronts}/100, select_best {bests}/100, space sizes {sizes} ({elapsed:.1f}s)")


def test_criterion_05_fitness_front_examples():
    from carm.models.config import ModelConfig
    c1 = es.ParetoCandidate(ModelConfig(Family.CNN, {"id": 1}), 0.9, 1000)
    c2 = es.ParetoCandidate(ModelConfig(Family.CNN, {"id": 2}), 0.8, 500)
    s = [c.fitness for c in es.fitness_score([c1, c2], 0.7, 0.3)]
    front = [c.point for c in es.pareto_front([c1, c2])]
    picks = {a: es.select_best(es.pareto_front([c1, c2]), a).point for a in (0.75, 0.85)}
    ok = (abs(s[0] - 0.4) <= 1e-15 and s[1] == 0.0 and front == [(0.8, 500), (0.9, 1000)]
          and picks == {0.75: (0.8, 500), 0.85: (0.9, 1000)})
    report(5, "fitness/front worked examples", ok,
           f"S={tuple(round(v, 15) for v in s)} front={front} best={picks}")


# -- 6 ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pruned_models(loso_models):
    """70%-pruned copy of each LOSO model, with and without masked fine-tuning."""
    t0 = time.perf_counter()
    out = {}
    for held, (model, split, _) in loso_models.items():
        p = C.prune_global(model, 0.7)
        out[held] = (p, C.finetune_pruned(p, split, epochs=3, seed=0))
    conftest.FIXTURE_SECONDS["pruned_models"] = time.perf_counter() - t0
    return out


def test_criterion_06_compression(loso_models, pruned_models, tmp_path):
    t0 = time.perf_counter()
    exact, drops, raw_drops, agree, q_err_ok, ratio = True, [], [], [], True, []
    for held, (model, split, acc) in loso_models.items():
        pruned, tuned = pruned_models[held]
        n = sum(w.size for w in C.prunable_weights(model).values())
        for m in (pruned, tuned):
            zeros = sum(int(np.sum(w == 0)) for w in C.prunable_weights(m).values())
            exact &= zeros == math.floor(0.7 * n)
        raw_drops.append(acc - evaluate(pruned, split.test))
        drops.append(acc - evaluate(tuned, split.test))
        qm = C.quantize_int8(model)
        for name, q in qm.quantized.items():
            w = model.tensors()[name]
            q_err_ok &= bool(np.max(np.abs(q.dequantize() - w)) <= q.scale / 2 * (1 + 1e-6))
        x = split.test.data
        agree.append(float(np.mean(qm.predict_proba(x).argmax(1) == model.predict_proba(x).argmax(1))))
        fsize = save_model(model, tmp_path / f"f{held}.carm")
        qsize = C.save_quantized(qm, tmp_path / f"q{held}.carm")
        ratio.append(qsize / fsize)
    elapsed = time.perf_counter() - t0 + conftest.FIXTURE_SECONDS.get("pruned_models", 0.0)
    drop = float(np.mean(drops))
    ok = (exact and drop <= 0.02 and q_err_ok and min(agree) >= 0.95 and max(ratio) <= 0.30
          and elapsed < 300)
    report(6, "compression", ok,
           f"zeros exact={exact}; mean drop after prune+3-epoch masked fine-tune "
           f"{100 * drop:.2f} pts (prune only {100 * np.mean(raw_drops):.1f} pts); "
           f"int8 err<=scale/2={q_err_ok}; argmax agreement min {min(agree):.3f}; "
           f"size ratio max {max(ratio):.3f} ({elapsed:.0f}s)")


# -- 7 ---------------------------------------------------------------------------------

def test_criterion_07_online_offline_equivalence(loso_models):
    t0 = time.perf_counter()
    model = loso_models[1][0]
    cfg = SynthConfig(seed=0)
    rec = generate_synthetic_session(cfg, 1, 1)
    stats = R.calibration_stats(generate_synthetic_session(cfg, 1, 0))
    log = R.run_session(R.PipelineConfig(models=[model], stats=stats), R.StreamSource.replay(rec))
    offline = R.offline_labels(model, rec, 25, stats=stats)
    elapsed = time.perf_counter() - t0
    same = np.array_equal(log.labels, offline)
    ok = same and not log.violations and log.dropped_frames == 0 and elapsed < 120
    report(7, "online/offline equivalence", ok,
           f"{len(log.labels)} labels, bit-identical={same}, drops={log.dropped_frames} "
           f"({elapsed:.1f}s)")


# -- 8 ---------------------------------------------------------------------------------

def test_criterion_08_safety_and_protocol():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    unsafe = 0
    for _ in range(10_000):
        lo = float(rng.uniform(0, 90))
        hi = float(rng.uniform(lo, 180))
        ctl = ArmController(state=ArmState(positions=(float(rng.uniform(lo, hi)),) * 3,
                                           limits=((lo, hi),) * 3),
                            policy=ActuationPolicy(float(rng.uniform(0, 40)), bool(rng.integers(2))))
        for _ in range(int(rng.integers(1, 20))):
            if rng.random() < 0.2:
                ctl.command(COMMAND_WORDS[int(rng.integers(len(COMMAND_WORDS)))])
            else:
                ctl.act(ActionLabel(int(rng.integers(3))), rng.dirichlet(np.ones(3)))
            ctl.tick(float(rng.uniform(0, 0.3)))
            unsafe += not ctl.within_limits()
    mismatches = 0
    for _ in range(10_000):
        if rng.random() < 0.5:
            f = ServoFrame.set_position(int(rng.integers(3)), int(rng.integers(0x10000)))
        else:
            f = ServoFrame.set_mode(int(rng.integers(3)))
        mismatches += decode_frame(encode_frame(f)) != f
    example = encode_frame(ServoFrame.set_position(0, 9000)).hex(" ").upper()
    elapsed = time.perf_counter() - t0
    ok = unsafe == 0 and mismatches == 0 and example == "AA 01 00 28 23 0A" and elapsed < 60
    report(8, "closed-loop safety and protocol", ok,
           f"limit violations {unsafe}/10000 sequences, round-trip mismatches {mismatches}/10000, "
           f"example frame {example} ({elapsed:.1f}s)")


# -- 9 ---------------------------------------------------------------------------------

def test_criterion_09_realtime_sustainment(pruned_models):
    model = pruned_models[1][1]
    cfg = SynthConfig(seed=0)
    stats = R.calibration_stats(generate_synthetic_session(cfg, 1, 0))
    src = R.StreamSource.synthetic(cfg, seconds=60.0, realtime=True, subject=1)
    log = R.run_session(R.PipelineConfig(models=[model], step_samples=25, stats=stats), src)
    lat = R.measure_pipeline_latency(log)
    ok = lat.dropped_windows == 0 and lat.p95 < 0.2 and lat.n == 293 and not log.violations
    report(9, "real-time sustainment (70%-pruned CNN)", ok,
           f"{lat.n} windows, dropped {lat.dropped_windows}, p95 {1e3 * lat.p95:.2f} ms, "
           f"median {1e3 * lat.median:.2f} ms, wall {log.wall_seconds:.1f}s")


# -- 10 --------------------------------------------------------------------------------

def test_criterion_10_statistics():
    a = [0.91, 0.88, 0.93, 0.90, 0.86]
    b = [0.87, 0.86, 0.90, 0.88, 0.85]
    t, p = D.paired_t_test(a, b)
    t_ref, p_ref = paired_t_oracle(a, b)
    mean, half = D.confidence_interval(a, 0.91)
    m_ref, h_ref = ci_oracle(a, 0.91)
    degenerate = D.paired_t_test([0.9, 0.8, 0.7], [0.9, 0.8, 0.7])
    err = max(abs(t - t_ref), abs(p - p_ref), abs(mean - m_ref), abs(half - h_ref))
    ok = err <= 1e-6 and degenerate == (0.0, 1.0)
    report(10, "statistics", ok,
           f"t={t:.6f} p={p:.6f} CI91={mean:.4f}+/-{half:.6f}; max oracle err {err:.1e}; "
           f"equal pairs -> {degenerate}")
