"""Leave-one-subject-out accuracy of the best configuration per family on synthetic data.

    python scripts/loso_benchmark.py --families CNN,LSTM --epochs 10 --out results/loso.csv
"""
import argparse
import csv
import time
from dataclasses import dataclass
from pathlib import Path

from carm.dataset import (SegmentationSpec, balance_classes, loso_split, prepare_recordings,
                          stats_report, zscore_per_subject)
from carm.eeg import SynthConfig, generate_synthetic_session
from carm.models import best_cnn, best_forest, best_lstm, best_transformer, evaluate, train

BEST = {"CNN": best_cnn, "LSTM": best_lstm, "Transformer": best_transformer,
        "RandomForest": best_forest}


@dataclass
class LosoConfig:
    families: tuple = ("CNN",)
    subjects: int = 5
    sessions: int = 3
    epochs: int = 10
    seed: int = 0
    step: int = 25
    trim: int = 63


def run(cfg: LosoConfig) -> dict:
    synth = SynthConfig(seed=cfg.seed)
    recs = [generate_synthetic_session(synth, s, k)
            for s in range(1, cfg.subjects + 1) for k in range(1, cfg.sessions + 1)]
    results = {}
    for fam in cfg.families:
        config = BEST[fam]()
        ws = prepare_recordings(recs, SegmentationSpec(config.window_samples, cfg.step, cfg.trim))
        ws = zscore_per_subject(balance_classes(ws, seed=cfg.seed))
        accs = []
        for held in range(1, cfg.subjects + 1):
            t0 = time.perf_counter()
            split = loso_split(ws, held, 0.8, seed=cfg.seed)
            model = train(config, split, epochs=cfg.epochs, seed=cfg.seed)
            accs.append(evaluate(model, split.test))
            print(f"{fam:12s} held-out {held}: {accs[-1]:.4f} ({time.perf_counter() - t0:.1f}s)")
        results[fam] = accs
    return results


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--families", default="CNN")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    a = p.parse_args()
    cfg = LosoConfig(tuple(f.strip() for f in a.families.split(",")), epochs=a.epochs, seed=a.seed)
    results = run(cfg)
    rep = stats_report(results) if len(next(iter(results.values()))) > 1 else None
    for fam, accs in results.items():
        line = f"{fam}: mean {sum(accs) / len(accs):.4f}"
        if rep:
            line += f" +/- {rep.half_width[fam]:.4f} (91% CI)"
        print(line)
    if rep:
        for (x, y), (t, pv) in rep.pairwise.items():
            print(f"{x} vs {y}: t={t:.3f} p={pv:.4f}")
    if a.out:
        a.out.parent.mkdir(parents=True, exist_ok=True)
        with open(a.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["family", "held_out_subject", "accuracy"])
            for fam, accs in results.items():
                for s, acc in enumerate(accs, 1):
                    w.writerow([fam, s, f"{acc:.6f}"])


if __name__ == "__main__":
    main()
