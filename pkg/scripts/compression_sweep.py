"""Accuracy, sparsity and latency across pruning levels (with optional masked
fine-tuning) and int8 quantisation of the best CNN, for one held-out subject.

    python scripts/compression_sweep.py --held-out 5 --finetune-epochs 3 --out results/sweep.csv
"""
import argparse
import csv
from pathlib import Path

from carm import compress as C
from carm.dataset import SegmentationSpec, balance_classes, loso_split, prepare_recordings, \
    zscore_per_subject
from carm.eeg import SynthConfig, generate_synthetic_session
from carm.models import best_cnn, evaluate, train

FIELDS = ("variant", "accuracy", "sparsity", "median_latency_s", "p95_latency_s")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--held-out", type=int, default=5)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--finetune-epochs", type=int, default=3)
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    a = p.parse_args()

    synth = SynthConfig(seed=a.seed)
    recs = [generate_synthetic_session(synth, s, k) for s in range(1, 6) for k in range(1, 4)]
    ws = prepare_recordings(recs, SegmentationSpec(190, 25, 63))
    split = loso_split(zscore_per_subject(balance_classes(ws, seed=a.seed)), a.held_out, 0.8, a.seed)
    base = train(best_cnn(), split, epochs=a.epochs, seed=a.seed)
    x = split.test.data

    rows = []
    variants = [("float", base)]
    for r in C.PRUNE_LEVELS[1:]:
        pruned = C.prune_global(base, r)
        variants.append((f"prune{r:g}", pruned))
        if a.finetune_epochs:
            variants.append((f"prune{r:g}+ft{a.finetune_epochs}",
                             C.finetune_pruned(pruned, split, a.finetune_epochs, seed=a.seed)))
    variants.append(("int8", C.quantize_int8(base)))
    for name, m in variants:
        lat = C.benchmark_latency(m, x, repeats=a.repeats)
        row = {"variant": name, "accuracy": f"{evaluate(m, split.test):.4f}",
               "sparsity": f"{C.sparsity_of(m):.4f}", "median_latency_s": f"{lat.median:.3e}",
               "p95_latency_s": f"{lat.p95:.3e}"}
        rows.append(row)
        print("  ".join(f"{k}={v}" for k, v in row.items()))
    if a.out:
        a.out.parent.mkdir(parents=True, exist_ok=True)
        with open(a.out, "w", newline="") as f:
            w = csv.DictWriter(f, FIELDS)
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
