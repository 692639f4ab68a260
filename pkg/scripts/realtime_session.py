"""Paced closed-loop session with a pruned best CNN; prints the latency report.

    python scripts/realtime_session.py --seconds 60 --prune 0.7
"""
import argparse
import json

from carm import compress as C
from carm import runtime as R
from carm.dataset import SegmentationSpec, balance_classes, loso_split, prepare_recordings, \
    zscore_per_subject
from carm.eeg import SynthConfig, generate_synthetic_session
from carm.models import best_cnn, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seconds", type=float, default=60.0)
    p.add_argument("--prune", type=float, default=0.7)
    p.add_argument("--step", type=int, default=25)
    p.add_argument("--rate-hz", type=float, default=None)
    p.add_argument("--subject", type=int, default=1)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    synth = SynthConfig(seed=a.seed)
    recs = [generate_synthetic_session(synth, s, k) for s in range(1, 6) for k in range(1, 4)]
    ws = zscore_per_subject(balance_classes(prepare_recordings(recs, SegmentationSpec(190, 25, 63)),
                                            seed=a.seed))
    split = loso_split(ws, a.subject, 0.8, a.seed)
    model = train(best_cnn(), split, epochs=a.epochs, seed=a.seed)
    if a.prune:
        model = C.finetune_pruned(C.prune_global(model, a.prune), split, 3, seed=a.seed)

    stats = R.calibration_stats(generate_synthetic_session(synth, a.subject, 0))
    src = R.StreamSource.synthetic(synth, seconds=a.seconds, realtime=True, subject=a.subject)
    log = R.run_session(R.PipelineConfig(models=[model], step_samples=a.step,
                                         inference_rate_hz=a.rate_hz, stats=stats), src)
    rep = R.measure_pipeline_latency(log).to_json()
    acc = R.online_accuracy(log, src.recording)
    rep["online_accuracy"] = None if acc != acc else acc
    rep["wall_seconds"] = log.wall_seconds
    print(json.dumps(rep, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
