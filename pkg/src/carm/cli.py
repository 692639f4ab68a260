"""Command line: ``carm synth | search | compress | run | report``.

Exit codes: 0 success, 2 configuration error, 3 invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, dsp
from .dataset import (DatasetSplit, SegmentationSpec, WindowSet, balance_classes, loso_split,
                      prepare_recordings, zscore_per_subject)
from .eeg import RecordingFormatError, SynthConfig, generate_synthetic_session, load_recording, \
    save_recording

log = logging.getLogger("carm")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
SEARCH_WINDOW = 200
DEFAULT_STEP = 25
DEFAULT_TRIM = 63


class ConfigurationError(Exception):
    pass


class InvariantViolation(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("CARM_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"CARM_SEED must be an integer, got {raw!r}") from None


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_manifest(out: Path, command: str, args, artifacts, started: float, extra=None):
    cfg = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": command, "config": cfg, "seed": cfg.get("seed"),
        "artifacts": sorted(str(a) for a in artifacts), "version": __version__,
        "start_time": started, "end_time": time.time(),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_dataset_dir(path) -> list:
    d = Path(path)
    if not d.is_dir():
        raise ConfigurationError(f"data directory {d} does not exist")
    files = sorted(p for p in d.glob("*.csv"))
    if not files:
        raise ConfigurationError(f"no recordings (*.csv) in {d}")
    return [load_recording(p) for p in files]


def prepare_windows(recordings, window: int) -> WindowSet:
    ws = prepare_recordings(recordings, SegmentationSpec(window, DEFAULT_STEP, DEFAULT_TRIM))
    return zscore_per_subject(ws)


# -- synth ----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.time()
    if args.subjects < 1 or args.sessions < 1 or args.minutes <= 0:
        raise ConfigurationError("--subjects, --sessions and --minutes must be positive")
    out = _out_dir(args.out)
    cfg = SynthConfig(seed=args.seed, session_minutes=args.minutes)
    written = []
    for s in range(1, args.subjects + 1):
        for k in range(1, args.sessions + 1):
            rec = generate_synthetic_session(cfg, s, k)
            path = out / f"sub{s:02d}_ses{k}.csv"
            save_recording(rec, path)
            written.append(path)
    write_manifest(out, "synth", args, written, started)
    print(f"wrote {len(written)} recordings to {out}")
    return EXIT_OK


# -- search ---------------------------------------------------------------------------

def make_evaluator(split: DatasetSplit, epochs: int, max_train: int | None):
    from .models.training import evaluate, param_count, train

    def evaluator(config, seed):
        sub = split
        if max_train is not None and len(split.train) > max_train:
            rng = np.random.default_rng(seed)
            idx = np.sort(rng.choice(len(split.train), max_train, replace=False))
            sub = DatasetSplit(split.train.subset(idx), split.val, split.test,
                               split.held_out_subject)
        model = train(config, sub, epochs=epochs, seed=seed)
        return evaluate(model, split.test), param_count(model)

    return evaluator


def cmd_search(args) -> int:
    from . import evosearch as es
    from .models.artifact import save_model
    from .models.training import evaluate, train

    started = time.time()
    out = _out_dir(args.out)
    recs = load_dataset_dir(args.data)
    families = [f.strip() for f in args.families.split(",") if f.strip()]
    try:
        space = es.GeneSpace(families=families)
        search = es.SearchConfig(population=args.pop, generations=args.gens, alpha=args.alpha,
                                 w_a=args.wa, w_p=args.wp, seed=args.seed)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    ws = balance_classes(prepare_windows(recs, SEARCH_WINDOW), args.seed)
    subjects = sorted(int(s) for s in np.unique(ws.subjects))
    held = args.held_out if args.held_out is not None else subjects[-1]
    if held not in subjects:
        raise ConfigurationError(f"held-out subject {held} not in data {subjects}")
    split = loso_split(ws, held, 0.8, args.seed)
    result = es.evolve(search, make_evaluator(split, args.epochs, args.max_train), space)
    es.write_history_csv(result, out / "history.csv")
    es.write_front_csv(result, out / "front.csv")
    no_val = split.val.subset(np.zeros(0, dtype=np.int64))
    full = DatasetSplit(WindowSet.concat([split.train, split.val]), no_val, split.test, held)
    best = train(result.best.config, full, epochs=args.final_epochs, seed=args.seed)
    best.meta = {"held_out_subject": held, "search_accuracy": result.best.accuracy,
                 "test_accuracy": evaluate(best, split.test)}
    save_model(best, out / "best.carm")
    (out / "best.json").write_text(json.dumps(
        {"config": result.best.config.to_json(), "accuracy": result.best.accuracy,
         "params": result.best.params, "retrained_test_accuracy": best.meta["test_accuracy"],
         "failures": [[c.canonical(), e] for c, e in result.failures]},
        indent=2, sort_keys=True) + "\n")
    arts = [out / n for n in ("history.csv", "front.csv", "best.carm", "best.json")]
    write_manifest(out, "search", args, arts, started)
    print(f"front: {len(result.front)} members; best {result.best.config.family.value} "
          f"A={result.best.accuracy:.4f} P={result.best.params}")
    return EXIT_OK


# -- compress -------------------------------------------------------------------------

REPORT_FIELDS = ("variant", "accuracy", "params", "nonzero_params", "sparsity",
                 "median_latency_s", "p95_latency_s", "size_bytes", "float_size_bytes")


def _eval_windows(model, data_dir, held_out):
    recs = load_dataset_dir(data_dir)
    ws = prepare_windows(recs, model.window_samples)
    full = ws
    if held_out is not None and np.any(ws.subjects == held_out):
        ws = ws.subset(ws.subjects == held_out)
    return ws, full


def cmd_compress(args) -> int:
    from . import compress as C
    from .models.artifact import load_model, save_model

    started = time.time()
    out = _out_dir(args.out)
    model = load_model(args.model)
    if model.network is None:
        raise ConfigurationError("only neural models can be pruned or quantised")
    held = args.held_out if args.held_out is not None else model.meta.get("held_out_subject")
    ws, all_windows = _eval_windows(model, args.data, held)
    tmp_float = out / ".float_reference.carm"
    float_size = save_model(model, tmp_float)
    tmp_float.unlink()
    if args.prune is not None:
        try:
            variant_model = C.prune_global(model, args.prune)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None
        if args.finetune_epochs > 0:
            if held is None or not np.any(all_windows.subjects == held):
                raise ConfigurationError("--finetune-epochs needs a held-out subject present "
                                         "in --data (use --held-out)")
            split = loso_split(balance_classes(all_windows, args.seed), held, 0.8, args.seed)
            variant_model = C.finetune_pruned(variant_model, split, args.finetune_epochs,
                                              seed=args.seed)
        variant = f"prune{args.prune:g}"
        path = out / f"model_{variant}.carm"
        size = save_model(variant_model, path)
        nonzero = sum(int(np.count_nonzero(v)) for v in variant_model.tensors().values())
        params = variant_model.n_params()
    else:
        variant_model = C.quantize_int8(model)
        variant = "int8"
        path = out / "model_int8.carm"
        size = C.save_quantized(variant_model, path)
        nonzero = sum(int(np.count_nonzero(v)) for v in
                      C.dequantize(variant_model).tensors().values())
        params = variant_model.n_params()
    probs = variant_model.predict_proba(ws.data)
    acc = float(np.mean(np.argmax(probs, axis=1) == ws.labels))
    lat = C.benchmark_latency(variant_model, ws.data, repeats=args.repeats)
    row = {"variant": variant, "accuracy": f"{acc:.6f}", "params": params,
           "nonzero_params": nonzero, "sparsity": f"{C.sparsity_of(variant_model):.6f}",
           "median_latency_s": f"{lat.median:.6g}", "p95_latency_s": f"{lat.p95:.6g}",
           "size_bytes": size, "float_size_bytes": float_size}
    report = out / "compress_report.csv"
    new = not report.exists()
    with open(report, "a", newline="") as f:
        w = csv.DictWriter(f, REPORT_FIELDS)
        if new:
            w.writeheader()
        w.writerow(row)
    write_manifest(out, "compress", args, [path, report], started, {"result": row})
    print(json.dumps(row, sort_keys=True))
    return EXIT_OK


# -- run ------------------------------------------------------------------------------

def cmd_run(args) -> int:
    from . import runtime as R
    from .models.artifact import load_any

    started = time.time()
    out = _out_dir(args.out)
    models = [load_any(p) for p in args.model]
    if args.replay:
        rec = load_recording(args.replay)
        source = R.StreamSource.replay(rec, realtime=args.realtime)
        stats = R.calibration_stats(rec)
    else:
        cfg = SynthConfig(seed=args.seed)
        source = R.StreamSource.synthetic(cfg, seconds=args.seconds, realtime=args.realtime,
                                          subject=args.subject, session=1)
        # calibrate on a separate session of the same synthetic subject
        stats = R.calibration_stats(generate_synthetic_session(cfg, args.subject, 0))
    commands = R.read_command_script(args.commands) if args.commands else []
    try:
        pcfg = R.PipelineConfig(models=models, step_samples=args.step,
                                inference_rate_hz=args.rate_hz, stats=stats,
                                sample_rate_hz=source.sample_rate_hz)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    with open(out / "frames.bin", "wb") as sink:
        session = R.Session(pcfg, source, sink=sink)
        slog = session.run(commands)
    slog.write_jsonl(out / "session.jsonl")
    lat = R.measure_pipeline_latency(slog)
    report = lat.to_json()
    report["inference_events"] = len(slog.inferences)
    report["wall_seconds"] = slog.wall_seconds
    report["paced"] = bool(source.realtime)
    if source.recording.annotations:
        acc = R.online_accuracy(slog, source.recording)
        report["online_accuracy"] = None if np.isnan(acc) else acc  # no labelled window
    report["violations"] = slog.violations
    (out / "latency.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    arts = [out / "session.jsonl", out / "latency.json", out / "frames.bin"]
    write_manifest(out, "run", args, arts, started)
    print(json.dumps({k: v for k, v in report.items() if k != "violations"}, sort_keys=True))
    if slog.violations:
        for v in slog.violations:
            print(f"invariant violation: {v}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


# -- report ---------------------------------------------------------------------------

def _svg_scatter(points, xlabel, ylabel, title, highlight=()):
    """Deterministic SVG scatter; ``points`` are (x, y) pairs."""
    W, H, M = 480, 360, 50
    xs = [p[0] for p in points] or [0.0]
    ys = [p[1] for p in points] or [0.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(v):
        return M + (v - x0) / (x1 - x0) * (W - 2 * M)

    def sy(v):
        return H - M - (v - y0) / (y1 - y0) * (H - 2 * M)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{M}" y1="{H - M}" x2="{W - M}" y2="{H - M}" stroke="black"/>',
        f'<line x1="{M}" y1="{M}" x2="{M}" y2="{H - M}" stroke="black"/>',
        f'<text x="{W / 2:.1f}" y="{H - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{H / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {H / 2:.1f})">{ylabel}</text>',
        f'<text x="{M}" y="{H - M + 16}" font-size="10">{x0:.4g}</text>',
        f'<text x="{W - M}" y="{H - M + 16}" text-anchor="end" font-size="10">{x1:.4g}</text>',
        f'<text x="{M - 4}" y="{H - M}" text-anchor="end" font-size="10">{y0:.4g}</text>',
        f'<text x="{M - 4}" y="{M + 4}" text-anchor="end" font-size="10">{y1:.4g}</text>',
    ]
    hl = set(highlight)
    for i, (x, y) in enumerate(points):
        color = "crimson" if i in hl else "steelblue"
        lines.append(f'<circle class="marker" cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="4" '
                     f'fill="{color}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def report_candidates(path, out: Path, stem: str) -> list:
    from .evosearch import pareto_front, read_candidates_csv
    cands = read_candidates_csv(path)
    if not cands:
        raise ConfigurationError(f"{path} has no candidates")
    front = pareto_front(cands)
    ids = {id(c) for c in front}
    rows = [{"config": json.dumps(c.config.to_json(), sort_keys=True),
             "accuracy": repr(c.accuracy), "params": c.params,
             "front": int(id(c) in ids)} for c in cands]
    csv_path = out / f"{stem}_pareto.csv"
    _write_csv(csv_path, ("config", "accuracy", "params", "front"), rows)
    svg_path = out / f"{stem}_pareto.svg"
    svg_path.write_text(_svg_scatter([(c.params, c.accuracy) for c in cands],
                                     "parameters", "accuracy", "Pareto front",
                                     [i for i, c in enumerate(cands) if id(c) in ids]))
    return [csv_path, svg_path]


def report_variants(path, out: Path, stem: str) -> list:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ConfigurationError(f"{path} has no rows")
    keep = ("variant", "accuracy", "median_latency_s", "params", "nonzero_params")
    csv_path = out / f"{stem}_accuracy_latency.csv"
    _write_csv(csv_path, keep, [{k: r.get(k, "") for k in keep} for r in rows])
    svg_path = out / f"{stem}_accuracy_latency.svg"
    svg_path.write_text(_svg_scatter(
        [(float(r["median_latency_s"]), float(r["accuracy"])) for r in rows],
        "median latency (s)", "accuracy", "Accuracy vs latency"))
    return [csv_path, svg_path]


def report_filters(out: Path, fs: float = 125.0) -> list:
    bp = dsp.design_bandpass(dsp.BandpassSpec(sample_rate_hz=fs))
    notch = dsp.design_notch(dsp.NotchSpec(sample_rate_hz=fs))
    chain = bp.then(notch)
    freqs = np.round(np.arange(0.0, fs / 2 + 1e-9, 0.25), 6)
    mags = [np.abs(dsp.frequency_response(s, freqs, fs)) for s in (bp, notch, chain)]
    rows = [{"freq_hz": f"{f:g}", "bandpass": f"{a:.9g}", "notch": f"{b:.9g}",
             "chain": f"{c:.9g}"} for f, a, b, c in zip(freqs, *mags)]
    path = out / "filter_response.csv"
    _write_csv(path, ("freq_hz", "bandpass", "notch", "chain"), rows)
    return [path]


def cmd_report(args) -> int:
    started = time.time()
    if not args.inputs:
        raise ConfigurationError("no inputs; usage: carm report --in FILE.csv [FILE.csv ...] "
                                 "--out DIR (search history/front or compress report CSVs)")
    out = _out_dir(args.out)
    arts = []
    for p in args.inputs:
        p = Path(p)
        if not p.is_file():
            raise ConfigurationError(f"input {p} does not exist")
        with open(p, newline="") as f:
            header = next(csv.reader(f), [])
        if not header:
            raise ConfigurationError(f"{p} is empty; expected a search or compress CSV")
        if {"config", "accuracy", "params"} <= set(header):
            arts += report_candidates(p, out, p.stem)
        elif {"variant", "accuracy", "median_latency_s"} <= set(header):
            arts += report_variants(p, out, p.stem)
        else:
            raise ConfigurationError(f"{p}: unrecognised columns {header}")
    arts += report_filters(out)
    write_manifest(out, "report", args, arts, started)
    for a in arts:
        print(a)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    seed = default_seed()
    p = argparse.ArgumentParser(prog="carm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic EEG sessions")
    s.add_argument("--subjects", type=int, default=5)
    s.add_argument("--sessions", type=int, default=3)
    s.add_argument("--minutes", type=float, default=5.0)
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("search", help="evolutionary model search over LOSO data")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--pop", type=int, default=20)
    s.add_argument("--gens", type=int, default=10)
    s.add_argument("--alpha", type=float, default=0.85)
    s.add_argument("--wa", type=float, default=0.7)
    s.add_argument("--wp", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--families", default="CNN,LSTM,Transformer,RandomForest")
    s.add_argument("--epochs", type=int, default=3, help="training epochs per candidate")
    s.add_argument("--final-epochs", type=int, default=10)
    s.add_argument("--max-train", type=int, default=1500,
                   help="training windows per candidate (subsampled)")
    s.add_argument("--held-out", type=int, default=None)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("compress", help="prune or quantise a model and benchmark it")
    s.add_argument("--model", type=Path, required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--prune", type=float)
    g.add_argument("--quant", choices=["int8"])
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--held-out", type=int, default=None)
    s.add_argument("--repeats", type=int, default=100)
    s.add_argument("--finetune-epochs", type=int, default=0,
                   help="masked retraining epochs after pruning (0 = prune only)")
    s.add_argument("--seed", type=int, default=seed)
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("run", help="closed-loop streaming session")
    s.add_argument("--model", type=Path, nargs="+", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--replay", type=Path)
    g.add_argument("--live", action="store_true")
    s.add_argument("--realtime", action="store_true")
    s.add_argument("--commands", type=Path)
    s.add_argument("--rate-hz", type=float, default=None)
    s.add_argument("--step", type=int, default=DEFAULT_STEP)
    s.add_argument("--seconds", type=float, default=60.0, help="live source duration")
    s.add_argument("--subject", type=int, default=1, help="live synthetic subject")
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="CSV/SVG plot data from search or compress outputs")
    s.add_argument("--in", dest="inputs", type=Path, nargs="*", default=[])
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        parser = build_parser()
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, RecordingFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
