"""Streaming loop: source -> causal filter -> ring buffer -> classifier -> arm.

A producer thread emits frames into a bounded queue; the consumer (the calling
thread) owns the filter state, the buffer, the model and the arm controller.
Commands arrive on a separate queue and are applied between inferences.
"""
from __future__ import annotations

import heapq
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .armctl import COMMAND_WORDS, ArmController, ArmState, encode_frame
from .compress import latency_report
from .dataset import ChannelStats
from .eeg import ActionLabel, EegRecording, SynthConfig, generate_synthetic_session
from .models.artifact import load_any
from .models.training import Ensemble

log = logging.getLogger(__name__)

_END = None


class PipelineError(RuntimeError):
    pass


# -- buffer and sources --------------------------------------------------------------

class RingBuffer:
    """Per-channel circular storage of the most recent ``capacity`` samples."""

    def __init__(self, capacity: int, n_channels: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.n_channels = n_channels
        self._data = np.zeros((capacity, n_channels))
        self.cursor = 0  # total samples written

    def __len__(self) -> int:
        return min(self.cursor, self.capacity)

    def write(self, block) -> None:
        block = np.asarray(block, dtype=np.float64).reshape(-1, self.n_channels)
        n = len(block)
        if n >= self.capacity:
            block = block[n - self.capacity:]
            self.cursor += n - self.capacity
            n = self.capacity
        start = self.cursor % self.capacity
        first = min(n, self.capacity - start)
        self._data[start:start + first] = block[:first]
        self._data[:n - first] = block[first:]
        self.cursor += n

    def trailing(self, w: int) -> np.ndarray:
        """Copy of the last ``w`` samples as ``(channels, w)``."""
        if w > len(self):
            raise ValueError(f"buffer holds {len(self)} samples, {w} requested")
        idx = (self.cursor - w + np.arange(w)) % self.capacity
        return self._data[idx].T.copy()


@dataclass
class StreamSource:
    """Replay of a recording, or a synthetic session generated for the run."""

    kind: str
    recording: EegRecording | None = None
    synth: SynthConfig | None = None
    realtime: bool = False
    subject: int = 1
    session: int = 1
    seconds: float | None = None
    block_size: int = 1

    def __post_init__(self):
        if self.kind not in ("replay", "synthetic"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.kind == "replay" and self.recording is None:
            raise ValueError("replay source needs a recording")
        if self.kind == "synthetic":
            self.synth = self.synth or SynthConfig()
            if self.seconds is not None:
                self.synth = SynthConfig(**{**self.synth.__dict__,
                                            "session_minutes": self.seconds / 60.0})
            self.recording = generate_synthetic_session(self.synth, self.subject, self.session)

    @classmethod
    def replay(cls, recording, realtime=False) -> StreamSource:
        return cls("replay", recording=recording, realtime=realtime)

    @classmethod
    def synthetic(cls, cfg: SynthConfig | None = None, seconds=None, realtime=True,
                  subject=1, session=1) -> StreamSource:
        return cls("synthetic", synth=cfg, realtime=realtime, seconds=seconds,
                   subject=subject, session=session)

    @property
    def sample_rate_hz(self) -> float:
        return self.recording.sample_rate_hz

    @property
    def n_channels(self) -> int:
        return self.recording.montage.n_channels

    def __len__(self) -> int:
        return len(self.recording)

    def blocks(self):
        """Yield ``(start_index, block)``; paced at 1/fs per frame when realtime."""
        data = self.recording.data
        fs = self.sample_rate_hz
        t0 = time.perf_counter()
        for i in range(0, len(data), self.block_size):
            if self.realtime:
                delay = t0 + (i + self.block_size) / fs - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            yield i, data[i:i + self.block_size]


# -- configuration and events ----------------------------------------------------------

@dataclass
class PipelineConfig:
    model_paths: tuple = ()
    window_samples: int | None = None
    step_samples: int = 25
    inference_rate_hz: float | None = None
    sample_rate_hz: float = 125.0
    chain: dsp.SecondOrderSections | None = None
    stats: ChannelStats | None = None
    vocabulary: tuple = COMMAND_WORDS
    queue_capacity: int = 1250
    initial_state: ArmState = field(default_factory=ArmState)
    models: list = field(default_factory=list)  # preloaded models take precedence

    def __post_init__(self):
        if self.step_samples < 1:
            raise ValueError("step_samples must be >= 1")
        if self.inference_rate_hz is not None and self.inference_rate_hz <= 0:
            raise ValueError("inference_rate_hz must be positive")

    @property
    def effective_step(self) -> int:
        if self.inference_rate_hz is None:
            return self.step_samples
        return max(1, int(round(self.sample_rate_hz / self.inference_rate_hz)))

    def load_classifier(self):
        models = list(self.models) or [load_any(p) for p in self.model_paths]
        if not models:
            raise PipelineError("no model given")
        clf = models[0] if len(models) == 1 else Ensemble(models)
        if self.window_samples is not None and self.window_samples != clf.window_samples:
            raise PipelineError(f"window {self.window_samples} does not match model window "
                                f"{clf.window_samples}")
        return clf


@dataclass(frozen=True)
class InferenceEvent:
    at_sample: int
    label: ActionLabel
    probabilities: tuple
    latency_seconds: float


@dataclass(frozen=True)
class CommandEvent:
    at_sample: int
    text: str


@dataclass
class SessionLog:
    records: list = field(default_factory=list)
    inferences: list = field(default_factory=list)
    dropped_windows: int = 0
    dropped_frames: int = 0
    violations: list = field(default_factory=list)
    step_samples: int = 25
    window_samples: int = 0
    sample_rate_hz: float = 125.0
    n_samples: int = 0
    wall_seconds: float = 0.0

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(e.label) for e in self.inferences], dtype=np.int64)

    def of_type(self, kind: str) -> list:
        return [r for r in self.records if r["type"] == kind]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")


def read_command_script(path) -> list:
    """Parse ``<at_sample> <word>`` lines; blank lines and ``#`` comments are skipped."""
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{n}: expected '<at_sample> <word>', got {line!r}")
        try:
            at = int(parts[0])
        except ValueError:
            raise ValueError(f"{path}:{n}: bad sample index {parts[0]!r}") from None
        if at < 0:
            raise ValueError(f"{path}:{n}: negative sample index")
        out.append(CommandEvent(at, parts[1]))
    return out


def calibration_stats(recording: EegRecording, chain=None, clean_threshold_uv=100.0):
    """Label-free per-channel stats of the filtered (and cleaned) recording."""
    chain = chain or dsp.default_chain(recording.sample_rate_hz)
    rec = dsp.filter_recording(recording, chain)
    if clean_threshold_uv is not None:
        rec, _ = dsp.clean_artifacts(rec, clean_threshold_uv)
    return ChannelStats.of_samples(rec.data)


# -- the session ---------------------------------------------------------------------

class Session:
    def __init__(self, cfg: PipelineConfig, source: StreamSource, controller=None, sink=None):
        self.cfg = cfg
        self.source = source
        if abs(source.sample_rate_hz - cfg.sample_rate_hz) > 1e-9:
            cfg.sample_rate_hz = source.sample_rate_hz
        self.classifier = cfg.load_classifier()
        if self.classifier.n_channels != source.n_channels:
            raise PipelineError(f"model expects {self.classifier.n_channels} channels, "
                                f"source has {source.n_channels}")
        self.window = self.classifier.window_samples
        self.step = cfg.effective_step
        self.chain = cfg.chain or dsp.default_chain(source.sample_rate_hz)
        self.filter = dsp.StreamingFilter(self.chain, source.n_channels)
        self.buffer = RingBuffer(max(self.window, 2 * self.step, 256), source.n_channels)
        self.controller = controller or ArmController(state=cfg.initial_state, sink=sink)
        self.commands: queue.Queue = queue.Queue()
        self.log = SessionLog(step_samples=self.step, window_samples=self.window,
                              sample_rate_hz=source.sample_rate_hz, n_samples=len(source))
        self._pending: list = []
        self._seq = 0
        self._t0 = time.perf_counter()
        self._last_sample = -1

    def _record(self, kind, at_sample, **fields):
        r = {"type": kind, "at_sample": int(at_sample),
             "wall_time": round(time.perf_counter() - self._t0, 6)}
        r.update(fields)
        if at_sample < self._last_sample:
            self.log.violations.append(f"{kind} at {at_sample} after {self._last_sample}")
        self._last_sample = max(self._last_sample, at_sample)
        self.log.records.append(r)
        return r

    def inject(self, text: str, at_sample: int) -> bool:
        word = str(text).strip().lower()
        if word not in self.cfg.vocabulary:
            log.warning("rejected unknown command %r at sample %d", text, at_sample)
            self.log.records.append({"type": "warning", "at_sample": int(at_sample),
                                     "message": f"unknown command {text!r}"})
            return False
        self.commands.put(CommandEvent(int(at_sample), word))
        return True

    def _apply_commands(self, upto: int):
        while True:
            try:
                c = self.commands.get_nowait()
            except queue.Empty:
                break
            heapq.heappush(self._pending, (c.at_sample, self._seq, c))
            self._seq += 1
        while self._pending and self._pending[0][0] <= upto:
            _, _, c = heapq.heappop(self._pending)
            # A command takes effect at the first inference at or after its sample.
            at = max(c.at_sample, self._last_sample)
            accepted, frame = self.controller.command(c.text)
            self._record("command", at, text=c.text, requested_at=c.at_sample,
                         mode=self.controller.state.mode.name,
                         enabled=self.controller.enabled)
            if frame is not None:
                self._servo_record(at, frame)

    def _servo_record(self, at, frame):
        self._record("servo", at, frame=encode_frame(frame).hex(), **frame.describe())

    def _producer(self, q, stop):
        try:
            for start, block in self.source.blocks():
                if stop.is_set():
                    return
                if self.source.realtime:
                    try:
                        q.put((start, block), timeout=1.0)
                    except queue.Full:
                        self.log.dropped_frames += len(block)
                else:
                    q.put((start, block))  # blocks: backpressure
        finally:
            q.put(_END)

    def _infer(self, n_seen, filter_time):
        t0 = time.perf_counter()
        window = self.buffer.trailing(self.window)
        if n_seen > self.buffer.cursor:
            self.log.violations.append(f"window end {n_seen} beyond cursor {self.buffer.cursor}")
        p = np.asarray(self.classifier.predict_proba(window), dtype=np.float64)
        label = ActionLabel(int(np.argmax(p)))
        latency = filter_time + time.perf_counter() - t0
        ev = InferenceEvent(n_seen, label, tuple(float(v) for v in p), latency)
        self.log.inferences.append(ev)
        self._record("inference", n_seen, label=label.name,
                     probabilities=[round(v, 6) for v in ev.probabilities],
                     latency_s=latency)
        frame = self.controller.act(label, p)
        if frame is not None:
            self._servo_record(n_seen, frame)
        self.controller.tick(self.step / self.source.sample_rate_hz)
        if not self.controller.within_limits():
            self.log.violations.append(f"arm outside limits at sample {n_seen}")

    def run(self, commands=()):
        for c in commands:
            self.inject(c.text, c.at_sample)
        q: queue.Queue = queue.Queue(maxsize=self.cfg.queue_capacity)
        stop = threading.Event()
        producer = threading.Thread(target=self._producer, args=(q, stop), daemon=True)
        self._t0 = time.perf_counter()
        self._record("start", 0, mode=self.controller.state.mode.name,
                     window=self.window, step=self.step,
                     realtime=bool(self.source.realtime))
        producer.start()
        stats = self.cfg.stats
        n_seen = 0
        next_at = self.window
        filter_time = 0.0
        try:
            while True:
                item = q.get()
                if item is _END:
                    break
                start, block = item
                if start != n_seen:
                    self.log.violations.append(f"frame {start} arrived, expected {n_seen}")
                t0 = time.perf_counter()
                y = self.filter.process(block)
                if stats is not None:
                    y = stats.apply(y)
                self.buffer.write(y)
                filter_time += time.perf_counter() - t0
                n_seen += len(block)
                while n_seen >= next_at:
                    # blocks larger than one step are handled window by window
                    if n_seen > next_at:
                        raise PipelineError("source blocks must not straddle inference points")
                    self._apply_commands(next_at)
                    if self.source.realtime and q.qsize() * max(1, self.source.block_size) \
                            >= self.step:
                        self.log.dropped_windows += 1
                        self._record("drop", next_at, backlog=q.qsize())
                    else:
                        self._infer(next_at, filter_time)
                    filter_time = 0.0
                    next_at += self.step
        finally:
            stop.set()
            producer.join(timeout=5.0)
        self._apply_commands(n_seen)
        self.log.wall_seconds = time.perf_counter() - self._t0
        self._record("end", n_seen, dropped_windows=self.log.dropped_windows,
                     dropped_frames=self.log.dropped_frames,
                     violations=list(self.log.violations),
                     wall_seconds=round(self.log.wall_seconds, 6))
        return self.log


def run_session(cfg: PipelineConfig, source: StreamSource, commands=(), sink=None) -> SessionLog:
    return Session(cfg, source, sink=sink).run(commands)


def inject_command(session: Session, text: str, at_sample: int) -> bool:
    return session.inject(text, at_sample)


@dataclass(frozen=True)
class PipelineLatency:
    n: int
    median: float
    p95: float
    max: float
    dropped_windows: int
    dropped_frames: int
    budget_seconds: float

    @property
    def meets_budget(self) -> bool:
        """p95 latency below one step period and no window dropped."""
        return self.n > 0 and self.p95 < self.budget_seconds and self.dropped_windows == 0

    def to_json(self) -> dict:
        return {"n": self.n, "median_s": self.median, "p95_s": self.p95, "max_s": self.max,
                "dropped_windows": self.dropped_windows, "dropped_frames": self.dropped_frames,
                "budget_s": self.budget_seconds, "meets_budget": self.meets_budget}


def measure_pipeline_latency(session_log: SessionLog) -> PipelineLatency:
    lat = [e.latency_seconds for e in session_log.inferences]
    rep = latency_report(lat)
    return PipelineLatency(len(lat), rep.median, rep.p95, float(max(lat)) if lat else float("nan"),
                           session_log.dropped_windows, session_log.dropped_frames,
                           session_log.step_samples / session_log.sample_rate_hz)


# -- offline reference ------------------------------------------------------------------

def offline_labels(classifier, recording: EegRecording, step: int, chain=None, stats=None):
    """Filter the whole recording, normalise, cut every ``step`` samples, classify."""
    chain = chain or dsp.default_chain(recording.sample_rate_hz)
    y = dsp.filter_batch(chain, recording.data)
    if stats is not None:
        y = stats.apply(y)
    w = classifier.window_samples
    if len(y) < w:
        return np.zeros(0, dtype=np.int64)
    view = np.lib.stride_tricks.sliding_window_view(y, w, axis=0)[::step]
    return np.argmax(classifier.predict_proba(np.ascontiguousarray(view)), axis=1)


def window_truth(recording: EegRecording, ends, window: int) -> np.ndarray:
    """Label of each window ``[end - window, end)`` that lies inside one annotation, else -1."""
    out = np.full(len(ends), -1, dtype=np.int64)
    for i, e in enumerate(ends):
        s = e - window
        for a in recording.annotations:
            if a.start_sample <= s and e <= a.end_sample:
                out[i] = int(a.label)
                break
    return out


def online_accuracy(session_log: SessionLog, recording: EegRecording) -> float:
    ends = [e.at_sample for e in session_log.inferences]
    truth = window_truth(recording, ends, session_log.window_samples)
    mask = truth >= 0
    if not mask.any():
        return float("nan")
    return float(np.mean(session_log.labels[mask] == truth[mask]))
