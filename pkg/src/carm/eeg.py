"""EEG data substrate: montage, recordings, synthetic sessions and the CSV+JSON file format."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_CHANNELS = (
    "FP1", "FP2", "F7", "F3", "Fz", "F4", "F8", "T3",
    "C3", "Cz", "C4", "T4", "P3", "Pz", "P4", "O1",
)

# Background rhythm amplitudes (µV) shared by every channel before class modulation.
ALPHA_BASE_UV = 4.0
BETA_BASE_UV = 3.0
BLINK_SECONDS = 0.3
# Simulated reaction time between cue and onset of the class signature.
ONSET_DELAY_S = (0.15, 0.45)


class ActionLabel(enum.IntEnum):
    Left = 0
    Right = 1
    Idle = 2


class RecordingFormatError(ValueError):
    """Raised when a recording file cannot be parsed; names the offending line or field."""

    def __init__(self, path, where, message):
        self.path = str(path)
        self.where = where
        super().__init__(f"{path}: {where}: {message}")


@dataclass(frozen=True)
class Montage:
    channel_names: tuple = DEFAULT_CHANNELS
    sample_rate_hz: float = 125.0

    def __post_init__(self):
        names = tuple(self.channel_names)
        object.__setattr__(self, "channel_names", names)
        if len(names) < 1:
            raise ValueError("montage needs at least one channel")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate channel names in {names}")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    def index(self, name: str) -> int:
        return self.channel_names.index(name)


@dataclass(frozen=True)
class EegFrame:
    index: int
    samples: np.ndarray

    def timestamp(self, sample_rate_hz: float) -> float:
        return self.index / sample_rate_hz


@dataclass(frozen=True)
class Annotation:
    start_sample: int
    end_sample: int
    label: ActionLabel
    subject_id: int = 0
    session_id: int = 0

    @property
    def length(self) -> int:
        return self.end_sample - self.start_sample

    def to_json(self) -> dict:
        return {
            "start_sample": self.start_sample,
            "end_sample": self.end_sample,
            "label": self.label.name,
            "subject_id": self.subject_id,
            "session_id": self.session_id,
        }


@dataclass(frozen=True, eq=False)
class EegRecording:
    """Multi-channel recording.

    Frames are stored as one ``(n_samples, n_channels)`` float64 array; frame ``i``
    is row ``i`` so indices are contiguous from 0 by construction.
    """

    montage: Montage
    data: np.ndarray
    annotations: tuple = ()

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != self.montage.n_channels:
            raise ValueError(
                f"data shape {data.shape} does not match {self.montage.n_channels} channels"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        anns = tuple(self.annotations)
        object.__setattr__(self, "annotations", anns)
        _check_annotations(anns, len(data))

    def __len__(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EegRecording):
            return NotImplemented
        return (
            self.montage == other.montage
            and self.annotations == other.annotations
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    @property
    def sample_rate_hz(self) -> float:
        return self.montage.sample_rate_hz

    def frames(self):
        for i, row in enumerate(self.data):
            yield EegFrame(i, row)

    def frame(self, i: int) -> EegFrame:
        return EegFrame(i, self.data[i])

    def with_data(self, data) -> EegRecording:
        return EegRecording(self.montage, data, self.annotations)

    def channel(self, name: str) -> np.ndarray:
        return self.data[:, self.montage.index(name)]


def _check_annotations(anns, n_samples):
    prev_end = 0
    for i, a in enumerate(anns):
        if not 0 <= a.start_sample < a.end_sample:
            raise ValueError(f"annotation {i}: empty or negative span {a.start_sample}..{a.end_sample}")
        if a.end_sample > n_samples:
            raise ValueError(
                f"annotation {i}: end_sample {a.end_sample} exceeds recording length {n_samples}"
            )
        if a.start_sample < prev_end:
            raise ValueError(f"annotation {i}: overlaps or is out of order")
        prev_end = a.end_sample


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    task_seconds: float = 10.0
    idle_seconds: float = 10.0
    session_minutes: float = 5.0
    pink_noise_uv: float = 10.0
    line_noise_uv: float = 5.0
    motor_band_hz: float = 20.0
    alpha_hz: float = 10.0
    lateral_gain: float = 2.0
    blink_rate_per_min: float = 4.0
    blink_amp_uv: float = 80.0
    sample_rate_hz: float = 125.0

    def __post_init__(self):
        for name in ("task_seconds", "idle_seconds", "session_minutes", "sample_rate_hz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("pink_noise_uv", "line_noise_uv", "blink_rate_per_min", "blink_amp_uv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.lateral_gain > 1:
            raise ValueError("lateral_gain must be > 1")


def pink_noise(rng: np.random.Generator, n: int, n_rows: int = 12) -> np.ndarray:
    """Unit-variance 1/f noise by Voss-McCartney summation of octave-held white sources."""
    out = rng.standard_normal(n)
    for k in range(1, n_rows):
        hold = 2 ** k
        offset = int(rng.integers(hold))
        vals = rng.standard_normal((n + offset) // hold + 1)
        out += np.repeat(vals, hold)[offset:offset + n]
    return out / math.sqrt(n_rows)


def _raised_cosine(n: int) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / (n - 1)))


def _segment_plan(cfg: SynthConfig, n_total: int):
    fs = cfg.sample_rate_hz
    task_n = int(round(cfg.task_seconds * fs))
    idle_n = int(round(cfg.idle_seconds * fs))
    plan = []
    pos = 0
    task_cycle = (ActionLabel.Right, ActionLabel.Left)
    k = 0
    while True:
        label = task_cycle[(k // 2) % 2] if k % 2 == 0 else ActionLabel.Idle
        n = task_n if k % 2 == 0 else idle_n
        if pos + n > n_total:
            break
        plan.append((pos, pos + n, label))
        pos += n
        k += 1
    return plan


def generate_synthetic_session(cfg: SynthConfig, subject: int, session: int,
                               montage: Montage | None = None) -> EegRecording:
    """Deterministic motor-imagery session: Right/Idle/Left/Idle task blocks.

    Left raises beta and suppresses alpha on C4, Right does the same on C3,
    Idle raises occipital alpha. Every channel carries pink noise and mains hum;
    FP1/FP2 carry blink transients.
    """
    montage = montage or Montage(DEFAULT_CHANNELS, cfg.sample_rate_hz)
    fs = montage.sample_rate_hz
    n = int(round(cfg.session_minutes * 60.0 * fs))
    n_ch = montage.n_channels
    rng = np.random.default_rng([cfg.seed, subject, session])
    # subject-level traits are shared across that subject's sessions
    srng = np.random.default_rng([cfg.seed, subject, 10_000])
    subj_scale = srng.uniform(0.7, 1.4)
    ch_gain = srng.uniform(0.8, 1.2, n_ch)
    ch_offset = srng.uniform(-20.0, 20.0, n_ch)
    alpha_f = cfg.alpha_hz + srng.uniform(-0.7, 0.7)
    beta_f = cfg.motor_band_hz + srng.uniform(-1.5, 1.5)

    t = np.arange(n) / fs
    data = np.empty((n, n_ch))
    for c in range(n_ch):
        data[:, c] = cfg.pink_noise_uv * pink_noise(rng, n)
    data += cfg.line_noise_uv * np.sin(2 * np.pi * 50.0 * t + rng.uniform(0, 2 * np.pi))[:, None]

    alpha_amp = np.full((n, n_ch), ALPHA_BASE_UV)
    beta_amp = np.full((n, n_ch), BETA_BASE_UV)
    g = cfg.lateral_gain
    names = montage.channel_names
    occipital = [names.index(c) for c in ("O1", "O2", "Pz") if c in names]
    plan = _segment_plan(cfg, n)
    annotations = []
    for start, end, label in plan:
        onset = start + int(rng.uniform(*ONSET_DELAY_S) * fs)
        if label is ActionLabel.Idle:
            alpha_amp[onset:end, occipital] *= 2.0 * g
        else:
            side = "C4" if label is ActionLabel.Left else "C3"
            if side in names:
                ci = names.index(side)
                beta_amp[onset:end, ci] *= g
                alpha_amp[onset:end, ci] /= g
        annotations.append(Annotation(start, end, label, subject, session))

    # slow random envelope so band power varies window to window
    env = 1.0 + 0.2 * np.tanh(pink_noise(rng, n, n_rows=10))
    alpha_phase = 2 * np.pi * alpha_f * t[:, None] + rng.uniform(0, 2 * np.pi, n_ch)[None, :]
    beta_phase = 2 * np.pi * beta_f * t[:, None] + rng.uniform(0, 2 * np.pi, n_ch)[None, :]
    data += env[:, None] * (alpha_amp * np.sin(alpha_phase) + beta_amp * np.sin(beta_phase))

    if cfg.blink_rate_per_min > 0 and cfg.blink_amp_uv > 0:
        blink_n = int(round(BLINK_SECONDS * fs))
        pulse = cfg.blink_amp_uv * _raised_cosine(blink_n)
        n_blinks = rng.poisson(cfg.blink_rate_per_min * n / fs / 60.0)
        frontal = [names.index(c) for c in ("FP1", "FP2") if c in names]
        for s in np.sort(rng.integers(0, max(n - blink_n, 1), n_blinks)):
            data[s:s + blink_n, frontal] += pulse[:, None]

    data = subj_scale * ch_gain[None, :] * data + ch_offset[None, :]
    return EegRecording(montage, data, tuple(annotations))


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name[:-4] + ".meta.json") if path.name.endswith(".csv") \
        else path.with_name(path.name + ".meta.json")


def save_recording(rec: EegRecording, path) -> None:
    """Write ``<name>.csv`` plus ``<name>.meta.json``; floats use repr so reload is exact."""
    path = Path(path)
    header = "index," + ",".join(rec.montage.channel_names)
    lines = [header]
    for i, row in enumerate(rec.data):
        lines.append(f"{i}," + ",".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")
    meta = {
        "montage": list(rec.montage.channel_names),
        "sample_rate_hz": rec.montage.sample_rate_hz,
        "n_samples": len(rec),
        "annotations": [a.to_json() for a in rec.annotations],
    }
    _meta_path(path).write_text(json.dumps(meta, indent=1) + "\n")


def load_recording(path) -> EegRecording:
    path = Path(path)
    meta_file = _meta_path(path)
    try:
        meta = json.loads(meta_file.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise RecordingFormatError(meta_file, "meta", str(exc)) from exc
    for key in ("montage", "sample_rate_hz", "annotations"):
        if key not in meta:
            raise RecordingFormatError(meta_file, key, "missing field")
    try:
        montage = Montage(tuple(meta["montage"]), float(meta["sample_rate_hz"]))
    except (TypeError, ValueError) as exc:
        raise RecordingFormatError(meta_file, "montage", str(exc)) from exc

    with path.open() as fh:
        header = fh.readline().rstrip("\n").split(",")
        if not header or header[0] != "index":
            raise RecordingFormatError(path, "line 1", "header must start with 'index'")
        if tuple(header[1:]) != montage.channel_names:
            raise RecordingFormatError(
                path, "line 1",
                f"channel-count/name mismatch: header has {len(header) - 1} channels, "
                f"montage has {montage.n_channels}",
            )
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != montage.n_channels + 1:
                raise RecordingFormatError(
                    path, f"line {lineno}",
                    f"channel-count mismatch: {len(parts) - 1} sample columns, expected "
                    f"{montage.n_channels}",
                )
            try:
                idx = int(parts[0])
                vals = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise RecordingFormatError(path, f"line {lineno}", str(exc)) from exc
            if idx != len(rows):
                raise RecordingFormatError(path, f"line {lineno}", f"non-contiguous index {idx}")
            rows.append(vals)
    data = np.array(rows, dtype=np.float64).reshape(-1, montage.n_channels)

    anns = []
    prev_end = 0
    for i, a in enumerate(meta["annotations"]):
        where = f"annotations[{i}]"
        try:
            ann = Annotation(int(a["start_sample"]), int(a["end_sample"]),
                             ActionLabel[a["label"]], int(a["subject_id"]), int(a["session_id"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordingFormatError(meta_file, where, f"bad annotation: {exc}") from exc
        if ann.start_sample < prev_end:
            raise RecordingFormatError(meta_file, where, "non-monotonic annotation")
        if not 0 <= ann.start_sample < ann.end_sample:
            raise RecordingFormatError(meta_file, where, "empty annotation span")
        if ann.end_sample > len(data):
            raise RecordingFormatError(
                meta_file, where,
                f"bounds error: end_sample {ann.end_sample} > frame count {len(data)}",
            )
        prev_end = ann.end_sample
        anns.append(ann)
    return EegRecording(montage, data, tuple(anns))
