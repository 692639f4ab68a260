"""Windowing, per-subject normalisation, balancing, splits and summary statistics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from . import dsp
from .eeg import ActionLabel, EegRecording


@dataclass(frozen=True)
class SegmentationSpec:
    window_samples: int = 190
    step_samples: int = 25
    transition_trim_samples: int = 63

    def __post_init__(self):
        if self.window_samples < 1:
            raise ValueError("window_samples must be positive")
        if not 0 < self.step_samples <= self.window_samples:
            raise ValueError("need 0 < step <= window")
        if self.transition_trim_samples < 0:
            raise ValueError("trim must be >= 0")


def window_count(length: int, window: int, step: int, trim: int = 0) -> int:
    usable = length - trim
    return 0 if usable < window else (usable - window) // step + 1


@dataclass(frozen=True)
class LabeledWindow:
    data: np.ndarray  # channels x samples
    label: ActionLabel
    subject_id: int
    session_id: int
    origin_sample: int

    @property
    def key(self):
        return (self.subject_id, self.session_id, self.origin_sample)


class WindowSet:
    """Columnar set of equally sized windows: ``data`` is ``(n, channels, samples)``."""

    def __init__(self, data, labels, subjects, sessions, origins):
        self.data = np.asarray(data)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.subjects = np.asarray(subjects, dtype=np.int64)
        self.sessions = np.asarray(sessions, dtype=np.int64)
        self.origins = np.asarray(origins, dtype=np.int64)
        n = len(self.labels)
        if self.data.ndim != 3 or len(self.data) != n:
            raise ValueError(f"data shape {self.data.shape} inconsistent with {n} labels")
        if not len(self.subjects) == len(self.sessions) == len(self.origins) == n:
            raise ValueError("metadata columns differ in length")

    @classmethod
    def empty(cls, n_channels: int, window: int) -> WindowSet:
        return cls(np.zeros((0, n_channels, window), np.float32), [], [], [], [])

    @classmethod
    def concat(cls, sets) -> WindowSet:
        sets = list(sets)
        if not sets:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([s.data for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.subjects for s in sets]),
            np.concatenate([s.sessions for s in sets]),
            np.concatenate([s.origins for s in sets]),
        )

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return LabeledWindow(self.data[i], ActionLabel(int(self.labels[i])),
                                 int(self.subjects[i]), int(self.sessions[i]), int(self.origins[i]))
        return self.subset(i)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> WindowSet:
        return WindowSet(self.data[idx], self.labels[idx], self.subjects[idx],
                         self.sessions[idx], self.origins[idx])

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def window_samples(self) -> int:
        return self.data.shape[2]

    def keys(self) -> set:
        return set(zip(self.subjects.tolist(), self.sessions.tolist(), self.origins.tolist()))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(ActionLabel))

    def trailing(self, window: int) -> WindowSet:
        """Same windows cut to their last ``window`` samples."""
        if window > self.window_samples:
            raise ValueError(f"cannot cut {self.window_samples}-sample windows to {window}")
        return WindowSet(self.data[:, :, self.window_samples - window:], self.labels,
                         self.subjects, self.sessions, self.origins + self.window_samples - window)


@dataclass
class DatasetSplit:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    held_out_subject: int | None = None

    def check_disjoint(self) -> None:
        a, b, c = self.train.keys(), self.val.keys(), self.test.keys()
        if a & b or a & c or b & c:
            raise AssertionError("split sets overlap")
        if self.held_out_subject is not None:
            if set(self.test.subjects.tolist()) - {self.held_out_subject}:
                raise AssertionError("test set contains other subjects")
            h = self.held_out_subject
            if (self.train.subjects == h).any() or (self.val.subjects == h).any():
                raise AssertionError("held-out subject leaked into train/val")


def segment(rec: EegRecording, spec: SegmentationSpec, dtype=np.float32) -> WindowSet:
    """Slide windows inside each annotation after skipping its first ``trim`` samples."""
    w, step, trim = spec.window_samples, spec.step_samples, spec.transition_trim_samples
    starts, labels, subs, sess = [], [], [], []
    for a in rec.annotations:
        n = window_count(a.length, w, step, trim)
        if n == 0:
            continue
        s = a.start_sample + trim + step * np.arange(n)
        starts.append(s)
        labels.append(np.full(n, int(a.label)))
        subs.append(np.full(n, a.subject_id))
        sess.append(np.full(n, a.session_id))
    if not starts:
        return WindowSet.empty(rec.montage.n_channels, w)
    starts = np.concatenate(starts)
    view = np.lib.stride_tricks.sliding_window_view(rec.data, w, axis=0)  # (n-w+1, ch, w)
    data = np.ascontiguousarray(view[starts], dtype=dtype)
    return WindowSet(data, np.concatenate(labels), np.concatenate(subs),
                     np.concatenate(sess), starts)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Normalise samples with channels on the last axis."""
        return (x - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d) -> ChannelStats:
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float))

    @classmethod
    def of_samples(cls, samples: np.ndarray) -> ChannelStats:
        """Stats over ``(n_samples, n_channels)``; zero-variance channels get std 1."""
        samples = np.asarray(samples, dtype=np.float64)
        if len(samples) < 2:
            raise ValueError("need at least two samples per channel")
        # constant channels are detected exactly; a summed mean is not exact
        const = samples.max(axis=0) == samples.min(axis=0)
        mean = np.where(const, samples[0], samples.mean(axis=0))
        std = samples.std(axis=0)
        return cls(mean, np.where(const | (std == 0), 1.0, std))


def subject_stats(windows: WindowSet) -> dict:
    out = {}
    for s in np.unique(windows.subjects):
        d = windows.data[windows.subjects == s].astype(np.float64)
        out[int(s)] = ChannelStats.of_samples(d.transpose(0, 2, 1).reshape(-1, d.shape[1]))
    return out


def zscore_per_subject(windows: WindowSet, reference: WindowSet | None = None,
                       stats: dict | None = None) -> WindowSet:
    """Per-subject, per-channel z-scoring.

    Statistics come from ``stats`` if given, else from the ``reference`` windows of
    the same subject (normally the training set). A subject absent from both is
    normalised with its own label-free statistics.
    """
    stats = dict(stats or {})
    if reference is not None:
        for k, v in subject_stats(reference).items():
            stats.setdefault(k, v)
    out = np.empty(windows.data.shape, dtype=np.float32)
    for s in np.unique(windows.subjects):
        mask = windows.subjects == s
        st = stats.get(int(s))
        if st is None:
            st = subject_stats(windows.subset(mask))[int(s)]
        d = windows.data[mask].astype(np.float64)
        out[mask] = (d - st.mean[None, :, None]) / st.std[None, :, None]
    return WindowSet(out, windows.labels, windows.subjects, windows.sessions, windows.origins)


def balance_classes(windows: WindowSet, seed: int = 0) -> WindowSet:
    """Downsample every class to the minority-class count (seeded, without replacement)."""
    counts = windows.class_counts()
    present = counts[counts > 0]
    if len(present) == 0:
        return windows
    m = present.min()
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(len(counts)):
        idx = np.flatnonzero(windows.labels == c)
        if len(idx) == 0:
            continue
        keep.append(np.sort(rng.choice(idx, size=m, replace=False)) if len(idx) > m else idx)
    return windows.subset(np.sort(np.concatenate(keep)))


def train_val_split(windows: WindowSet, ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(windows))
    n_train = int(round(ratio * len(windows)))
    empty = windows.subset(np.zeros(0, dtype=np.int64))
    return DatasetSplit(windows.subset(np.sort(perm[:n_train])),
                        windows.subset(np.sort(perm[n_train:])), empty)


def loso_split(windows: WindowSet, held_out: int, ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    test_mask = windows.subjects == held_out
    if not test_mask.any():
        raise ValueError(f"subject {held_out} has no windows")
    tv = train_val_split(windows.subset(~test_mask), ratio, seed)
    split = DatasetSplit(tv.train, tv.val, windows.subset(test_mask), held_out)
    split.check_disjoint()
    return split


def prepare_recordings(recordings, spec: SegmentationSpec, sos=None,
                       clean_threshold_uv: float | None = 100.0) -> WindowSet:
    """Filter each recording causally, optionally clean artifacts, then segment."""
    sets = []
    for rec in recordings:
        chain = sos or dsp.default_chain(rec.sample_rate_hz)
        rec = dsp.filter_recording(rec, chain)
        if clean_threshold_uv is not None:
            rec, _ = dsp.clean_artifacts(rec, clean_threshold_uv)
        sets.append(segment(rec, spec))
    return WindowSet.concat(sets)


# -- statistics --------------------------------------------------------------

class DegenerateVarianceError(ValueError):
    pass


def t_cdf(t: float, df: float) -> float:
    """Student-t CDF via the regularised incomplete beta function."""
    x = df / (df + t * t)
    tail = 0.5 * special.betainc(df / 2.0, 0.5, x)
    return 1.0 - tail if t >= 0 else tail


def t_quantile(p: float, df: float) -> float:
    return float(special.stdtrit(df, p))


def paired_t_test(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length vectors with n >= 2")
    d = a - b
    n = len(d)
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, 1.0
        raise DegenerateVarianceError("differences are constant and non-zero")
    t = mean / (sd / math.sqrt(n))
    p = float(special.betainc((n - 1) / 2.0, 0.5, (n - 1) / (n - 1 + t * t)))
    return float(t), min(max(p, 0.0), 1.0)


def confidence_interval(values, level: float = 0.91):
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        raise ValueError("need at least two values")
    if not 0 <= level < 1:
        raise ValueError("level must be in [0, 1)")
    sd = v.std(ddof=1)
    half = t_quantile((1 + level) / 2, len(v) - 1) * sd / math.sqrt(len(v)) if sd > 0 else 0.0
    return float(v.mean()), float(half)


@dataclass
class StatsReport:
    mean: dict
    std: dict
    half_width: dict
    level: float
    pairwise: dict  # (model_a, model_b) -> (t, p)


def stats_report(per_subject: dict, level: float = 0.91) -> StatsReport:
    """Summarise ``{model: per-subject accuracies}`` (same subject order for every model)."""
    mean, std, half, pairs = {}, {}, {}, {}
    names = list(per_subject)
    for name in names:
        m, h = confidence_interval(per_subject[name], level)
        mean[name], half[name] = m, h
        std[name] = float(np.std(per_subject[name], ddof=1))
    for i, x in enumerate(names):
        for y in names[i + 1:]:
            try:
                pairs[(x, y)] = paired_t_test(per_subject[x], per_subject[y])
            except DegenerateVarianceError:
                pairs[(x, y)] = (math.copysign(math.inf, np.mean(per_subject[x]) - np.mean(per_subject[y])), 0.0)
    return StatsReport(mean, std, half, level, pairs)


# -- window-set files --------------------------------------------------------

def save_windows(windows: WindowSet, directory) -> None:
    """Directory of little-endian float32 tensors (one shard per subject, row-major
    channels x samples per window) plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, shards = [], []
    for s in np.unique(windows.subjects):
        idx = np.flatnonzero(windows.subjects == s)
        name = f"subject_{int(s)}.f32"
        windows.data[idx].astype("<f4").tofile(directory / name)
        shards.append({"file": name, "count": int(len(idx))})
        for row, i in enumerate(idx):
            entries.append({
                "shard": name, "row": row, "label": ActionLabel(int(windows.labels[i])).name,
                "subject_id": int(windows.subjects[i]), "session_id": int(windows.sessions[i]),
                "origin_sample": int(windows.origins[i]),
            })
    index = {
        "dtype": "<f4", "layout": "row-major channels x samples",
        "n_channels": windows.n_channels, "window_samples": windows.window_samples,
        "shards": shards, "windows": entries,
    }
    (directory / "index.json").write_text(json.dumps(index))


def load_windows(directory) -> WindowSet:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    c, w = index["n_channels"], index["window_samples"]
    shards = {s["file"]: np.fromfile(directory / s["file"], dtype="<f4").reshape(s["count"], c, w)
              for s in index["shards"]}
    ents = index["windows"]
    if not ents:
        return WindowSet.empty(c, w)
    data = np.stack([shards[e["shard"]][e["row"]] for e in ents]).astype(np.float32)
    return WindowSet(data, [ActionLabel[e["label"]] for e in ents],
                     [e["subject_id"] for e in ents], [e["session_id"] for e in ents],
                     [e["origin_sample"] for e in ents])
