"""Causal IIR filtering for the acquisition path.

Filters are biquad cascades in direct-form II transposed. Designs are computed
here; sample-level application is delegated to ``scipy.signal.sosfilt``, which
runs the same DF2T recursion for a block of one sample or of a whole recording,
so streaming and batch results agree bit for bit.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as _sig

from .eeg import EegFrame, EegRecording

log = logging.getLogger(__name__)


class FilterDesignError(ValueError):
    pass


@dataclass(frozen=True)
class BandpassSpec:
    sample_rate_hz: float = 125.0
    order: int = 9
    low_hz: float = 0.5
    high_hz: float = 45.0

    def __post_init__(self):
        if self.order < 1:
            raise FilterDesignError("order must be >= 1")
        if not 0 < self.low_hz < self.high_hz < self.sample_rate_hz / 2:
            raise FilterDesignError(
                f"band edges must satisfy 0 < {self.low_hz} < {self.high_hz} < "
                f"{self.sample_rate_hz / 2} (Nyquist)"
            )


@dataclass(frozen=True)
class NotchSpec:
    sample_rate_hz: float = 125.0
    center_hz: float = 50.0
    q: float = 30.0

    def __post_init__(self):
        if not 0 < self.center_hz < self.sample_rate_hz / 2:
            raise FilterDesignError(
                f"notch center {self.center_hz} must lie in (0, {self.sample_rate_hz / 2})"
            )
        if not self.q > 0:
            raise FilterDesignError("q must be positive")


@dataclass(frozen=True)
class SecondOrderSections:
    """Rows of ``(b0, b1, b2, a1, a2)`` with ``a0 == 1``; ``overall_gain`` multiplies the output."""

    sections: np.ndarray
    overall_gain: float = 1.0

    def __post_init__(self):
        s = np.array(self.sections, dtype=np.float64).reshape(-1, 5)
        if not np.all(np.isfinite(s)) or not math.isfinite(self.overall_gain):
            raise FilterDesignError("non-finite coefficients")
        s.setflags(write=False)
        object.__setattr__(self, "sections", s)

    @property
    def n_sections(self) -> int:
        return len(self.sections)

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for _, _, _, a1, a2 in self.sections])

    def is_stable(self, margin: float = 1e-9) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0 - margin))

    def as_scipy(self) -> np.ndarray:
        """``(n, 6)`` array for scipy with the overall gain folded into the first numerator."""
        s = self.sections
        out = np.column_stack([s[:, :3], np.ones(len(s)), s[:, 3:]])
        out[0, :3] *= self.overall_gain
        return out

    def then(self, other: SecondOrderSections) -> SecondOrderSections:
        return SecondOrderSections(np.vstack([self.sections, other.sections]),
                                   self.overall_gain * other.overall_gain)


def design_bandpass(spec: BandpassSpec) -> SecondOrderSections:
    """Butterworth bandpass: analog prototype of ``order`` poles, lowpass-to-bandpass
    transform (2*order poles), bilinear transform with pre-warped band edges."""
    n = spec.order
    fs = spec.sample_rate_hz
    fs2 = 2.0 * fs
    w1 = fs2 * math.tan(math.pi * spec.low_hz / fs)
    w2 = fs2 * math.tan(math.pi * spec.high_hz / fs)
    bw = w2 - w1
    w0sq = w1 * w2

    proto = [np.exp(1j * math.pi * (2 * k + n + 1) / (2 * n)) for k in range(n)]
    # each prototype pole p becomes the roots of s^2 - p*bw*s + w0^2
    analog = []
    for p in proto:
        disc = np.sqrt((p * bw) ** 2 - 4.0 * w0sq + 0j)
        analog.extend([(p * bw + disc) / 2.0, (p * bw - disc) / 2.0])
    analog = np.array(analog)

    # bilinear map; each analog zero sits at s=0 or s=inf, i.e. z=+1 or z=-1
    poles = (fs2 + analog) / (fs2 - analog)
    zeros = np.r_[np.ones(n), -np.ones(n)]
    # the analog response is exactly 1 at w0 = sqrt(w1*w2); bilinear maps w0 to f_center
    f_center = fs / math.pi * math.atan(math.sqrt(w0sq) / fs2)
    zc = np.exp(2j * math.pi * f_center / fs)
    gain = 1.0 / abs(np.prod(zc - zeros) / np.prod(zc - poles))
    # pairing and ordering of sections (poles nearest the unit circle last) keeps
    # the intermediate signals small, which matters with a 0.5 Hz edge at 125 Hz
    rows = _sig.zpk2sos(zeros, poles, gain, pairing="nearest")
    sos = SecondOrderSections(np.column_stack([rows[:, :3], rows[:, 4:]]), 1.0)
    if not sos.is_stable():
        raise FilterDesignError("designed bandpass is unstable")
    return sos


def design_notch(spec: NotchSpec) -> SecondOrderSections:
    """Single-biquad notch with -3 dB bandwidth ``center/q`` (bandwidth pre-warped)."""
    w0 = 2.0 * math.pi * spec.center_hz / spec.sample_rate_hz
    bw = w0 / spec.q
    beta = math.tan(bw / 2.0)
    g = 1.0 / (1.0 + beta)
    c = math.cos(w0)
    sec = [g, -2.0 * g * c, g, -2.0 * g * c, 2.0 * g - 1.0]
    return SecondOrderSections(np.array([sec]), 1.0)


def default_chain(sample_rate_hz: float = 125.0, notch_first: bool = False) -> SecondOrderSections:
    """Bandpass 0.5-45 Hz (order 9) and 50 Hz notch (Q 30), bandpass first by default."""
    bp = design_bandpass(BandpassSpec(sample_rate_hz))
    notch = design_notch(NotchSpec(sample_rate_hz, min(50.0, 0.45 * sample_rate_hz)))
    return notch.then(bp) if notch_first else bp.then(notch)


def frequency_response(sos: SecondOrderSections, freqs_hz, sample_rate_hz: float) -> np.ndarray:
    """Complex gain of the cascade at each frequency (exact product over sections)."""
    f = np.asarray(freqs_hz, dtype=np.float64)
    if np.any(f < 0) or np.any(f > sample_rate_hz / 2 + 1e-12):
        raise ValueError("frequencies must lie in [0, Nyquist]")
    zinv = np.exp(-2j * np.pi * f / sample_rate_hz)
    h = np.full(f.shape, sos.overall_gain, dtype=np.complex128)
    for b0, b1, b2, a1, a2 in sos.sections:
        h *= (b0 + b1 * zinv + b2 * zinv ** 2) / (1.0 + a1 * zinv + a2 * zinv ** 2)
    return h


@dataclass
class FilterState:
    """DF2T delay registers, shape ``(n_sections, 2, n_channels)``."""

    n_sections: int
    n_channels: int
    registers: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.registers is None:
            self.registers = np.zeros((self.n_sections, 2, self.n_channels))

    def reset(self) -> None:
        self.registers[...] = 0.0

    @classmethod
    def for_filter(cls, sos: SecondOrderSections, n_channels: int) -> FilterState:
        return cls(sos.n_sections, n_channels)


class StreamingFilter:
    """Per-stream filter: owns one FilterState. Not shareable across consumers."""

    def __init__(self, sos: SecondOrderSections, n_channels: int):
        self.sos = sos
        self._coef = sos.as_scipy()
        self.state = FilterState.for_filter(sos, n_channels)

    def process(self, block: np.ndarray) -> np.ndarray:
        """Filter ``(n_samples, n_channels)`` continuing from the current state."""
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or block.shape[1] != self.state.n_channels:
            raise ValueError(
                f"channel mismatch: block {block.shape}, state has {self.state.n_channels}"
            )
        y, zf = _sig.sosfilt(self._coef, block, axis=0, zi=self.state.registers)
        self.state.registers = zf
        return y

    def apply(self, frame: EegFrame) -> EegFrame:
        x = np.asarray(frame.samples, dtype=np.float64)
        if x.shape != (self.state.n_channels,):
            raise ValueError(
                f"channel mismatch: frame has {x.shape}, state has {self.state.n_channels}"
            )
        return EegFrame(frame.index, self.process(x[None, :])[0])


def filter_apply(sos: SecondOrderSections, state: FilterState, frame: EegFrame) -> EegFrame:
    x = np.asarray(frame.samples, dtype=np.float64)
    if state.n_sections != sos.n_sections or x.shape != (state.n_channels,):
        raise ValueError(
            f"channel mismatch: frame has {x.shape[0] if x.ndim else 0} channels, "
            f"state is {state.n_sections}x{state.n_channels}"
        )
    y, zf = _sig.sosfilt(sos.as_scipy(), x[None, :], axis=0, zi=state.registers)
    state.registers = zf
    return EegFrame(frame.index, y[0])


def filter_batch(sos: SecondOrderSections, data: np.ndarray) -> np.ndarray:
    """Causal filtering of ``(n_samples, n_channels)`` from zero state."""
    data = np.asarray(data, dtype=np.float64)
    return StreamingFilter(sos, data.shape[1]).process(data)


def filter_recording(rec: EegRecording, sos: SecondOrderSections | None = None) -> EegRecording:
    sos = sos or default_chain(rec.sample_rate_hz)
    return rec.with_data(filter_batch(sos, rec.data))


@dataclass(frozen=True)
class ArtifactWarning:
    channel: str
    reason: str


def clean_channel(x: np.ndarray, threshold_uv: float, pad: int):
    """Interpolate over supra-threshold runs (padded by ``pad`` samples).

    Returns ``(cleaned, ok)``; ``ok`` is False when no clean sample exists.
    """
    bad = np.abs(x) > threshold_uv
    if not bad.any():
        return x.copy(), True
    if pad > 0:
        idx = np.flatnonzero(bad)
        # dilate: mark [i - pad, i + pad] for every bad i
        marks = np.zeros(len(x) + 1, dtype=np.int64)
        np.add.at(marks, np.clip(idx - pad, 0, len(x)), 1)
        np.add.at(marks, np.clip(idx + pad + 1, 0, len(x)), -1)
        bad = np.cumsum(marks[:-1]) > 0
    good = np.flatnonzero(~bad)
    if len(good) == 0:
        return x.copy(), False
    out = x.copy()
    # np.interp holds the edge value outside the clean range
    out[bad] = np.interp(np.flatnonzero(bad), good, x[good])
    return out, True


def clean_artifacts(rec: EegRecording, threshold_uv: float = 100.0, pad_ms: float = 100.0):
    """Amplitude-threshold artifact removal with linear interpolation per channel.

    Returns ``(recording, warnings)``. A channel with no sample under threshold is
    returned unmodified and reported in ``warnings``.
    """
    if not threshold_uv > 0:
        raise ValueError("threshold_uv must be positive")
    pad = int(round(pad_ms * 1e-3 * rec.sample_rate_hz))
    out = np.array(rec.data)
    warnings = []
    for c, name in enumerate(rec.montage.channel_names):
        cleaned, ok = clean_channel(rec.data[:, c], threshold_uv, pad)
        if not ok:
            warnings.append(ArtifactWarning(name, "entire channel above threshold"))
            log.warning("channel %s entirely above %.1f uV; left unmodified", name, threshold_uv)
            continue
        out[:, c] = cleaned
    return rec.with_data(out), warnings
