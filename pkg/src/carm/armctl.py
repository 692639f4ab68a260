"""Simulated 3-DoF prosthetic arm: mode multiplexing, label-driven position deltas,
slew-limited servos and the 6-byte serial frame codec.

Frame layout (6 bytes)::

    0xAA | cmd | p0 p1 p2 | xor(cmd, p0, p1, p2)

    cmd 0x01 set-position: p0 = dof id, p1 p2 = position in centidegrees (u16 LE)
    cmd 0x02 set-mode:     p0 = mode id, p1 p2 = 0x00 0x00
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .eeg import ActionLabel

SYNC = 0xAA
CMD_SET_POSITION = 0x01
CMD_SET_MODE = 0x02
FRAME_BYTES = 6
N_DOF = 3
DEFAULT_LIMITS = ((0.0, 180.0),) * N_DOF
DEFAULT_SLEW_DEG_S = 180.0


class Mode(enum.IntEnum):
    Elbow = 0
    Arm = 1
    Fingers = 2


# one DoF per mode; the five finger servos move together as one group
DOF_OF_MODE = {Mode.Elbow: 0, Mode.Arm: 1, Mode.Fingers: 2}
MODE_WORDS = {"elbow": Mode.Elbow, "arm": Mode.Arm, "fingers": Mode.Fingers}
GATE_WORDS = ("stop", "resume")
COMMAND_WORDS = tuple(MODE_WORDS) + GATE_WORDS


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class ServoFrame:
    command: int
    target: int  # dof id or mode id
    value: int = 0  # centidegrees for set-position, 0 for set-mode

    @classmethod
    def set_position(cls, dof: int, centideg: int) -> ServoFrame:
        return cls(CMD_SET_POSITION, int(dof), int(centideg))

    @classmethod
    def set_mode(cls, mode) -> ServoFrame:
        return cls(CMD_SET_MODE, int(mode), 0)

    @property
    def degrees(self) -> float:
        return self.value / 100.0

    def describe(self) -> dict:
        if self.command == CMD_SET_MODE:
            return {"frame_kind": "set-mode", "mode": Mode(self.target).name}
        return {"frame_kind": "set-position", "dof": self.target, "centideg": self.value}


def _check(f: ServoFrame):
    if f.command == CMD_SET_POSITION:
        if not 0 <= f.target < N_DOF:
            raise FrameError(f"dof {f.target} out of range")
        if not 0 <= f.value <= 0xFFFF:
            raise FrameError(f"position {f.value} does not fit u16")
    elif f.command == CMD_SET_MODE:
        if f.target not in Mode._value2member_map_:
            raise FrameError(f"unknown mode {f.target}")
        if f.value != 0:
            raise FrameError("set-mode padding must be zero")
    else:
        raise FrameError(f"unknown command 0x{f.command:02X}")


def checksum(body: bytes) -> int:
    c = 0
    for b in body:
        c ^= b
    return c


def encode_frame(f: ServoFrame) -> bytes:
    _check(f)
    body = struct.pack("<BBH", f.command, f.target, f.value)
    return bytes([SYNC]) + body + bytes([checksum(body)])


def decode_frame(data: bytes) -> ServoFrame:
    data = bytes(data)
    if len(data) != FRAME_BYTES:
        raise FrameError(f"frame must be {FRAME_BYTES} bytes, got {len(data)}")
    if data[0] != SYNC:
        raise FrameError(f"bad sync byte 0x{data[0]:02X}")
    if checksum(data[1:5]) != data[5]:
        raise FrameError("checksum mismatch")
    cmd, target, value = struct.unpack("<BBH", data[1:5])
    f = ServoFrame(cmd, target, value)
    _check(f)
    return f


def decode_stream(data: bytes) -> list:
    """Decode consecutive 6-byte frames; invalid slots are skipped."""
    out = []
    for i in range(0, len(data) - FRAME_BYTES + 1, FRAME_BYTES):
        try:
            out.append(decode_frame(data[i:i + FRAME_BYTES]))
        except FrameError:
            continue
    return out


# -- arm state and policy ------------------------------------------------------------

@dataclass(frozen=True)
class ArmState:
    mode: Mode = Mode.Elbow
    positions: tuple = (90.0, 90.0, 90.0)
    limits: tuple = DEFAULT_LIMITS
    moving: bool = False

    def __post_init__(self):
        if len(self.positions) != N_DOF or len(self.limits) != N_DOF:
            raise ValueError(f"arm has {N_DOF} DoF")
        for p, (lo, hi) in zip(self.positions, self.limits):
            if not lo <= hi:
                raise ValueError(f"bad limits ({lo}, {hi})")
            if not lo <= p <= hi:
                raise ValueError(f"position {p} outside limits ({lo}, {hi})")

    @property
    def active_dof(self) -> int:
        return DOF_OF_MODE[self.mode]

    def clamp(self, dof: int, value: float) -> float:
        lo, hi = self.limits[dof]
        return float(min(max(value, lo), hi))

    def with_position(self, dof: int, value: float) -> ArmState:
        pos = list(self.positions)
        pos[dof] = self.clamp(dof, value)
        return replace(self, positions=tuple(pos))


@dataclass(frozen=True)
class ActuationPolicy:
    delta_degrees: float = 5.0
    confidence_scaling: bool = False

    def delta(self, label, probabilities=None) -> float:
        label = ActionLabel(label)
        sign = {ActionLabel.Left: -1.0, ActionLabel.Right: 1.0, ActionLabel.Idle: 0.0}[label]
        d = self.delta_degrees
        if self.confidence_scaling and probabilities is not None and sign:
            p = float(np.max(probabilities))
            d = min(max(self.delta_degrees * (2.0 * p - 1.0), 0.0), self.delta_degrees)
        return sign * d


def _centideg(deg: float) -> int:
    return int(round(deg * 100.0))


def apply_action(state: ArmState, label, probabilities=None,
                 policy: ActuationPolicy = ActuationPolicy()):
    """Move the active DoF by the policy delta; a frame is emitted only on change."""
    d = policy.delta(label, probabilities)
    if d == 0:
        return state, None
    dof = state.active_dof
    new = state.with_position(dof, state.positions[dof] + d)
    if _centideg(new.positions[dof]) == _centideg(state.positions[dof]):
        return state, None
    return new, ServoFrame.set_position(dof, _centideg(new.positions[dof]))


def switch_mode(state: ArmState, mode) -> tuple:
    mode = Mode(mode)
    return replace(state, mode=mode), ServoFrame.set_mode(mode)


def step_servo_sim(state: ArmState, frame: ServoFrame | None, dt: float,
                   slew_deg_s: float = DEFAULT_SLEW_DEG_S, target=None) -> ArmState:
    """Advance the simulated servos by ``dt`` seconds toward the frame's target.

    ``target`` carries earlier commanded positions (per DoF) that are still being
    approached; the frame, if any, overrides its DoF. Set-mode frames move nothing.
    """
    if dt < 0:
        raise ValueError("dt must be >= 0")
    goals = list(target) if target is not None else list(state.positions)
    if frame is not None and frame.command == CMD_SET_POSITION:
        goals[frame.target] = frame.degrees
    step = slew_deg_s * dt
    pos = list(state.positions)
    moving = False
    for i in range(N_DOF):
        goal = state.clamp(i, goals[i])
        diff = goal - pos[i]
        if abs(diff) <= step:
            pos[i] = goal
        else:
            pos[i] = state.clamp(i, pos[i] + np.sign(diff) * step)
            moving = True
    return replace(state, positions=tuple(pos), moving=moving)


# -- controller ----------------------------------------------------------------------

@dataclass
class ArmController:
    """Single owner of the commanded arm state and the simulated servo state."""

    state: ArmState = field(default_factory=ArmState)
    policy: ActuationPolicy = field(default_factory=ActuationPolicy)
    slew_deg_s: float = DEFAULT_SLEW_DEG_S
    enabled: bool = True
    servo: ArmState = None
    frames: list = field(default_factory=list)
    sink: object = None  # file-like byte sink for encoded frames

    def __post_init__(self):
        if self.servo is None:
            self.servo = self.state

    def _emit(self, frame):
        self.frames.append(frame)
        if self.sink is not None:
            self.sink.write(encode_frame(frame))
        return frame

    def command(self, word: str):
        """Apply a command word. Returns ``(accepted, frame or None)``."""
        word = word.strip().lower()
        if word in MODE_WORDS:
            self.state, frame = switch_mode(self.state, MODE_WORDS[word])
            self.servo = replace(self.servo, mode=self.state.mode)
            return True, self._emit(frame)
        if word == "stop":
            self.enabled = False
            return True, None
        if word == "resume":
            self.enabled = True
            return True, None
        return False, None

    def act(self, label, probabilities=None):
        if not self.enabled:
            return None
        self.state, frame = apply_action(self.state, label, probabilities, self.policy)
        return self._emit(frame) if frame is not None else None

    def tick(self, dt: float, frame=None) -> ArmState:
        self.servo = step_servo_sim(self.servo, frame, dt, self.slew_deg_s,
                                    target=self.state.positions)
        return self.servo

    def within_limits(self) -> bool:
        return all(lo <= p <= hi for s in (self.state, self.servo)
                   for p, (lo, hi) in zip(s.positions, s.limits))
