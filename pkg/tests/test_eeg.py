import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, signal

from carm.eeg import (ActionLabel, Annotation, EegRecording, Montage, RecordingFormatError,
                      SynthConfig, generate_synthetic_session, load_recording, save_recording)


@pytest.fixture(scope="module")
def session():
    return generate_synthetic_session(SynthConfig(seed=3), 1, 1)


def band_power(x, fs, lo, hi):
    f, p = signal.welch(x, fs=fs, nperseg=256)
    sel = (f >= lo) & (f <= hi)
    return float(integrate.trapezoid(p[sel], f[sel]))


def test_label_codes_are_stable():
    assert [int(l) for l in ActionLabel] == [0, 1, 2]
    assert [l.name for l in ActionLabel] == ["Left", "Right", "Idle"]


def test_default_montage():
    m = Montage()
    assert m.n_channels == 16
    assert m.channel_names[0] == "FP1" and m.channel_names[-1] == "O1"
    assert m.sample_rate_hz == 125.0
    with pytest.raises(ValueError):
        Montage(("C3", "C3"))
    with pytest.raises(ValueError):
        Montage(sample_rate_hz=0)


def test_five_minute_session_length(session):
    assert len(session) == 37_500
    assert session.data.shape == (37_500, 16)


def test_segment_plan_cycles_right_idle_left_idle(session):
    labels = [a.label for a in session.annotations[:8]]
    assert labels == [ActionLabel.Right, ActionLabel.Idle, ActionLabel.Left, ActionLabel.Idle] * 2
    assert all(a.length == 1250 for a in session.annotations)
    covered = sum(a.length for a in session.annotations)
    # at most one trailing partial segment is left unannotated
    assert 0 <= len(session) - covered < 1250


def test_generator_is_deterministic(session):
    again = generate_synthetic_session(SynthConfig(seed=3), 1, 1)
    assert again == session
    other = generate_synthetic_session(SynthConfig(seed=4), 1, 1)
    assert not np.array_equal(other.data, session.data)


def test_idle_occipital_peak_is_alpha(session):
    fs = session.sample_rate_hz
    o1 = session.channel("O1")
    idle = [a for a in session.annotations if a.label is ActionLabel.Idle]
    x = np.concatenate([o1[a.start_sample + 63:a.end_sample] for a in idle])
    bands = {"delta": (1, 4), "theta": (4, 8), "alpha": (8, 12), "beta": (13, 30)}
    powers = {k: band_power(x - x.mean(), fs, *v) for k, v in bands.items()}
    assert max(powers, key=powers.get) == "alpha"


def test_line_noise_peak_dominates_neighbours():
    rec = generate_synthetic_session(SynthConfig(seed=1, line_noise_uv=5, pink_noise_uv=10), 2, 1)
    x = rec.channel("Cz")
    spec = np.abs(np.fft.rfft(x - x.mean()))
    f = np.fft.rfftfreq(len(x), 1 / rec.sample_rate_hz)
    k = int(np.argmin(np.abs(f - 50.0)))
    neighbours = np.r_[spec[k - 40:k - 5], spec[k + 6:k + 41]]
    assert spec[k] >= 10 * neighbours.mean()


def test_lateralised_beta_signature():
    rec = generate_synthetic_session(SynthConfig(seed=0), 2, 2)
    fs = rec.sample_rate_hz

    def mean_power(ch, label):
        x = rec.channel(ch)
        segs = [a for a in rec.annotations if a.label is label]
        return np.mean([band_power(x[a.start_sample + 63:a.end_sample], fs, 18, 22) for a in segs])

    assert mean_power("C4", ActionLabel.Left) > mean_power("C4", ActionLabel.Right)
    assert mean_power("C3", ActionLabel.Right) > mean_power("C3", ActionLabel.Left)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(pink_noise_uv=-1)
    with pytest.raises(ValueError):
        SynthConfig(lateral_gain=1.0)
    with pytest.raises(ValueError):
        SynthConfig(session_minutes=0)


def test_recording_round_trip_is_exact(tmp_path):
    rec = generate_synthetic_session(SynthConfig(seed=5, session_minutes=0.5), 3, 2)
    path = tmp_path / "r.csv"
    save_recording(rec, path)
    assert (tmp_path / "r.meta.json").exists()
    back = load_recording(path)
    assert back == rec
    assert back.annotations == rec.annotations


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False, width=64), min_size=6, max_size=30))
def test_round_trip_arbitrary_floats(tmp_path_factory, values):
    n = len(values) // 2
    data = np.array(values[:2 * n]).reshape(n, 2)
    rec = EegRecording(Montage(("A", "B")), data, (Annotation(0, n, ActionLabel.Idle, 1, 1),))
    path = tmp_path_factory.mktemp("rt") / "x.csv"
    save_recording(rec, path)
    assert load_recording(path) == rec


def test_channel_count_mismatch_names_line(tmp_path):
    rec = generate_synthetic_session(SynthConfig(seed=5, session_minutes=0.1), 1, 1)
    path = tmp_path / "r.csv"
    save_recording(rec, path)
    lines = path.read_text().splitlines()
    lines[0] = ",".join(lines[0].split(",")[:-1])  # header with 15 channels
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(RecordingFormatError) as exc:
        load_recording(path)
    assert "line 1" in str(exc.value)


def test_row_with_missing_column_is_rejected(tmp_path):
    rec = generate_synthetic_session(SynthConfig(seed=5, session_minutes=0.1), 1, 1)
    path = tmp_path / "r.csv"
    save_recording(rec, path)
    lines = path.read_text().splitlines()
    lines[5] = ",".join(lines[5].split(",")[:-1])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(RecordingFormatError) as exc:
        load_recording(path)
    assert "line 6" in str(exc.value)


def test_annotation_out_of_bounds_is_rejected(tmp_path):
    rec = generate_synthetic_session(SynthConfig(seed=5, session_minutes=0.5), 1, 1)
    path = tmp_path / "r.csv"
    save_recording(rec, path)
    meta_path = tmp_path / "r.meta.json"
    meta = json.loads(meta_path.read_text())
    meta["annotations"][-1]["end_sample"] = len(rec) + 10
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(RecordingFormatError):
        load_recording(path)


def test_non_monotonic_annotations_rejected():
    with pytest.raises(ValueError):
        EegRecording(Montage(("A",)), np.zeros((100, 1)),
                     (Annotation(50, 80, ActionLabel.Idle), Annotation(10, 40, ActionLabel.Left)))


def test_frames_are_contiguous(session):
    idx = [f.index for _, f in zip(range(5), session.frames())]
    assert idx == [0, 1, 2, 3, 4]
    assert session.frame(125).timestamp(125.0) == 1.0
