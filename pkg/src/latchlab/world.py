"""Synthetic audio world: oscillator clips with known controls, plus the
differentiable feature extractors the guidance losses run through.

All clips are mono, 8 kHz, 16384 samples (2.048 s). Control tracks live at
the latent rate: 256 frames (hop 64), matching one latent frame per hop.
"""

from __future__ import annotations

import csv
import wave as wave_module
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import tensor as tl
from .tensor import Tensor

SAMPLE_RATE = 8000
N_SAMPLES = 16384
DURATION = N_SAMPLES / SAMPLE_RATE
LATENT_FRAMES = 256
HOP = 64
FRAME_LEN = 256
N_PITCH_BINS = 16
PITCH_LO_HZ = 110.0
PITCH_HI_HZ = 880.0
DB_EPS = 1e-6  # floor inside the intensity log; silence reads -120 dB

CLASS_NAMES = ("sine", "saw", "square")
CONTROL_KINDS = ("intensity", "pitch", "beats")
CONTROL_DIMS = {"intensity": 1, "pitch": N_PITCH_BINS, "beats": 1}

# 16 log-spaced pitch bins over three octaves
PITCH_GRID_HZ = PITCH_LO_HZ * (PITCH_HI_HZ / PITCH_LO_HZ) ** (
    np.arange(N_PITCH_BINS) / (N_PITCH_BINS - 1)
)

_CLICK_LEN = int(0.005 * SAMPLE_RATE)  # 5 ms
_CLICK_AMP = 0.5
_CLICK_TAU = 8.0  # samples


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be mono 1-D, got {self.samples.shape}")


@dataclass
class ControlTrack:
    kind: str
    values: np.ndarray  # (frames, dims)
    units: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.kind not in CONTROL_DIMS:
            raise ValueError(f"unknown control kind {self.kind!r}")
        if self.values.shape[1] != CONTROL_DIMS[self.kind]:
            raise ValueError(
                f"{self.kind} track needs {CONTROL_DIMS[self.kind]} dims, "
                f"got {self.values.shape[1]}"
            )


@dataclass
class WorldSpec:
    """One synthetic clip: class, amplitude envelope, pitch segments, beats."""

    class_label: int
    envelope_knots: list[tuple[float, float]]  # (time s, amplitude)
    pitch_segments: list[tuple[float, int]]  # (onset s, grid bin), first at 0
    beat_times: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.class_label not in (0, 1, 2):
            raise ValueError(f"class_label must be 0|1|2, got {self.class_label}")
        if not self.pitch_segments:
            raise ValueError("pitch sequence must not be empty")
        for _, b in self.pitch_segments:
            if not 0 <= b < N_PITCH_BINS:
                raise ValueError(f"pitch bin {b} off the {N_PITCH_BINS}-bin grid")
        self.beat_times = np.asarray(self.beat_times, dtype=np.float64)
        if len(self.beat_times) and (
            np.any(np.diff(self.beat_times) <= 0)
            or self.beat_times[0] < 0
            or self.beat_times[-1] >= DURATION
        ):
            raise ValueError("beat times must be strictly increasing within the clip")


def beat_times_from_tempo(bpm: float, phase: float = 0.0) -> np.ndarray:
    """Beat grid at the given tempo; first beat at `phase` seconds.

    One beat per complete period: 120 BPM over 2.048 s gives four beats
    at 0.0, 0.5, 1.0, 1.5.
    """
    period = 60.0 / bpm
    n = int(np.floor((DURATION - phase) / period))
    return phase + period * np.arange(n)


def random_spec(rng: np.random.Generator) -> WorldSpec:
    n_knots = int(rng.integers(3, 7))
    times = np.sort(rng.uniform(0, DURATION, n_knots - 2))
    knots = [(0.0, float(rng.uniform(0.15, 0.9)))]
    knots += [(float(t), float(rng.uniform(0.15, 0.9))) for t in times]
    knots += [(DURATION, float(rng.uniform(0.15, 0.9)))]
    n_seg = int(rng.integers(1, 5))
    onsets = np.concatenate([[0.0], np.sort(rng.uniform(0.1, DURATION - 0.1, n_seg - 1))])
    segs = [(float(t), int(rng.integers(0, N_PITCH_BINS))) for t in onsets]
    bpm = float(rng.uniform(60, 180))
    phase = float(rng.uniform(0, 60.0 / bpm))
    return WorldSpec(
        class_label=int(rng.integers(0, 3)),
        envelope_knots=knots,
        pitch_segments=segs,
        beat_times=beat_times_from_tempo(bpm, phase),
        seed=int(rng.integers(0, 2**31 - 1)),
    )


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

_OSC_RMS = {0: 1.0 / np.sqrt(2.0), 1: 1.0 / np.sqrt(3.0), 2: 1.0}


def _oscillator(class_label: int, phase: np.ndarray) -> np.ndarray:
    if class_label == 0:
        return np.sin(phase)
    cycles = phase / (2 * np.pi)
    if class_label == 1:  # saw in [-1, 1]
        return 2.0 * (cycles - np.floor(cycles + 0.5))
    return np.sign(np.sin(phase))  # square


def synth(spec: WorldSpec) -> tuple[Waveform, dict[str, ControlTrack]]:
    """Render a clip and its ground-truth control tracks at the latent rate."""
    t = np.arange(N_SAMPLES) / SAMPLE_RATE

    onsets = np.array([s[0] for s in spec.pitch_segments])
    bins = np.array([s[1] for s in spec.pitch_segments])
    seg_idx = np.searchsorted(onsets, t, side="right") - 1
    freq = PITCH_GRID_HZ[bins[seg_idx]]
    phase = 2 * np.pi * np.cumsum(freq) / SAMPLE_RATE

    kt = np.array([k[0] for k in spec.envelope_knots])
    ka = np.array([k[1] for k in spec.envelope_knots])
    env = np.interp(t, kt, ka)

    w = env * _oscillator(spec.class_label, phase)

    rng = np.random.default_rng(spec.seed)
    decay = np.exp(-np.arange(_CLICK_LEN) / _CLICK_TAU)
    for bt in spec.beat_times:
        start = int(round(bt * SAMPLE_RATE))
        stop = min(start + _CLICK_LEN, N_SAMPLES)
        burst = rng.standard_normal(stop - start)
        w[start:stop] += _CLICK_AMP * decay[: stop - start] * burst

    w = np.clip(w, -1.0, 1.0).astype(np.float32)

    # ground truth at frame centers (frame j covers hop j, centered j*HOP+32)
    centers = (np.arange(LATENT_FRAMES) * HOP + HOP / 2) / SAMPLE_RATE
    env_c = np.interp(centers, kt, ka)
    rms = env_c * _OSC_RMS[spec.class_label]
    intensity = (20.0 * np.log10(rms + DB_EPS)).astype(np.float32)

    pitch = np.zeros((LATENT_FRAMES, N_PITCH_BINS), dtype=np.float32)
    seg_c = np.searchsorted(onsets, centers, side="right") - 1
    pitch[np.arange(LATENT_FRAMES), bins[seg_c]] = 1.0

    beats = np.zeros(LATENT_FRAMES, dtype=np.float32)
    frames = np.round(spec.beat_times * SAMPLE_RATE / HOP).astype(int)
    beats[frames[frames < LATENT_FRAMES]] = 1.0

    tracks = {
        "intensity": ControlTrack("intensity", intensity, "dB"),
        "pitch": ControlTrack("pitch", pitch, "probability"),
        "beats": ControlTrack("beats", beats, "probability"),
    }
    return Waveform(w), tracks


# ---------------------------------------------------------------------------
# differentiable extractors (Tensor in, Tensor out)
# ---------------------------------------------------------------------------


def _frames(x: Tensor) -> Tensor:
    """Pad to center frames on hop boundaries and window: (N,) -> (256, 256)."""
    pad = (FRAME_LEN - HOP) // 2
    zeros = Tensor(np.zeros(pad, dtype=np.float32), dtype=x.dtype)
    xp = tl.concatenate([zeros, x, zeros], axis=0)
    return tl.frame_signal(xp, FRAME_LEN, HOP)


def extract_intensity(x: Tensor) -> Tensor:
    """Framewise loudness in dB, Savitzky-Golay smoothed: (N,) -> (256, 1).

    dB is computed as 10*log10(mean_square + 1e-12), i.e. the +1e-6 floor
    applied on the RMS scale, which keeps exact-silence gradients finite
    and reads -120 dB on silence.
    """
    frames = _frames(x)
    ms = (frames * frames).mean(axis=1)
    db = tl.tlog(ms + float(DB_EPS**2)) * (10.0 / np.log(10.0))
    smoothed = savgol(db, 9, 2)
    return smoothed.reshape(LATENT_FRAMES, 1)


@lru_cache(maxsize=4)
def _dft_basis(n: int):
    k = np.arange(n // 2 + 1)
    t = np.arange(n)
    ang = 2 * np.pi * np.outer(t, k) / n
    return np.cos(ang).astype(np.float32), (-np.sin(ang)).astype(np.float32)


@lru_cache(maxsize=1)
def _pitch_pooling() -> np.ndarray:
    """Triangular log-frequency pooling matrix (fft bins x pitch bins)."""
    freqs = np.arange(FRAME_LEN // 2 + 1) * SAMPLE_RATE / FRAME_LEN
    grid_step = np.log(PITCH_GRID_HZ[1] / PITCH_GRID_HZ[0])
    pool = np.zeros((len(freqs), N_PITCH_BINS), dtype=np.float32)
    with np.errstate(divide="ignore"):
        logf = np.log(np.maximum(freqs, 1e-6))
    for k, fc in enumerate(PITCH_GRID_HZ):
        # triangles span two grid steps so no bin is starved at the 31 Hz
        # fft resolution of a 256-sample frame
        dist = np.abs(logf - np.log(fc)) / (2.0 * grid_step)
        col = np.maximum(0.0, 1.0 - dist)
        pool[:, k] = col / col.sum()  # weighted average: silence stays flat
    return pool


def extract_pitch(x: Tensor) -> Tensor:
    """Per-frame pitch-bin probabilities: (N,) -> (256, 16)."""
    frames = _frames(x)
    window = Tensor(np.hanning(FRAME_LEN).astype(np.float32), dtype=x.dtype)
    win = frames * window
    cos_b, sin_b = _dft_basis(FRAME_LEN)
    re = tl.matmul(win, Tensor(cos_b, dtype=x.dtype))
    im = tl.matmul(win, Tensor(sin_b, dtype=x.dtype))
    mag = tl.tsqrt(re * re + im * im + 1e-12)
    pooled = tl.matmul(mag, Tensor(_pitch_pooling(), dtype=x.dtype))
    peak = pooled.max(axis=1, keepdims=True)
    logits = pooled / tl.expand(peak * 0.1, pooled.shape)
    return tl.softmax(logits, axis=1)


def extract_beats(x: Tensor) -> Tensor:
    """Per-frame beat probabilities from onset energy: (N,) -> (256, 1).

    The amplitude envelope is the framewise peak of |x| over causal
    windows (a peak tracker stays flat on steady tones but steps up the
    moment a click enters), so an onset at sample s lands in frame
    round(s / hop).
    """
    pad = Tensor(np.zeros(FRAME_LEN - HOP, dtype=np.float32), dtype=x.dtype)
    xp = tl.concatenate([pad, tl.tabs(x)], axis=0)
    frames = tl.frame_signal(xp, FRAME_LEN, HOP)
    env = frames.max(axis=1)
    smoothed = savgol(env, 5, 2)
    zero = Tensor(np.zeros(1, dtype=np.float32), dtype=x.dtype)
    diff = tl.concatenate([zero, smoothed[1:] - smoothed[:-1]], axis=0)
    onset = tl.clamp(diff, lo=0.0)
    p = tl.sigmoid(onset * 10.0)
    prob = tl.clamp((p - 0.5) * 2.0, lo=0.0)
    return prob.reshape(LATENT_FRAMES, 1)


EXTRACTORS = {
    "intensity": extract_intensity,
    "pitch": extract_pitch,
    "beats": extract_beats,
}


def extract_track(kind: str, w: Waveform) -> ControlTrack:
    """Plain-numpy convenience wrapper around the differentiable extractors."""
    values = EXTRACTORS[kind](Tensor(w.samples)).numpy()
    units = "dB" if kind == "intensity" else "probability"
    return ControlTrack(kind, values, units)


# ---------------------------------------------------------------------------
# savitzky-golay
# ---------------------------------------------------------------------------


@lru_cache(maxsize=16)
def savgol_coeffs(window: int, polyorder: int) -> np.ndarray:
    """Least-squares polynomial smoothing coefficients (value at center)."""
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window must be odd and positive, got {window}")
    if polyorder >= window:
        raise ValueError(f"polyorder {polyorder} must be < window {window}")
    half = window // 2
    a = np.vander(np.arange(-half, half + 1, dtype=np.float64), polyorder + 1, increasing=True)
    coeffs = np.linalg.pinv(a)[0]
    return coeffs.astype(np.float32)


def savgol(x: Tensor, window: int, polyorder: int) -> Tensor:
    """Savitzky-Golay smoothing of a 1-D series with mirror edge padding."""
    n = x.shape[0]
    if n < window:
        raise ValueError(f"series length {n} < window {window}")
    c = savgol_coeffs(window, polyorder)
    half = window // 2
    left = x[half:0:-1]
    right = x[n - 2 : n - 2 - half : -1]
    padded = tl.concatenate([left, x, right], axis=0)
    frames = tl.frame_signal(padded, window, 1)
    coeff = Tensor(c.reshape(window, 1), dtype=x.dtype)
    return tl.matmul(frames, coeff).reshape(n)


def resample_track(x: np.ndarray, target_frames: int) -> np.ndarray:
    """Linear interpolation onto a new frame count; endpoints preserved."""
    if target_frames < 1:
        raise ValueError(f"target_frames must be >= 1, got {target_frames}")
    x = np.asarray(x, dtype=np.float32)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 frames to resample")
    src = np.linspace(0.0, 1.0, n)
    dst = np.linspace(0.0, 1.0, target_frames)
    out = np.stack([np.interp(dst, src, x[:, d]) for d in range(x.shape[1])], axis=1)
    out = out.astype(np.float32)
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------------------
# i/o: 16-bit PCM wave files and control-track CSV
# ---------------------------------------------------------------------------


def save_wav(path, w: Waveform):
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave_module.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def load_wav(path) -> Waveform:
    with wave_module.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = f.getframerate()
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return Waveform((pcm / 32767.0).astype(np.float32), rate)


def save_track_csv(path, track: ControlTrack):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "kind", "dim", "value"])
        for frame in range(track.values.shape[0]):
            for dim in range(track.values.shape[1]):
                writer.writerow([frame, track.kind, dim, f"{track.values[frame, dim]:.8g}"])


def load_track_csv(path) -> ControlTrack:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            rows.append((int(row["frame"]), row["kind"], int(row["dim"]), float(row["value"])))
    if not rows:
        raise ValueError(f"{path}: empty control track")
    kind = rows[0][1]
    n_frames = max(r[0] for r in rows) + 1
    values = np.zeros((n_frames, CONTROL_DIMS[kind]), dtype=np.float32)
    for frame, _, dim, value in rows:
        values[frame, dim] = value
    return ControlTrack(kind, values)
