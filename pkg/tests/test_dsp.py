import numpy as np
import pytest

from ser_forge.dsp import (
    AudioSignal,
    DatasetVersion,
    LOG_FLOOR_EPS,
    MelFilterbank,
    StftFrameSet,
    VERSION_TABLE,
    build_mel_filterbank,
    dataset_version,
    hz_to_mel,
    log_mel,
    mel_to_hz,
    preprocess_version,
    segment_signal,
    stft,
    stft_frames,
)
from ser_forge.errors import InvalidConfigError, InvalidInputError

SR = 16000


def naive_dft_onesided(frame, fft_size):
    """O(N^2) DFT of a (windowed) frame zero-padded to fft_size, bins 0..N/2."""
    padded = np.zeros(fft_size, dtype=np.float64)
    padded[: frame.shape[0]] = frame
    n = np.arange(fft_size)
    k = np.arange(fft_size // 2 + 1)
    dft_matrix = np.exp(-2j * np.pi * np.outer(k, n) / fft_size)
    return dft_matrix @ padded


def interior_frame_range(n_samples, window_samples, stride):
    """Frame indices whose window lies fully inside the original samples."""
    half = window_samples // 2
    first = -(-half // stride)  # ceil
    last = (n_samples - half - window_samples) // stride + (1 if half % stride else 0)
    lo = int(np.ceil(half / stride))
    hi = (n_samples + half - window_samples) // stride
    return lo, hi


class TestSegmentSignal:
    def test_pad_4s_of_ones(self):
        sig = AudioSignal(np.ones(4 * SR), SR)
        out = segment_signal(sig, 6.0)
        assert len(out) == 96000
        assert np.all(out.samples[:16000] == 0.0)
        assert np.all(out.samples[16000:80000] == 1.0)
        assert np.all(out.samples[80000:] == 0.0)

    def test_exact_length_identity(self):
        sig = AudioSignal(np.linspace(-1, 1, 6 * SR), SR)
        out = segment_signal(sig, 6.0)
        assert out is sig

    def test_crop_8s_ramp_matches_slicing_oracle(self):
        ramp = np.arange(8 * SR, dtype=np.float64) / (8 * SR)
        sig = AudioSignal(ramp, SR)
        out = segment_signal(sig, 6.0)
        crop = 8 * SR - 6 * SR
        expected = ramp[crop // 2 : crop // 2 + 6 * SR]
        assert len(out) == 96000
        assert np.array_equal(out.samples, expected)

    def test_odd_pad_extra_sample_at_end(self):
        sig = AudioSignal(np.ones(11), 10)  # target 2.0 s -> 20 samples, pad 9
        out = segment_signal(sig, 2.0)
        assert len(out) == 20
        assert np.all(out.samples[:4] == 0.0)
        assert np.all(out.samples[4:15] == 1.0)
        assert np.all(out.samples[15:] == 0.0)

    def test_odd_crop_extra_sample_from_end(self):
        sig = AudioSignal(np.arange(11, dtype=np.float64) / 11, 10)
        out = segment_signal(sig, 0.8)  # 8 samples, crop 3 -> front 1, back 2
        assert np.array_equal(out.samples, sig.samples[1:9])

    def test_nonfinite_rejected(self):
        bad = np.ones(100)
        bad[3] = np.nan
        with pytest.raises(InvalidInputError):
            segment_signal(AudioSignal(bad, SR), 1.0)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            segment_signal(AudioSignal(np.zeros(0), SR), 1.0)


class TestStft:
    def test_zero_signal_gives_zero_frames(self):
        sig = AudioSignal(np.zeros(6 * SR), SR)
        frames = stft(sig, dataset_version(3), window_kind="hamming")
        assert np.all(frames.frames == 0)

    def test_constant_signal_dc_bin_v8(self):
        sig = AudioSignal(np.ones(6 * SR), SR)
        frames = stft(sig, dataset_version(8), window_kind="rectangular")
        assert frames.window_samples == 800
        assert frames.fft_size == 1024
        lo, hi = interior_frame_range(6 * SR, 800, 160)
        interior = frames.frames[lo : hi + 1]
        assert np.allclose(np.abs(interior[:, 0]), 800.0, rtol=0, atol=1e-9)

    def test_constant_signal_concentrates_at_dc_when_fft_equals_window(self):
        # 32 ms window at 16 kHz is 512 samples, a power of two, so no
        # zero-padding happens and a DC signal has no spectral leakage.
        sig = np.ones(6 * SR)
        frames = stft_frames(sig, window_samples=512, stride_samples=160,
                             window_kind="rectangular")
        assert frames.fft_size == 512
        lo, hi = interior_frame_range(6 * SR, 512, 160)
        interior = frames.frames[lo : hi + 1]
        assert np.allclose(np.abs(interior[:, 0]), 512.0, rtol=0, atol=1e-9)
        assert np.max(np.abs(interior[:, 1:])) < 1e-9 * 512.0

    def test_sine_peak_bin_and_dft_oracle(self):
        t = np.arange(6 * SR) / SR
        sig = AudioSignal(np.sin(2 * np.pi * 1000.0 * t), SR)
        frames = stft(sig, dataset_version(8), window_kind="rectangular")
        lo, hi = interior_frame_range(6 * SR, 800, 160)
        mid = (lo + hi) // 2
        mags = np.abs(frames.frames[mid])
        assert np.argmax(mags) == 64  # 1000 Hz / (16000/1024)

        # full-frame check against the naive DFT
        half = 800 // 2
        padded = np.concatenate([np.zeros(half), sig.samples, np.zeros(800 - half)])
        raw_frame = padded[mid * 160 : mid * 160 + 800]
        expected = naive_dft_onesided(raw_frame, 1024)
        scale = max(1.0, np.max(np.abs(expected)))
        assert np.max(np.abs(frames.frames[mid] - expected)) < 1e-6 * scale

    @pytest.mark.parametrize("version_id", sorted(VERSION_TABLE))
    @pytest.mark.parametrize("window_kind", ["hamming", "rectangular"])
    def test_random_signals_match_naive_dft(self, version_id, window_kind):
        rng = np.random.default_rng(100 * version_id + (window_kind == "hamming"))
        version = dataset_version(version_id)
        win = version.window_samples(SR)
        stride = version.stride_samples(SR)
        fft_size = version.fft_size(SR)
        n = int(rng.integers(win, 4097))
        samples = rng.uniform(-1, 1, n)
        frames = stft_frames(samples, win, stride, window_kind=window_kind)

        window = np.hamming(win) if window_kind == "hamming" else np.ones(win)
        half = win // 2
        padded = np.concatenate([np.zeros(half), samples, np.zeros(win - half)])
        assert frames.n_frames == (padded.shape[0] - win) // stride + 1
        for t_idx in rng.choice(frames.n_frames, size=3, replace=False):
            raw = padded[t_idx * stride : t_idx * stride + win] * window
            expected = naive_dft_onesided(raw, fft_size)
            scale = max(1.0, np.max(np.abs(expected)))
            assert np.max(np.abs(frames.frames[t_idx] - expected)) < 1e-6 * scale

    def test_parseval_rectangular_pow2_window(self):
        rng = np.random.default_rng(7)
        samples = rng.uniform(-1, 1, 4000)
        win = 512
        frames = stft_frames(samples, win, 160, window_kind="rectangular")
        assert frames.fft_size == win
        half = win // 2
        padded = np.concatenate([np.zeros(half), samples, np.zeros(win - half)])
        for t_idx in range(frames.n_frames):
            spec = frames.frames[t_idx]
            # reconstruct the two-sided power sum from the one-sided bins
            twosided = np.abs(spec[0]) ** 2 + np.abs(spec[-1]) ** 2
            twosided += 2.0 * np.sum(np.abs(spec[1:-1]) ** 2)
            raw = padded[t_idx * 160 : t_idx * 160 + win]
            energy = win * np.sum(raw**2)
            if energy > 0:
                assert abs(twosided - energy) < 1e-6 * energy

    def test_window_longer_than_signal_rejected(self):
        with pytest.raises(InvalidConfigError):
            stft_frames(np.ones(100), window_samples=240, stride_samples=160)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        samples = rng.uniform(-1, 1, 6 * SR)
        a = stft(AudioSignal(samples, SR), dataset_version(5))
        b = stft(AudioSignal(samples.copy(), SR), dataset_version(5))
        assert np.array_equal(a.frames, b.frames)


class TestMelFilterbank:
    def test_mel_scale_at_700hz(self):
        assert hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0), abs=1e-9)
        assert mel_to_hz(hz_to_mel(1234.5)) == pytest.approx(1234.5, abs=1e-6)

    def test_shape_and_positive_rows(self):
        fb = build_mel_filterbank(1024, 64, SR, 0.0, 8000.0)
        assert fb.weights.shape == (64, 513)
        assert np.all(fb.weights >= 0)
        assert np.all(fb.weights.sum(axis=1) > 0)

    def test_triangle_formula_spot_oracle(self):
        fb = build_mel_filterbank(1024, 64, SR, 0.0, 8000.0)
        mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(8000.0), 66)
        hz_points = mel_to_hz(mel_points)
        rng = np.random.default_rng(11)
        for _ in range(10):
            m = int(rng.integers(0, 64))
            b = int(rng.integers(0, 513))
            f = b * SR / 1024
            lo, ctr, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
            expected = max(0.0, min((f - lo) / (ctr - lo), (hi - f) / (hi - ctr)))
            assert fb.weights[m, b] == pytest.approx(expected, abs=1e-12)

    def test_centers_strictly_increasing(self):
        for fft_size in (256, 512, 1024):
            fb = build_mel_filterbank(fft_size, 64, SR, 0.0, 8000.0)
            assert np.all(np.diff(fb.center_freqs_hz) > 0)

    def test_contiguous_support(self):
        fb = build_mel_filterbank(1024, 64, SR, 0.0, 8000.0)
        for row in fb.weights:
            positive = np.flatnonzero(row > 0)
            assert positive.size > 0
            assert np.array_equal(positive, np.arange(positive[0], positive[-1] + 1))

    def test_narrow_filters_rescued_at_small_fft(self):
        # version 1 uses a 256-point FFT; the lowest filter is narrower than
        # one bin and must still carry weight
        fb = build_mel_filterbank(256, 64, SR, 0.0, 8000.0)
        assert np.all(fb.weights.sum(axis=1) > 0)

    def test_too_many_mels_rejected(self):
        with pytest.raises(InvalidConfigError):
            build_mel_filterbank(64, 64, SR, 0.0, 8000.0)


class TestLogMel:
    def _frame_set(self, complex_matrix, fft_size):
        return StftFrameSet(
            frames=np.asarray(complex_matrix, dtype=np.complex128),
            stride_samples=160,
            window_samples=fft_size,
            fft_size=fft_size,
        )

    def test_zero_frames_hit_eps_floor(self):
        frames = self._frame_set(np.zeros((4, 5)), 8)
        fb = MelFilterbank(
            weights=np.ones((3, 5)), f_min=0, f_max=8000, center_freqs_hz=np.arange(3.0)
        )
        out = log_mel(frames, fb)
        assert np.allclose(out.data, np.log(1e-6), atol=1e-12)
        assert out.data.shape == (4, 3)

    def test_single_bin_half_weight(self):
        frames = self._frame_set([[0, 1.0, 0, 0, 0]], 8)
        weights = np.zeros((1, 5))
        weights[0, 1] = 0.5
        fb = MelFilterbank(weights=weights, f_min=0, f_max=8000, center_freqs_hz=np.ones(1))
        out = log_mel(frames, fb)
        assert out.data[0, 0] == pytest.approx(np.log(0.5 + 1e-6), abs=1e-12)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(5)
        frames_c = rng.normal(size=(3, 5)) + 1j * rng.normal(size=(3, 5))
        weights = rng.uniform(0, 1, size=(2, 5))
        frames = self._frame_set(frames_c, 8)
        fb = MelFilterbank(weights=weights, f_min=0, f_max=8000, center_freqs_hz=np.arange(2.0))
        out = log_mel(frames, fb, eps=LOG_FLOOR_EPS)

        expected = np.zeros((3, 2))
        for t in range(3):
            for m in range(2):
                acc = 0.0
                for b in range(5):
                    acc += weights[m, b] * abs(frames_c[t, b]) ** 2
                expected[t, m] = np.log(acc + LOG_FLOOR_EPS)
        # identical up to BLAS vs nested-loop summation order
        np.testing.assert_allclose(out.data, expected, rtol=1e-13, atol=0)

    def test_dimension_mismatch_rejected(self):
        frames = self._frame_set(np.zeros((2, 5)), 8)
        fb = MelFilterbank(
            weights=np.ones((3, 4)), f_min=0, f_max=8000, center_freqs_hz=np.arange(3.0)
        )
        with pytest.raises(InvalidInputError):
            log_mel(frames, fb)


class TestPreprocessVersion:
    def test_version_parameters(self):
        v1 = dataset_version(1)
        assert v1.window_samples(SR) == 240
        assert v1.stride_samples(SR) == 160
        assert v1.fft_size(SR) == 256
        v8 = dataset_version(8)
        assert v8.window_samples(SR) == 800
        assert v8.stride_samples(SR) == 160
        assert v8.fft_size(SR) == 1024

    def test_stride_identity_all_versions(self):
        for vid in VERSION_TABLE:
            v = dataset_version(vid)
            assert v.window_ms - v.overlap_ms == pytest.approx(10.0)
            assert v.stride_samples(SR) == 160

    def test_shape_uniform_across_versions(self):
        rng = np.random.default_rng(2)
        sig = AudioSignal(rng.uniform(-1, 1, 6 * SR), SR)
        specs = [preprocess_version(sig, vid) for vid in sorted(VERSION_TABLE)]
        for spec in specs:
            assert spec.data.shape == (601, 64)
            assert np.isfinite(spec.data).all()
            assert spec.data.dtype == np.float32
        assert not np.array_equal(specs[0].data, specs[-1].data)

    def test_shorter_input_still_full_shape(self):
        rng = np.random.default_rng(4)
        sig = AudioSignal(rng.uniform(-1, 1, 3 * SR), SR)
        spec = preprocess_version(sig, 4)
        assert spec.data.shape == (601, 64)

    def test_version_tagging(self):
        sig = AudioSignal(np.ones(SR), SR)
        spec = preprocess_version(sig, 2, utterance_id="utt-1", label=3)
        assert spec.version_id == 2
        assert spec.utterance_id == "utt-1"
        assert spec.label == 3

    def test_bad_version_rejected(self):
        sig = AudioSignal(np.ones(SR), SR)
        with pytest.raises(InvalidConfigError):
            preprocess_version(sig, 9)

    def test_bit_identical_across_runs(self):
        rng = np.random.default_rng(8)
        samples = rng.uniform(-1, 1, 5 * SR)
        a = preprocess_version(AudioSignal(samples, SR), 6)
        b = preprocess_version(AudioSignal(samples.copy(), SR), 6)
        assert np.array_equal(a.data, b.data)

    def test_custom_version_invariants(self):
        with pytest.raises(InvalidConfigError):
            DatasetVersion(id=1, window_ms=10.0, overlap_ms=10.0)
