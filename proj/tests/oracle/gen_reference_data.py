# Copyright davs contributors
# SPDX-License-Identifier: Apache-2.0
#
# Generates frozen reference data for the metric and audio-feature tests.
# Written independently of the C++ implementation: MFCC uses numpy/scipy
# primitives, SSIM uses scikit-image, PSNR is computed directly from its
# definition. Outputs are committed under tests/data/ so the test suite
# never needs Python at run time.
#
# Usage: python3 tests/oracle/gen_reference_data.py tests/data

import struct
import sys
from pathlib import Path

import numpy as np
from scipy.fftpack import dct
from skimage.metrics import structural_similarity


def mfcc_reference(wave_f32: np.ndarray, sr: int) -> np.ndarray:
    """MFCC with the project's pinned conventions.

    pre-emphasis 0.97 over the whole signal, floor(N/hop) frames with the
    tail zero padded, symmetric Hamming window, power spectral density
    |X|^2 / (sr * sum(window^2)) (Welch convention), 40 triangular mel
    filters evaluated at FFT bin centers over [0, sr/2], log floor 1e-10,
    orthonormal DCT-II, coefficients 1..12 kept.
    """
    x = wave_f32.astype(np.float64)
    win = int(sr * 0.025 + 0.5)
    hop = int(sr * 0.010 + 0.5)
    n = len(x)
    assert n >= win
    frames = n // hop

    y = np.empty(max((frames - 1) * hop + win, n))
    y[:] = 0.0
    y[0] = x[0]
    y[1:n] = x[1:] - 0.97 * x[:-1]

    nfft = 1
    while nfft < win:
        nfft *= 2
    window = np.hamming(win)

    nbins = nfft // 2 + 1
    n_mels = 40
    mel_max = 2595.0 * np.log10(1.0 + (sr / 2.0) / 700.0)
    pts = 700.0 * (10.0 ** (mel_max * np.arange(n_mels + 2) / (n_mels + 1) / 2595.0) - 1.0)
    freqs = np.arange(nbins) * sr / nfft
    fb = np.zeros((n_mels, nbins))
    for m in range(n_mels):
        lo, mid, hi = pts[m], pts[m + 1], pts[m + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)

    out = np.zeros((frames, 12))
    for f in range(frames):
        frame = y[f * hop:f * hop + win] * window
        spec = np.fft.rfft(frame, nfft)
        power = np.abs(spec) ** 2 / (sr * np.sum(window ** 2))
        energies = fb @ power
        logmel = np.log(np.maximum(energies, 1e-10))
        ceps = dct(logmel, type=2, norm="ortho")
        out[f] = ceps[1:13]
    return out


def gen_mfcc(out_dir: Path, rng: np.random.Generator) -> None:
    items = []
    for i in range(100):
        sr = 8000
        dur = rng.uniform(0.3, 1.0)
        n = int(dur * sr)
        t = np.arange(n) / sr
        if i < 10:
            # Pure tones, including the toy world carrier.
            freq = [440.0, 440.0, 220.0, 880.0, 1000.0, 330.0, 550.0, 660.0,
                    1250.0, 740.0][i]
            amp = rng.uniform(0.2, 1.0)
            wave = amp * np.sin(2 * np.pi * freq * t)
        elif i < 20:
            # Amplitude-modulated tones, like the toy audio.
            env = np.repeat(rng.uniform(0.0, 1.0, size=16),
                            int(np.ceil(n / 16)))[:n]
            wave = env * np.sin(2 * np.pi * 440.0 * t)
        else:
            k = rng.integers(1, 4)
            wave = np.zeros(n)
            for _ in range(k):
                wave += rng.uniform(0.1, 0.5) * np.sin(
                    2 * np.pi * rng.uniform(80, 3500) * t + rng.uniform(0, 2 * np.pi))
            wave += rng.normal(0, 0.02, size=n)
        wave = np.clip(wave, -1.0, 1.0).astype(np.float32)
        coeffs = mfcc_reference(wave, sr)
        items.append((sr, wave, coeffs))

    with open(out_dir / "mfcc_reference.bin", "wb") as f:
        f.write(b"DAVSMFC1")
        f.write(struct.pack("<I", len(items)))
        for sr, wave, coeffs in items:
            f.write(struct.pack("<III", sr, len(wave), coeffs.shape[0]))
            f.write(wave.astype("<f4").tobytes())
            f.write(coeffs.astype("<f8").tobytes())
    print(f"mfcc_reference.bin: {len(items)} waveforms")


def gen_psnr_ssim(out_dir: Path, rng: np.random.Generator) -> None:
    items = []
    for i in range(100):
        h, w = int(rng.integers(16, 48)), int(rng.integers(16, 48))
        a = rng.uniform(0, 1, size=(h, w, 3))
        if i % 3 == 0:
            b = np.clip(a + rng.normal(0, 0.05, size=a.shape), 0, 1)
        elif i % 3 == 1:
            b = np.clip(a + rng.uniform(-0.02, 0.02), 0, 1)
        else:
            b = rng.uniform(0, 1, size=(h, w, 3))
        a = a.astype(np.float32)
        b = b.astype(np.float32)

        mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
        psnr = 100.0 if mse < 1e-10 else 10.0 * np.log10(1.0 / mse)

        ssim_channels = [
            structural_similarity(
                a[:, :, c].astype(np.float64), b[:, :, c].astype(np.float64),
                win_size=11, gaussian_weights=True, sigma=1.5,
                use_sample_covariance=False, data_range=1.0)
            for c in range(3)
        ]
        ssim = float(np.mean(ssim_channels))
        items.append((h, w, a, b, float(psnr), ssim))

    with open(out_dir / "psnr_ssim_reference.bin", "wb") as f:
        f.write(b"DAVSIMG1")
        f.write(struct.pack("<I", len(items)))
        for h, w, a, b, psnr, ssim in items:
            f.write(struct.pack("<II", h, w))
            f.write(a.astype("<f4").tobytes())
            f.write(b.astype("<f4").tobytes())
            f.write(struct.pack("<dd", psnr, ssim))
    print(f"psnr_ssim_reference.bin: {len(items)} image pairs")


def main() -> None:
    out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "tests/data")
    out_dir.mkdir(parents=True, exist_ok=True)
    gen_mfcc(out_dir, np.random.default_rng(20240811))
    gen_psnr_ssim(out_dir, np.random.default_rng(20240812))


if __name__ == "__main__":
    main()
