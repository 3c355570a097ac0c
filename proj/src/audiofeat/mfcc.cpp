// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#include "davs/audiofeat/mfcc.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

#include "davs/core/error.hpp"

namespace davs::audiofeat {

namespace {

constexpr double kPi = 3.14159265358979323846;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

long next_pow2(long n) {
  long p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Iterative radix-2 complex FFT, in place. n must be a power of two.
void fft_inplace(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// Triangular mel filterbank evaluated at FFT bin centers; (n_mels, nbins).
std::vector<double> mel_weights(const MfccConfig& cfg, long nfft) {
  const long nbins = nfft / 2 + 1;
  const double mel_max = hz_to_mel(cfg.sample_rate / 2.0);
  std::vector<double> points(cfg.n_mels + 2);
  for (long m = 0; m < cfg.n_mels + 2; ++m)
    points[m] = mel_to_hz(mel_max * m / (cfg.n_mels + 1));
  std::vector<double> w(static_cast<size_t>(cfg.n_mels) * nbins, 0.0);
  for (long m = 0; m < cfg.n_mels; ++m) {
    const double lo = points[m], mid = points[m + 1], hi = points[m + 2];
    for (long k = 0; k < nbins; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / nfft;
      double v = 0.0;
      if (f > lo && f < mid)
        v = (f - lo) / (mid - lo);
      else if (f == mid)
        v = 1.0;
      else if (f > mid && f < hi)
        v = (hi - f) / (hi - mid);
      w[m * nbins + k] = v;
    }
  }
  return w;
}

}  // namespace

void MfccConfig::validate() const {
  if (sample_rate < 4000)
    throw DomainError("mfcc: sample_rate must be >= 4000 Hz");
  DAVS_CHECK(window_seconds > 0 && hop_seconds > 0 &&
                 window_seconds >= hop_seconds,
             "mfcc: window must be positive and no shorter than the hop");
  DAVS_CHECK(n_mels >= 13 && n_mels <= 128, "mfcc: n_mels out of range");
  DAVS_CHECK(n_cepstra >= 2 && n_cepstra <= n_mels,
             "mfcc: n_cepstra out of range");
  DAVS_CHECK(log_floor > 0, "mfcc: log_floor must be positive");
  DAVS_CHECK(preemphasis >= 0 && preemphasis < 1,
             "mfcc: preemphasis out of range");
  DAVS_CHECK(context_frames >= 2 && context_frames % 2 == 0,
             "mfcc: context_frames must be even and >= 2");
}

MfccSequence mfcc(const std::vector<float>& waveform, const MfccConfig& cfg) {
  cfg.validate();
  const long n = static_cast<long>(waveform.size());
  const long win = cfg.window_samples();
  const long hop = cfg.hop_samples();
  if (n < win)
    throw DomainError("mfcc: waveform shorter than one analysis window (" +
                      std::to_string(n) + " < " + std::to_string(win) + ")");

  // Pre-emphasis over the whole signal, then zero-pad the tail so that
  // exactly floor(N / hop) frames fit.
  const long frames = n / hop;
  const long padded_len = (frames - 1) * hop + win;
  std::vector<double> sig(static_cast<size_t>(std::max(padded_len, n)), 0.0);
  sig[0] = waveform[0];
  for (long i = 1; i < n; ++i)
    sig[static_cast<size_t>(i)] =
        static_cast<double>(waveform[i]) - cfg.preemphasis * waveform[i - 1];

  const long nfft = next_pow2(win);
  const long nbins = nfft / 2 + 1;
  std::vector<double> window(win);
  for (long i = 0; i < win; ++i)
    window[i] = 0.54 - 0.46 * std::cos(2.0 * kPi * i / (win - 1));
  // Power spectral density scaling (Welch convention). Dividing by
  // sr * sum(window^2) keeps quiet frames near the log floor, so the floored
  // log-mel spectrum flattens as the signal fades instead of merely shifting
  // by a constant that the cepstral transform would cancel.
  double win_energy = 0.0;
  for (long i = 0; i < win; ++i) win_energy += window[i] * window[i];
  const double psd_scale = 1.0 / (cfg.sample_rate * win_energy);
  const auto mel = mel_weights(cfg, nfft);

  const long keep = cfg.kept_coeffs();
  MfccSequence out;
  out.coeffs = core::Tensor<double>({frames, keep});
  out.hop_seconds = cfg.hop_seconds;
  out.sample_rate = cfg.sample_rate;

  std::vector<std::complex<double>> buf(static_cast<size_t>(nfft));
  std::vector<double> power(static_cast<size_t>(nbins));
  std::vector<double> logmel(static_cast<size_t>(cfg.n_mels));
  const double dct_s = std::sqrt(2.0 / cfg.n_mels);

  for (long f = 0; f < frames; ++f) {
    const double* src = sig.data() + f * hop;
    for (long i = 0; i < win; ++i) buf[i] = src[i] * window[i];
    for (long i = win; i < nfft; ++i) buf[i] = 0.0;
    fft_inplace(buf);
    for (long k = 0; k < nbins; ++k)
      power[k] = std::norm(buf[k]) * psd_scale;
    for (long m = 0; m < cfg.n_mels; ++m) {
      double e = 0.0;
      const double* wrow = mel.data() + m * nbins;
      for (long k = 0; k < nbins; ++k) e += wrow[k] * power[k];
      logmel[m] = std::log(std::max(e, cfg.log_floor));
    }
    for (long r = 1; r < cfg.n_cepstra; ++r) {
      double c = 0.0;
      for (long m = 0; m < cfg.n_mels; ++m)
        c += logmel[m] * std::cos(kPi * r * (m + 0.5) / cfg.n_mels);
      out.coeffs.at(f, r - 1) = dct_s * c;
    }
  }
  return out;
}

core::Tensor<double> align_block(const MfccSequence& seq, long frame_index,
                                 long fps, long width) {
  DAVS_CHECK(frame_index >= 0, "align_block: frame_index must be >= 0");
  DAVS_CHECK(fps >= 1, "align_block: fps must be >= 1");
  DAVS_CHECK(seq.frames() > 0, "align_block: empty MFCC sequence");
  DAVS_CHECK(width >= 2 && width % 2 == 0,
             "align_block: width must be even and >= 2");
  const long keep = seq.coeffs.dim(1);
  const long half = width / 2;
  const double t = (frame_index + 0.5) / static_cast<double>(fps);
  const long center = static_cast<long>(std::floor(t / seq.hop_seconds));
  core::Tensor<double> block({keep, width});
  for (long j = 0; j < width; ++j) {
    const long row =
        std::clamp<long>(center - half + j, 0, seq.frames() - 1);
    for (long c = 0; c < keep; ++c) block.at(c, j) = seq.coeffs.at(row, c);
  }
  return block;
}

}  // namespace davs::audiofeat
