// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#include "davs/evalsuite/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "davs/core/rng.hpp"

namespace davs::evalsuite {

using core::Shape;
using core::Tensor;

namespace {

void require_image_pair(const Tensor<float>& a, const Tensor<float>& b,
                        const char* what) {
  if (a.shape() != b.shape())
    throw ContractError(std::string(what) + ": shape mismatch");
  DAVS_CHECK(a.numel() > 0, std::string(what) + ": empty input");
  for (long i = 0; i < a.numel(); ++i)
    if (!(a[i] >= 0.0f && a[i] <= 1.0f) || !(b[i] >= 0.0f && b[i] <= 1.0f))
      throw ContractError(std::string(what) +
                          ": pixel values must lie in [0, 1]");
}

}  // namespace

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
  require_image_pair(a, b, "psnr");
  double se = 0.0;
  for (long i = 0; i < a.numel(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    se += d * d;
  }
  const double mse = se / double(a.numel());
  if (mse < 1e-10) return 100.0;
  return 10.0 * std::log10(1.0 / mse);
}

namespace {

constexpr long kWin = 11;

const std::vector<double>& gaussian_window() {
  static const std::vector<double> k = [] {
    std::vector<double> v(kWin);
    double s = 0.0;
    for (long i = 0; i < kWin; ++i) {
      const double d = double(i - kWin / 2) / 1.5;
      v[size_t(i)] = std::exp(-0.5 * d * d);
      s += v[size_t(i)];
    }
    for (auto& x : v) x /= s;
    return v;
  }();
  return k;
}

// Separable valid-window Gaussian filter: (H, W) -> (H - 10, W - 10).
void gauss_valid(const std::vector<double>& img, long h, long w,
                 std::vector<double>& tmp, std::vector<double>& out) {
  const auto& k = gaussian_window();
  const long wo = w - kWin + 1, ho = h - kWin + 1;
  tmp.assign(size_t(h * wo), 0.0);
  for (long i = 0; i < h; ++i)
    for (long j = 0; j < wo; ++j) {
      double s = 0.0;
      const double* row = img.data() + i * w + j;
      for (long u = 0; u < kWin; ++u) s += row[u] * k[size_t(u)];
      tmp[size_t(i * wo + j)] = s;
    }
  out.assign(size_t(ho * wo), 0.0);
  for (long i = 0; i < ho; ++i)
    for (long j = 0; j < wo; ++j) {
      double s = 0.0;
      for (long u = 0; u < kWin; ++u)
        s += tmp[size_t((i + u) * wo + j)] * k[size_t(u)];
      out[size_t(i * wo + j)] = s;
    }
}

// SSIM of one channel plane pair, averaged over valid window positions.
double ssim_plane(const std::vector<double>& x, const std::vector<double>& y,
                  long h, long w) {
  constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  const long n = h * w;
  std::vector<double> xx(static_cast<size_t>(n)), yy(static_cast<size_t>(n)), xy(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) {
    xx[size_t(i)] = x[size_t(i)] * x[size_t(i)];
    yy[size_t(i)] = y[size_t(i)] * y[size_t(i)];
    xy[size_t(i)] = x[size_t(i)] * y[size_t(i)];
  }
  std::vector<double> tmp, mx, my, mxx, myy, mxy;
  gauss_valid(x, h, w, tmp, mx);
  gauss_valid(y, h, w, tmp, my);
  gauss_valid(xx, h, w, tmp, mxx);
  gauss_valid(yy, h, w, tmp, myy);
  gauss_valid(xy, h, w, tmp, mxy);
  double total = 0.0;
  for (size_t i = 0; i < mx.size(); ++i) {
    const double vx = mxx[i] - mx[i] * mx[i];
    const double vy = myy[i] - my[i] * my[i];
    const double cxy = mxy[i] - mx[i] * my[i];
    total += ((2.0 * mx[i] * my[i] + kC1) * (2.0 * cxy + kC2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2));
  }
  return total / double(mx.size());
}

}  // namespace

double ssim(const Tensor<float>& a, const Tensor<float>& b) {
  require_image_pair(a, b, "ssim");
  long t = 1, h = 0, w = 0;
  if (a.ndim() == 3 && a.dim(2) == 3) {
    h = a.dim(0);
    w = a.dim(1);
  } else if (a.ndim() == 4 && a.dim(3) == 3) {
    t = a.dim(0);
    h = a.dim(1);
    w = a.dim(2);
  } else {
    throw ContractError("ssim: expected (H,W,3) or (T,H,W,3)");
  }
  DAVS_CHECK(h >= kWin && w >= kWin,
             "ssim: images must be at least 11x11 pixels");

  std::vector<double> xa(static_cast<size_t>(h * w)), xb(static_cast<size_t>(h * w));
  double total = 0.0;
  for (long f = 0; f < t; ++f)
    for (long c = 0; c < 3; ++c) {
      const float* pa = a.data() + f * h * w * 3;
      const float* pb = b.data() + f * h * w * 3;
      for (long p = 0; p < h * w; ++p) {
        xa[size_t(p)] = double(pa[p * 3 + c]);
        xb[size_t(p)] = double(pb[p * 3 + c]);
      }
      total += ssim_plane(xa, xb, h, w);
    }
  return total / double(t * 3);
}

RetrievalResult retrieval_from_features(const Tensor<float>& queries,
                                        const Tensor<float>& candidates) {
  DAVS_CHECK(queries.ndim() == 2 && candidates.ndim() == 2,
             "retrieval: features must be (N, D) matrices");
  DAVS_CHECK(queries.shape() == candidates.shape(),
             "retrieval: query and candidate sets must have equal shape");
  const long n = queries.dim(0), d = queries.dim(1);
  if (n < 2)
    throw DomainError("retrieval needs at least 2 samples, got " +
                      std::to_string(n));

  std::vector<double> dist(static_cast<size_t>(n)), ranks(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) {
    const float* q = queries.data() + i * d;
    for (long j = 0; j < n; ++j) {
      const float* c = candidates.data() + j * d;
      double s = 0.0;
      for (long k = 0; k < d; ++k) {
        const double dd = double(q[k]) - double(c[k]);
        s += dd * dd;
      }
      dist[size_t(j)] = s;
    }
    const double dt = dist[size_t(i)];
    long rank = 1;
    for (long j = 0; j < n; ++j) {
      if (j == i) continue;
      if (dist[size_t(j)] < dt || (dist[size_t(j)] == dt && j < i)) ++rank;
    }
    ranks[size_t(i)] = double(rank);
  }

  RetrievalResult res;
  long hit1 = 0, hit10 = 0;
  for (double r : ranks) {
    if (r <= 1.0) ++hit1;
    if (r <= 10.0) ++hit10;
  }
  res.r1 = 100.0 * double(hit1) / double(n);
  res.r10 = 100.0 * double(hit10) / double(n);
  std::sort(ranks.begin(), ranks.end());
  res.medr = (n % 2 == 1) ? ranks[size_t(n / 2)]
                          : 0.5 * (ranks[size_t(n / 2 - 1)] +
                                   ranks[size_t(n / 2)]);
  return res;
}

// ---------------------------------------------------------------------------
// Linear probe

void ProbeSpec::validate() const {
  if (!(l2_regularization >= 0.0) || !std::isfinite(l2_regularization))
    throw ConfigError("probe: l2_regularization must be finite and >= 0");
  if (max_iterations < 1)
    throw ConfigError("probe: max_iterations must be >= 1");
  if (feature_source != "pid_concat")
    throw ConfigError("probe: unsupported feature_source '" + feature_source +
                      "'");
  if (target != "word_id")
    throw ConfigError("probe: unsupported target '" + target + "'");
}

namespace {

// Mean cross-entropy plus (lambda/2)*||W||^2; fills grads when requested.
double probe_loss(const std::vector<double>& xs, long n, long d,
                  const std::vector<long>& y, long c,
                  const std::vector<double>& w, const std::vector<double>& b,
                  double lambda, std::vector<double>* gw,
                  std::vector<double>* gb) {
  if (gw) {
    gw->assign(w.size(), 0.0);
    gb->assign(b.size(), 0.0);
  }
  double loss = 0.0;
  std::vector<double> z(static_cast<size_t>(c));
  for (long i = 0; i < n; ++i) {
    const double* x = xs.data() + i * d;
    for (long k = 0; k < c; ++k) {
      double s = b[size_t(k)];
      const double* wk = w.data() + k * d;
      for (long j = 0; j < d; ++j) s += wk[j] * x[j];
      z[size_t(k)] = s;
    }
    const double zmax = *std::max_element(z.begin(), z.end());
    double denom = 0.0;
    for (long k = 0; k < c; ++k) denom += std::exp(z[size_t(k)] - zmax);
    const double logdenom = zmax + std::log(denom);
    loss += logdenom - z[size_t(y[size_t(i)])];
    if (gw) {
      for (long k = 0; k < c; ++k) {
        const double p = std::exp(z[size_t(k)] - logdenom) -
                         (k == y[size_t(i)] ? 1.0 : 0.0);
        (*gb)[size_t(k)] += p;
        double* gwk = gw->data() + k * d;
        for (long j = 0; j < d; ++j) gwk[j] += p * x[j];
      }
    }
  }
  loss /= double(n);
  double reg = 0.0;
  for (double v : w) reg += v * v;
  loss += 0.5 * lambda * reg;
  if (gw) {
    for (auto& v : *gw) v /= double(n);
    for (auto& v : *gb) v /= double(n);
    for (size_t i = 0; i < w.size(); ++i) (*gw)[i] += lambda * w[i];
  }
  return loss;
}

}  // namespace

ProbeModel probe_fit(const Tensor<float>& x, const std::vector<long>& y,
                     long n_classes, const ProbeSpec& spec) {
  spec.validate();
  DAVS_CHECK(x.ndim() == 2, "probe: features must be (N, D)");
  const long n = x.dim(0), d = x.dim(1);
  DAVS_CHECK(n >= 1 && long(y.size()) == n,
             "probe: one label per feature row required");
  DAVS_CHECK(n_classes >= 2, "probe: need at least 2 classes");
  for (long v : y)
    if (v < 0 || v >= n_classes)
      throw DomainError("probe: label " + std::to_string(v) +
                        " outside [0, " + std::to_string(n_classes) + ")");

  ProbeModel m;
  m.n_classes = n_classes;
  m.n_features = d;
  m.mean.assign(size_t(d), 0.0);
  m.scale.assign(size_t(d), 0.0);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < d; ++j) m.mean[size_t(j)] += double(x.at(i, j));
  for (auto& v : m.mean) v /= double(n);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < d; ++j) {
      const double c = double(x.at(i, j)) - m.mean[size_t(j)];
      m.scale[size_t(j)] += c * c;
    }
  for (long j = 0; j < d; ++j) {
    const double sd = std::sqrt(m.scale[size_t(j)] / double(n));
    // Constant columns carry no information; zero scale drops them instead
    // of dividing by ~0.
    m.scale[size_t(j)] = sd > 1e-8 ? 1.0 / sd : 0.0;
  }

  std::vector<double> xs(static_cast<size_t>(n * d));
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < d; ++j)
      xs[size_t(i * d + j)] =
          (double(x.at(i, j)) - m.mean[size_t(j)]) * m.scale[size_t(j)];

  std::vector<double> w(size_t(n_classes * d), 0.0), b(size_t(n_classes), 0.0);
  std::vector<double> gw, gb, wt(w.size()), bt(b.size());
  double lr = 1.0;
  double loss = probe_loss(xs, n, d, y, n_classes, w, b,
                           spec.l2_regularization, &gw, &gb);
  for (long it = 0; it < spec.max_iterations; ++it) {
    double gnorm2 = 0.0;
    for (double v : gw) gnorm2 += v * v;
    for (double v : gb) gnorm2 += v * v;
    if (gnorm2 < 1e-20) break;
    lr = std::min(lr * 2.0, 1e6);  // let the step grow back after shrinking
    double cand = 0.0;
    for (int half = 0; half < 60; ++half) {
      for (size_t i = 0; i < w.size(); ++i) wt[i] = w[i] - lr * gw[i];
      for (size_t i = 0; i < b.size(); ++i) bt[i] = b[i] - lr * gb[i];
      cand = probe_loss(xs, n, d, y, n_classes, wt, bt,
                        spec.l2_regularization, nullptr, nullptr);
      if (cand <= loss - 0.5 * lr * gnorm2) break;
      lr *= 0.5;
    }
    if (cand >= loss) break;  // no descent direction left at any step size
    w.swap(wt);
    b.swap(bt);
    loss = probe_loss(xs, n, d, y, n_classes, w, b, spec.l2_regularization,
                      &gw, &gb);
  }

  m.weights = Tensor<double>({n_classes, d});
  std::copy(w.begin(), w.end(), m.weights.data());
  m.bias = b;
  return m;
}

std::vector<long> probe_predict(const ProbeModel& m, const Tensor<float>& x) {
  DAVS_CHECK(x.ndim() == 2 && x.dim(1) == m.n_features,
             "probe: feature width does not match the fitted model");
  const long n = x.dim(0), d = m.n_features, c = m.n_classes;
  std::vector<long> pred(size_t(n), 0);
  std::vector<double> xs(static_cast<size_t>(d));
  for (long i = 0; i < n; ++i) {
    for (long j = 0; j < d; ++j)
      xs[size_t(j)] =
          (double(x.at(i, j)) - m.mean[size_t(j)]) * m.scale[size_t(j)];
    double best = -std::numeric_limits<double>::infinity();
    long arg = 0;
    for (long k = 0; k < c; ++k) {
      double s = m.bias[size_t(k)];
      const double* wk = m.weights.data() + k * d;
      for (long j = 0; j < d; ++j) s += wk[j] * xs[size_t(j)];
      if (s > best) {
        best = s;
        arg = k;
      }
    }
    pred[size_t(i)] = arg;
  }
  return pred;
}

double accuracy_pct(const std::vector<long>& pred,
                    const std::vector<long>& labels) {
  DAVS_CHECK(!pred.empty() && pred.size() == labels.size(),
             "accuracy: prediction/label sizes must match and be non-empty");
  long hits = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == labels[i]) ++hits;
  return 100.0 * double(hits) / double(pred.size());
}

// ---------------------------------------------------------------------------
// Toy mouth-openness estimation

double mouth_mass(const Tensor<float>& frame_hwc,
                  const avdata::ToyWorldConfig& cfg) {
  DAVS_CHECK(frame_hwc.ndim() == 3 && frame_hwc.dim(2) == 3 &&
                 frame_hwc.dim(0) == cfg.frame_size &&
                 frame_hwc.dim(1) == cfg.frame_size,
             "mouth_mass: frame must be (frame_size, frame_size, 3)");
  const auto box = avdata::mouth_pixel_box(cfg);
  // The mouth is the only dark region inside the box (luminance sum ~0.43
  // against a face of >= 1.6); a linear ramp turns anti-aliased edge pixels
  // into fractional mass.
  constexpr double kDark = 0.43, kLight = 1.60;
  double mass = 0.0;
  for (long i = box.row0; i < box.row1; ++i)
    for (long j = box.col0; j < box.col1; ++j) {
      const float* p = frame_hwc.data() + (i * cfg.frame_size + j) * 3;
      const double s = double(p[0]) + double(p[1]) + double(p[2]);
      mass += std::clamp((kLight - s) / (kLight - kDark), 0.0, 1.0);
    }
  return mass;
}

OpennessCalibration calibrate_openness(long person_id,
                                       const avdata::ToyWorldConfig& cfg) {
  avdata::ToyWorldConfig clean = cfg;
  clean.render_noise = 0.0;
  const auto id = avdata::identity_params(person_id, cfg);
  core::Rng rng(0);  // unused at zero noise
  OpennessCalibration cal;
  cal.mass_closed =
      mouth_mass(avdata::render_toy_frame(id, 0.0, clean, rng), cfg);
  cal.mass_open =
      mouth_mass(avdata::render_toy_frame(id, 1.0, clean, rng), cfg);
  DAVS_CHECK(cal.mass_open > cal.mass_closed + 1.0,
             "openness calibration: open and closed mouths are "
             "indistinguishable at this frame size");
  return cal;
}

double estimate_openness(const Tensor<float>& frame_hwc,
                         const avdata::ToyWorldConfig& cfg,
                         const OpennessCalibration& calib) {
  const double m = mouth_mass(frame_hwc, cfg);
  return std::clamp(
      (m - calib.mass_closed) / (calib.mass_open - calib.mass_closed), 0.0,
      1.0);
}

}  // namespace davs::evalsuite
