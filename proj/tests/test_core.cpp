// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "davs/core/autodiff.hpp"
#include "davs/core/gradcheck.hpp"
#include "davs/core/nn.hpp"
#include "davs/core/rng.hpp"
#include "davs/train/optimizer.hpp"
#include "doctest.h"

using namespace davs;
using core::Rng;
using core::Shape;
using core::Tensor;
using VarD = core::Var<double>;
using TenD = core::Tensor<double>;

namespace {

TenD random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  TenD t(std::move(shape));
  for (long i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Direct quadruple-loop convolution used as an independent reference.
TenD conv2d_naive(const TenD& x, const TenD& w, const TenD& b, long stride,
                  long pad) {
  const long n = x.dim(0), c = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const long co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const long ho = (h + 2 * pad - kh) / stride + 1;
  const long wo = (ww + 2 * pad - kw) / stride + 1;
  TenD y({n, co, ho, wo});
  for (long ni = 0; ni < n; ++ni)
    for (long oc = 0; oc < co; ++oc)
      for (long i = 0; i < ho; ++i)
        for (long j = 0; j < wo; ++j) {
          double s = b[oc];
          for (long ic = 0; ic < c; ++ic)
            for (long ki = 0; ki < kh; ++ki)
              for (long kj = 0; kj < kw; ++kj) {
                const long si = i * stride + ki - pad;
                const long sj = j * stride + kj - pad;
                if (si < 0 || si >= h || sj < 0 || sj >= ww) continue;
                s += x[((ni * c + ic) * h + si) * ww + sj] *
                     w[((oc * c + ic) * kh + ki) * kw + kj];
              }
          y[((ni * co + oc) * ho + i) * wo + j] = s;
        }
  return y;
}

}  // namespace

TEST_CASE("rng determinism and child independence") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng parent(7);
  (void)parent.uniform();
  (void)parent.uniform();
  Rng c1 = parent.child("stream", 3);
  Rng c2 = Rng(7).child("stream", 3);
  for (int i = 0; i < 20; ++i) CHECK(c1.next_u64() == c2.next_u64());

  Rng c3 = parent.child("stream", 4);
  CHECK(c1.next_u64() != c3.next_u64());

  Rng u(123);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("tensor shape bookkeeping") {
  TenD t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 1.5);
  TenD r = t.reshaped({3, 2});
  CHECK(r.dim(0) == 3);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ContractError);
  CHECK_THROWS_AS((TenD::from({2, 2}, {1.0, 2.0})), ContractError);
}

TEST_CASE("backward on a diamond graph accumulates both paths") {
  // y = sum(x*x + x) so dy/dx = 2x + 1.
  VarD x(TenD::from({3}, {1.0, -2.0, 0.5}), true);
  auto y = core::sum_all(core::add(core::mul(x, x), x));
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(-3.0));
  CHECK(x.grad()[2] == doctest::Approx(2.0));
}

TEST_CASE("detach cuts gradient flow and NoGrad builds no tape") {
  VarD x(TenD::from({2}, {1.0, 2.0}), true);
  auto y = core::sum_all(core::mul(x.detach(), x));
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(1.0));  // only the live factor
  CHECK(x.grad()[1] == doctest::Approx(2.0));

  VarD z(TenD::from({2}, {3.0, 4.0}), true);
  {
    core::NoGradGuard ng;
    auto w = core::sum_all(core::mul(z, z));
    CHECK_FALSE(w.requires_grad());
  }
}

TEST_CASE("gradcheck: elementwise and reduction ops") {
  Rng rng(11);
  auto inputs = std::vector<TenD>{random_tensor(rng, {4, 5})};
  auto run = [&](auto builder) {
    auto rep = core::gradcheck(builder, inputs);
    CHECK(rep.max_rel_err < core::kGradCheckTol);
  };
  run([](const std::vector<VarD>& v) { return core::sum_all(core::relu(v[0])); });
  run([](const std::vector<VarD>& v) {
    return core::sum_all(core::leaky_relu(v[0], 0.2));
  });
  run([](const std::vector<VarD>& v) { return core::sum_all(core::sigmoid(v[0])); });
  run([](const std::vector<VarD>& v) { return core::sum_all(core::tanh_val(v[0])); });
  run([](const std::vector<VarD>& v) { return core::mean_all(core::abs_val(v[0])); });
  run([](const std::vector<VarD>& v) {
    return core::sum_all(core::mul(v[0], core::add_scalar(v[0], 0.3)));
  });
  run([](const std::vector<VarD>& v) {
    return core::sum_all(core::rsub_scalar(1.0, core::scale(v[0], 2.0)));
  });

  auto pos = std::vector<TenD>{random_tensor(rng, {3, 3}, 0.1, 2.0)};
  auto rep = core::gradcheck(
      [](const std::vector<VarD>& v) {
        return core::sum_all(core::log_clamped(v[0], 1e-12));
      },
      pos);
  CHECK(rep.max_rel_err < core::kGradCheckTol);
}

TEST_CASE("gradcheck: linear, softmax, nll") {
  Rng rng(12);
  std::vector<TenD> inputs = {random_tensor(rng, {3, 4}),
                              random_tensor(rng, {6, 4}),
                              random_tensor(rng, {6})};
  auto rep = core::gradcheck(
      [](const std::vector<VarD>& v) {
        return core::mean_all(core::linear(v[0], v[1], v[2]));
      },
      inputs);
  CHECK(rep.max_rel_err < core::kGradCheckTol);

  std::vector<TenD> logits = {random_tensor(rng, {4, 5}, -2.0, 2.0)};
  rep = core::gradcheck(
      [](const std::vector<VarD>& v) {
        return core::nll_mean(core::log_softmax_rows(v[0]), {1, 0, 4, 2});
      },
      logits);
  CHECK(rep.max_rel_err < core::kGradCheckTol);

  rep = core::gradcheck(
      [](const std::vector<VarD>& v) {
        auto p = core::softmax_rows(v[0]);
        return core::sum_all(core::mul(p, core::add_scalar(p, -0.2)));
      },
      logits);
  CHECK(rep.max_rel_err < core::kGradCheckTol);
}

TEST_CASE("gradcheck: shape ops") {
  Rng rng(13);
  std::vector<TenD> ab = {random_tensor(rng, {3, 2}), random_tensor(rng, {3, 4})};
  auto rep = core::gradcheck(
      [](const std::vector<VarD>& v) {
        auto c = core::concat_cols(v[0], v[1]);
        return core::sum_all(core::mul(c, c));
      },
      ab);
  CHECK(rep.max_rel_err < core::kGradCheckTol);

  std::vector<TenD> g = {random_tensor(rng, {5, 3})};
  rep = core::gradcheck(
      [](const std::vector<VarD>& v) {
        auto picked = core::gather_rows(v[0], {4, 0, 0, 2});
        return core::mean_all(core::mul(picked, picked));
      },
      g);
  CHECK(rep.max_rel_err < core::kGradCheckTol);

  rep = core::gradcheck(
      [](const std::vector<VarD>& v) {
        auto r = core::reshape(v[0], {3, 5});
        return core::sum_all(core::mul(r, r));
      },
      std::vector<TenD>{random_tensor(rng, {5, 3})});
  CHECK(rep.max_rel_err < core::kGradCheckTol);
}

TEST_CASE("conv2d forward matches naive reference") {
  Rng rng(14);
  for (auto [stride, pad] : std::vector<std::pair<long, long>>{{1, 0}, {1, 1},
                                                               {2, 1}}) {
    TenD x = random_tensor(rng, {2, 3, 7, 6});
    TenD w = random_tensor(rng, {4, 3, 3, 3});
    TenD b = random_tensor(rng, {4});
    auto y = core::conv2d(VarD(x), VarD(w), VarD(b), stride, pad);
    TenD ref = conv2d_naive(x, w, b, stride, pad);
    REQUIRE(y.value().shape() == ref.shape());
    for (long i = 0; i < ref.numel(); ++i)
      CHECK(y.value()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("gradcheck: conv2d, upsample, pooling") {
  Rng rng(15);
  std::vector<TenD> conv_in = {random_tensor(rng, {2, 2, 5, 5}),
                               random_tensor(rng, {3, 2, 3, 3}),
                               random_tensor(rng, {3})};
  auto rep = core::gradcheck(
      [](const std::vector<VarD>& v) {
        auto y = core::conv2d(v[0], v[1], v[2], 2, 1);
        return core::sum_all(core::mul(y, y));
      },
      conv_in);
  CHECK(rep.max_rel_err < core::kGradCheckTol);

  rep = core::gradcheck(
      [](const std::vector<VarD>& v) {
        auto y = core::bilinear_upsample2x(v[0]);
        return core::sum_all(core::mul(y, y));
      },
      std::vector<TenD>{random_tensor(rng, {2, 2, 3, 4})});
  CHECK(rep.max_rel_err < core::kGradCheckTol);

  rep = core::gradcheck(
      [](const std::vector<VarD>& v) {
        auto y = core::global_avg_pool(v[0]);
        return core::sum_all(core::mul(y, y));
      },
      std::vector<TenD>{random_tensor(rng, {2, 3, 4, 4})});
  CHECK(rep.max_rel_err < core::kGradCheckTol);
}

TEST_CASE("bilinear upsample preserves constants and endpoints") {
  TenD x({1, 1, 2, 2}, 3.0);
  auto y = core::bilinear_upsample2x(VarD(x));
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  for (long i = 0; i < y.numel(); ++i)
    CHECK(y.value()[i] == doctest::Approx(3.0));
}

TEST_CASE("gradcheck: normalization and pairwise distances") {
  Rng rng(16);
  auto rep = core::gradcheck(
      [](const std::vector<VarD>& v) {
        auto y = core::rows_l2_normalize(v[0]);
        return core::sum_all(core::mul(y, core::add_scalar(y, 0.1)));
      },
      std::vector<TenD>{random_tensor(rng, {4, 6}, 0.2, 1.0)});
  CHECK(rep.max_rel_err < core::kGradCheckTol);

  std::vector<TenD> va = {random_tensor(rng, {3, 5}), random_tensor(rng, {4, 5})};
  rep = core::gradcheck(
      [](const std::vector<VarD>& v) {
        return core::sum_all(core::pair_l2_dist(v[0], v[1]));
      },
      va);
  CHECK(rep.max_rel_err < core::kGradCheckTol);
}

TEST_CASE("rows_l2_normalize produces unit rows") {
  Rng rng(17);
  TenD x = random_tensor(rng, {5, 8});
  auto y = core::rows_l2_normalize(VarD(x));
  for (long i = 0; i < 5; ++i) {
    double s = 0;
    for (long j = 0; j < 8; ++j) s += y.value().at(i, j) * y.value().at(i, j);
    CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-6);
  }
}

TEST_CASE("param store groups, freeze guard and snapshots") {
  core::ParamStore<double> ps;
  Rng rng(3);
  core::LinearLayer<double> l1(ps, rng, "g1", "fc", 4, 3);
  core::LinearLayer<double> l2(ps, rng, "g2", "fc", 3, 2);
  CHECK(ps.group_names() == std::vector<std::string>{"g1", "g2"});
  CHECK(ps.total_elements() == (3 * 4 + 3) + (2 * 3 + 2));
  CHECK_THROWS_AS(ps.group("nope"), ContractError);
  CHECK_THROWS_AS(
      core::LinearLayer<double>(ps, rng, "g1", "fc", 4, 3), ContractError);

  VarD x(TenD::from({1, 4}, {1.0, 2.0, 3.0, 4.0}), false);
  {
    core::FreezeGuard<double> froze(ps, "g2");
    auto loss = core::sum_all(l2(l1(x)));
    loss.backward();
  }
  CHECK(l1.w.has_grad());
  CHECK_FALSE(l2.w.has_grad());
  CHECK(l2.w.requires_grad());  // restored after guard scope

  auto snap = ps.snapshot("g2");
  auto loss = core::sum_all(l2(l1(x)));
  loss.backward();
  CHECK(l2.w.has_grad());
  CHECK(ps.snapshot("g2") == snap);  // backward alone changes no values
}

TEST_CASE("init is a function of the parameter name, not creation order") {
  Rng rng(9);
  core::ParamStore<double> a, b;
  core::LinearLayer<double> a1(a, rng, "g", "first", 4, 4);
  core::LinearLayer<double> a2(a, rng, "g", "second", 4, 4);
  core::LinearLayer<double> b2(b, rng, "g", "second", 4, 4);
  core::LinearLayer<double> b1(b, rng, "g", "first", 4, 4);
  CHECK(a1.w.value().vec() == b1.w.value().vec());
  CHECK(a2.w.value().vec() == b2.w.value().vec());
}

TEST_CASE("adam minimizes a quadratic and only touches listed groups") {
  core::ParamStore<double> ps;
  auto& p = ps.add("opt", "x", TenD::from({2}, {5.0, -3.0}));
  auto& frozen = ps.add("other", "y", TenD::from({1}, {2.0}));
  train::Adam<double> adam({.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8});
  const auto before = frozen.value().vec();
  for (int i = 0; i < 400; ++i) {
    ps.zero_grad();
    auto loss = core::sum_all(core::mul(p, p));
    loss.backward();
    adam.update_groups(ps, {"opt"});
  }
  CHECK(std::abs(p.value()[0]) < 1e-2);
  CHECK(std::abs(p.value()[1]) < 1e-2);
  CHECK(frozen.value().vec() == before);
  CHECK(adam.step_count("opt") == 400);
  CHECK(adam.step_count("other") == 0);
}

TEST_CASE("adam state round-trips bit-exactly") {
  core::ParamStore<double> ps;
  auto& p = ps.add("g", "x", TenD::from({3}, {1.0, 2.0, 3.0}));
  train::Adam<double> adam({.lr = 0.05, .beta1 = 0.5, .beta2 = 0.999, .eps = 1e-8});
  for (int i = 0; i < 5; ++i) {
    ps.zero_grad();
    auto loss = core::sum_all(core::mul(p, p));
    loss.backward();
    adam.update_groups(ps, {"g"});
  }
  auto bytes = adam.serialize();

  core::ParamStore<double> ps2;
  auto& q = ps2.add("g", "x", TenD::from({3}, p.value().vec()));
  train::Adam<double> adam2({.lr = 0.05, .beta1 = 0.5, .beta2 = 0.999, .eps = 1e-8});
  adam2.deserialize(bytes);
  adam2.reshape_to(ps2);

  for (int i = 0; i < 3; ++i) {
    ps.zero_grad();
    auto l1 = core::sum_all(core::mul(p, p));
    l1.backward();
    adam.update_groups(ps, {"g"});
    ps2.zero_grad();
    auto l2 = core::sum_all(core::mul(q, q));
    l2.backward();
    adam2.update_groups(ps2, {"g"});
  }
  CHECK(p.value().vec() == q.value().vec());

  auto corrupt = bytes;
  corrupt.resize(corrupt.size() - 4);
  train::Adam<double> adam3({});
  CHECK_THROWS_AS(adam3.deserialize(corrupt), FormatError);
}
