// Copyright 2026 The Marble Lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <doctest.h>

#include <cmath>
#include <numbers>

#include "marble/tensornet.hpp"

using namespace marble;
using namespace marble::nn;

namespace {

// Straight-line loops, no Eigen products.
std::vector<double> reference_forward(const Mlp& net, const std::vector<double>& x) {
  std::vector<double> act = x;
  const auto& layers = net.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& W = layers[l].W;
    std::vector<double> z(W.rows(), 0.0);
    for (int r = 0; r < W.rows(); ++r) {
      double s = layers[l].b[r];
      for (int c = 0; c < W.cols(); ++c) s += W(r, c) * act[c];
      z[r] = (l + 1 < layers.size()) ? std::max(s, 0.0) : s;
    }
    act = z;
  }
  return act;
}

Vector random_vector(int n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = g(rng);
  return v;
}

}  // namespace

TEST_CASE("mlp forward") {
  Mlp net({3, {4, 4}, 2}, 1);
  for (auto& d : net.layers()) d.W.setZero();
  net.layers().back().b << 0.25, -1.5;
  const Vector y = net.forward(Vector::Constant(3, 7.0));
  CHECK(y[0] == 0.25);
  CHECK(y[1] == -1.5);

  // Single active path: 2 * relu(1 * x0 + 0.5) * 3 - 1.
  Mlp path({2, {1, 1}, 1}, 0);
  auto& L = path.layers();
  L[0].W << 1.0, 0.0;
  L[0].b << 0.5;
  L[1].W << 2.0;
  L[1].b << 0.0;
  L[2].W << 3.0;
  L[2].b << -1.0;
  Vector x(2);
  x << 1.0, 9.0;
  CHECK(path.forward(x)[0] == doctest::Approx(8.0));
  x[0] = -2.0;
  CHECK(path.forward(x)[0] == doctest::Approx(-1.0));

  Rng rng(11);
  Mlp big({8, {256, 256}, 9}, 42);
  for (auto& d : big.layers()) d.b = random_vector(static_cast<int>(d.b.size()), rng, 0.1);
  for (int t = 0; t < 5; ++t) {
    const Vector in = random_vector(8, rng);
    const Vector got = big.forward(in);
    const auto want = reference_forward(big, std::vector<double>(in.data(), in.data() + 8));
    for (int i = 0; i < 9; ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
  }
  CHECK_THROWS_AS(big.forward(Vector::Zero(7)), ShapeError);
  CHECK(big.forward(Vector::Ones(8)) == big.forward(Vector::Ones(8)));
}

TEST_CASE("initialization") {
  Mlp net({8, {256, 256}, 9}, 5);
  CHECK(net.parameter_count() == 8 * 256 + 256 + 256 * 256 + 256 + 256 * 9 + 9);
  const double limit = std::sqrt(6.0 / (8 + 256));
  CHECK(net.layers()[0].W.cwiseAbs().maxCoeff() <= limit);
  CHECK(net.layers()[0].W.cwiseAbs().maxCoeff() > 0.9 * limit);
  CHECK(net.layers()[1].b.isZero());
  CHECK(Mlp({8, {256, 256}, 9}, 5) == net);
}

TEST_CASE("gaussian logpdf") {
  const double log2pi = std::log(2.0 * std::numbers::pi);
  GaussianHead h{Vector::Zero(3), Matrix::Identity(3, 3)};
  CHECK(gaussian_logpdf(h, Vector::Zero(3)) == doctest::Approx(-1.5 * log2pi));
  CHECK(gaussian_logpdf(h, Vector::Zero(3)) == doctest::Approx(-2.75682).epsilon(1e-5));

  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const Vector out = random_vector(gaussian_output_dim(3), rng);
    const auto head = GaussianHead::from_output(out, 3);
    // a = mu
    double logdiag = 0.0;
    for (int i = 0; i < 3; ++i) logdiag += std::log(head.chol(i, i));
    CHECK(gaussian_logpdf(head, head.mean) == doctest::Approx(-logdiag - 1.5 * log2pi).epsilon(1e-12));

    // Dense inverse oracle.
    const Vector a = head.mean + random_vector(3, rng);
    const Matrix S = head.covariance();
    const Vector diff = a - head.mean;
    const double want = -0.5 * diff.dot(S.inverse() * diff) - 0.5 * std::log(S.determinant()) -
                        1.5 * log2pi;
    CHECK(std::abs(gaussian_logpdf(head, a) - want) < 1e-9);
  }

  GaussianHead bad{Vector::Zero(2), Matrix::Identity(2, 2)};
  bad.chol(1, 1) = 1e-6;
  CHECK_THROWS_AS(gaussian_logpdf(bad, Vector::Zero(2)), ParameterizationError);
}

TEST_CASE("cholesky factor structure") {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const Vector out = random_vector(gaussian_output_dim(3), rng, 3.0);
    const auto head = GaussianHead::from_output(out, 3);
    for (int i = 0; i < 3; ++i) {
      CHECK(head.chol(i, i) >= kCholeskyFloor);
      for (int j = i + 1; j < 3; ++j) CHECK(head.chol(i, j) == 0.0);
    }
    Eigen::LLT<Matrix> llt(head.covariance());
    CHECK(llt.info() == Eigen::Success);
  }
  CHECK_THROWS_AS(GaussianHead::from_output(Vector::Zero(5), 3), ShapeError);
}

TEST_CASE("gumbel softmax") {
  Vector logits(4);
  logits << 2.0, 0.5, -1.0, 0.0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng(s);
    const Vector y = gumbel_softmax_sample(logits, 1.0, rng);
    CHECK(y.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(y.minCoeff() > 0.0);
  }
  Vector sep(3);
  sep << 10.0, 0.0, -10.0;
  Rng r0(1);
  for (int t = 0; t < 100; ++t) {
    Vector noise = sample_gumbel(3, r0);
    Eigen::Index arg = 0;
    (sep + noise).maxCoeff(&arg);
    const Vector y = gumbel_softmax(sep, noise, 0.01);
    CHECK(y[arg] > 0.99);
  }
  CHECK_THROWS(gumbel_softmax(sep, Vector::Zero(3), 0.0));

  const Vector p = softmax(logits);
  std::vector<int> counts(4, 0);
  Rng rng(99);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    Eigen::Index arg = 0;
    gumbel_softmax_sample(logits, 1.0, rng).maxCoeff(&arg);
    ++counts[arg];
  }
  for (int k = 0; k < 4; ++k) CHECK(std::abs(counts[k] / double(n) - p[k]) < 0.01);

  std::vector<int> hard(4, 0);
  for (int i = 0; i < n; ++i) ++hard[gumbel_max_sample(logits, rng)];
  for (int k = 0; k < 4; ++k) CHECK(std::abs(hard[k] / double(n) - p[k]) < 0.01);
}

TEST_CASE("gumbel softmax log gradient") {
  Rng rng(4);
  const Vector logits = random_vector(4, rng);
  const Vector noise = sample_gumbel(4, rng);
  const Vector c = random_vector(4, rng);
  const double tau = 0.7;
  auto f = [&](const Vector& l) { return c.dot(gumbel_softmax(l, noise, tau).array().log().matrix()); };
  const Vector g = gumbel_softmax_log_grad(gumbel_softmax(logits, noise, tau), c, tau);
  for (int i = 0; i < 4; ++i) {
    Vector lp = logits, lm = logits;
    lp[i] += 1e-6;
    lm[i] -= 1e-6;
    CHECK(g[i] == doctest::Approx((f(lp) - f(lm)) / 2e-6).epsilon(1e-6));
  }
  CHECK(softmax(logits).array().log().matrix().isApprox(log_softmax(logits), 1e-12));
}

TEST_CASE("adam") {
  Mlp net({2, {3}, 1}, 2);
  const auto before = net.flat();
  AdamState st(net, {});
  auto zero = zeros_like(net.layers());
  adam_step(net, zero, st);
  CHECK(net.flat() == before);
  CHECK(st.step == 1);

  // First step moves each coordinate by about lr against the gradient sign.
  AdamState fresh(net, {0.01, 0.9, 0.999, 1e-8});
  auto g = zeros_like(net.layers());
  g[0].W.setConstant(0.5);
  g[0].b.setConstant(-2.0);
  g[1].W.setConstant(3.0);
  g[1].b.setConstant(-0.1);
  const auto p0 = net.flat();
  const auto gf = flatten(g);
  adam_step(net, g, fresh);
  const auto p1 = net.flat();
  for (std::size_t i = 0; i < p0.size(); ++i)
    CHECK(p1[i] - p0[i] == doctest::Approx(-0.01 * (gf[i] > 0 ? 1.0 : -1.0)).epsilon(1e-6));

  // Decay of moments under a zero gradient.
  const Matrix m_prev = fresh.m[0].W;
  adam_step(net, zero, fresh);
  CHECK(fresh.m[0].W.isApprox(0.9 * m_prev));

  auto wrong = zeros_like(net.layers());
  wrong.pop_back();
  CHECK_THROWS_AS(adam_step(net, wrong, fresh), ShapeError);
}

TEST_CASE("adam on a convex quadratic") {
  // f = 0.5 * sum c_i (p_i - t_i)^2 over the flat parameters.
  Mlp net({3, {4}, 2}, 7);
  std::vector<double> target(net.parameter_count()), curv(net.parameter_count());
  Rng rng(1);
  std::uniform_real_distribution<double> u(0.5, 2.0), t(-1.0, 1.0);
  for (std::size_t i = 0; i < target.size(); ++i) {
    target[i] = t(rng);
    curv[i] = u(rng);
  }
  auto objective = [&] {
    const auto p = net.flat();
    double f = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) f += 0.5 * curv[i] * (p[i] - target[i]) * (p[i] - target[i]);
    return f;
  };
  AdamState st(net, {0.005, 0.9, 0.999, 1e-8});
  std::vector<double> trace;
  for (int step = 0; step < 100; ++step) {
    const auto p = net.flat();
    std::vector<double> gflat(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) gflat[i] = curv[i] * (p[i] - target[i]);
    Mlp carrier = net;
    carrier.set_flat(gflat);
    adam_step(net, carrier.layers(), st);
    trace.push_back(objective());
  }
  for (std::size_t i = 10; i < trace.size(); ++i) CHECK(trace[i] < trace[i - 1]);
  CHECK(trace.back() < 0.5 * trace.front());
}

TEST_CASE("grad_check") {
  std::vector<double> w{0.3, -1.2, 2.0, 0.7};
  std::vector<double> p{1.0, 2.0, 3.0, 4.0};
  auto linear = [&](std::span<const double> x) {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
    return s;
  };
  CHECK(grad_check(linear, w, p, {}).max_rel_error < 1e-9);
  std::vector<double> wrong = w;
  wrong[2] += 0.5;
  GradCheckOptions all;
  all.probe_count = 64;
  CHECK(grad_check(linear, wrong, p, all).max_rel_error > 0.1);
  CHECK(grad_check(linear, wrong, p, all).vector_rel_error > 0.05);
  CHECK(grad_check(linear, w, p, all).vector_rel_error < 1e-9);
}

TEST_CASE("vector error discounts components far below the gradient scale") {
  std::vector<double> w{1.0, -2.0, 1e-6};
  std::vector<double> p{0.5, 0.5, 0.5};
  auto linear = [&](std::span<const double> x) { return w[0] * x[0] + w[1] * x[1] + w[2] * x[2]; };
  std::vector<double> off = w;
  off[2] = 1.5e-6;
  GradCheckOptions all;
  all.probe_count = 64;
  const auto res = grad_check(linear, off, p, all);
  CHECK(res.max_rel_error > 0.3);
  CHECK(res.vector_rel_error < 1e-6);
}

TEST_CASE("gaussian log-likelihood gradient through a network") {
  const int d = 3;
  Mlp net({8, {16, 16}, gaussian_output_dim(d)}, 21);
  Rng rng(2);
  const int batch = 6;
  Matrix X(8, batch), A(d, batch);
  for (int c = 0; c < batch; ++c) {
    X.col(c) = random_vector(8, rng);
    A.col(c) = random_vector(d, rng, 0.5);
  }
  auto objective = [&](std::span<const double> flat) {
    Mlp copy = net;
    copy.set_flat(flat);
    const Matrix out = copy.forward_batch(X);
    double s = 0.0;
    for (int c = 0; c < batch; ++c) s += gaussian_logpdf(GaussianHead::from_output(out.col(c), d), A.col(c));
    return s;
  };
  ForwardCache cache;
  const Matrix out = net.forward_batch(X, cache);
  Matrix dout(out.rows(), batch);
  for (int c = 0; c < batch; ++c) dout.col(c) = gaussian_logpdf_grad(out.col(c), d, A.col(c));
  const auto grad = flatten(net.backward(cache, dout));
  GradCheckOptions opts;
  opts.probe_count = 200;
  opts.pattern = [&](std::span<const double> flat) {
    Mlp copy = net;
    copy.set_flat(flat);
    return copy.activation_pattern(X);
  };
  const auto params = net.flat();
  const auto res = grad_check(objective, grad, params, opts);
  CHECK(res.probes == 200);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("relu kinks are resampled") {
  // A preactivation sitting exactly at zero: perturbing its bias flips the pattern.
  Mlp net({1, {1}, 1}, 0);
  net.layers()[0].W << 1.0;
  net.layers()[0].b << 0.0;
  net.layers()[1].W << 1.0;
  Matrix X = Matrix::Zero(1, 1);
  auto objective = [&](std::span<const double> flat) {
    Mlp copy = net;
    copy.set_flat(flat);
    return copy.forward_batch(X)(0, 0);
  };
  GradCheckOptions opts;
  opts.probe_count = 20;
  opts.pattern = [&](std::span<const double> flat) {
    Mlp copy = net;
    copy.set_flat(flat);
    return copy.activation_pattern(X);
  };
  // Analytic subgradient picks 0 at the kink; the finite difference would say 0.5.
  std::vector<double> analytic{0.0, 0.0, 0.0, 1.0};
  const auto params = net.flat();
  const auto res = grad_check(objective, analytic, params, opts);
  CHECK(res.resampled > 0);
  CHECK(res.max_rel_error < 1e-9);
}

TEST_CASE("checkpoint round-trip") {
  Mlp net({8, {16, 16}, 9}, 3);
  Rng rng(5);
  for (auto& d : net.layers()) d.b = random_vector(static_cast<int>(d.b.size()), rng);
  const auto j = to_json(net);
  CHECK(j.at("format") == kMlpFormat);
  CHECK(mlp_from_json(nlohmann::json::parse(j.dump())) == net);
  auto bad = j;
  bad["layers"]["dense1.W"]["shape"] = {3, 3};
  CHECK_THROWS(mlp_from_json(bad));
}
