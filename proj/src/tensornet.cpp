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

#include "marble/tensornet.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace marble::nn {

namespace {

int layer_count(const MlpArch& a) { return static_cast<int>(a.hidden.size()) + 1; }

int layer_in(const MlpArch& a, int l) { return l == 0 ? a.input : a.hidden[l - 1]; }
int layer_out(const MlpArch& a, int l) {
  return l == static_cast<int>(a.hidden.size()) ? a.output : a.hidden[l];
}

void check_input(const MlpArch& a, Eigen::Index rows) {
  if (rows != a.input)
    throw ShapeError("mlp: input has " + std::to_string(rows) + " rows, expected " +
                     std::to_string(a.input));
}

}  // namespace

Mlp::Mlp(const MlpArch& arch, std::uint64_t seed) : arch_(arch) {
  if (arch.input < 1 || arch.output < 1) throw ShapeError("mlp: dimensions must be >= 1");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int l = 0; l < layer_count(arch); ++l) {
    const int in = layer_in(arch, l), out = layer_out(arch, l);
    const double limit = std::sqrt(6.0 / (in + out));
    Dense d{Matrix(out, in), Vector::Zero(out)};
    for (int c = 0; c < in; ++c)
      for (int r = 0; r < out; ++r) d.W(r, c) = limit * unit(rng);
    layers_.push_back(std::move(d));
  }
}

Vector Mlp::forward(const Vector& x) const { return forward_batch(x); }

Matrix Mlp::forward_batch(const Matrix& x) const {
  check_input(arch_, x.rows());
  Matrix act = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Matrix z = layers_[l].W * act;
    z.colwise() += layers_[l].b;
    act = l + 1 < layers_.size() ? Matrix(z.cwiseMax(0.0)) : std::move(z);
  }
  return act;
}

Matrix Mlp::forward_batch(const Matrix& x, ForwardCache& cache) const {
  check_input(arch_, x.rows());
  cache.inputs.clear();
  cache.preactivations.clear();
  Matrix act = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    cache.inputs.push_back(act);
    Matrix z = layers_[l].W * act;
    z.colwise() += layers_[l].b;
    cache.preactivations.push_back(z);
    act = l + 1 < layers_.size() ? Matrix(z.cwiseMax(0.0)) : std::move(z);
  }
  return act;
}

LayerSet Mlp::backward(const ForwardCache& cache, const Matrix& d_out) const {
  if (cache.inputs.size() != layers_.size()) throw ShapeError("mlp: stale forward cache");
  if (d_out.rows() != arch_.output || d_out.cols() != cache.inputs.back().cols())
    throw ShapeError("mlp: upstream gradient shape mismatch");
  LayerSet grads(layers_.size());
  Matrix g = d_out;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    grads[i].W = g * cache.inputs[i].transpose();
    grads[i].b = g.rowwise().sum();
    if (i == 0) break;
    g = (layers_[i].W.transpose() * g)
            .cwiseProduct((cache.preactivations[i - 1].array() > 0.0).cast<double>().matrix());
  }
  return grads;
}

std::vector<bool> Mlp::activation_pattern(const Matrix& x) const {
  ForwardCache cache;
  forward_batch(x, cache);
  std::vector<bool> out;
  for (std::size_t l = 0; l + 1 < cache.preactivations.size(); ++l) {
    const Matrix& z = cache.preactivations[l];
    for (Eigen::Index i = 0; i < z.size(); ++i) out.push_back(z.data()[i] > 0.0);
  }
  return out;
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& d : layers_) n += static_cast<std::size_t>(d.W.size() + d.b.size());
  return n;
}

std::vector<double> Mlp::flat() const { return flatten(layers_); }

void Mlp::set_flat(std::span<const double> values) {
  if (values.size() != parameter_count()) throw ShapeError("mlp: flat parameter size mismatch");
  std::size_t off = 0;
  for (auto& d : layers_) {
    std::copy_n(values.begin() + off, d.W.size(), d.W.data());
    off += d.W.size();
    std::copy_n(values.begin() + off, d.b.size(), d.b.data());
    off += d.b.size();
  }
}

bool Mlp::operator==(const Mlp& o) const {
  if (!(arch_ == o.arch_) || layers_.size() != o.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].W != o.layers_[i].W || layers_[i].b != o.layers_[i].b) return false;
  return true;
}

LayerSet zeros_like(const LayerSet& layers) {
  LayerSet out;
  for (const auto& d : layers)
    out.push_back({Matrix::Zero(d.W.rows(), d.W.cols()), Vector::Zero(d.b.size())});
  return out;
}

void accumulate(LayerSet& into, const LayerSet& add, double scale) {
  if (into.size() != add.size()) throw ShapeError("accumulate: layer count mismatch");
  for (std::size_t i = 0; i < into.size(); ++i) {
    into[i].W += scale * add[i].W;
    into[i].b += scale * add[i].b;
  }
}

std::vector<double> flatten(const LayerSet& layers) {
  std::vector<double> out;
  for (const auto& d : layers) {
    out.insert(out.end(), d.W.data(), d.W.data() + d.W.size());
    out.insert(out.end(), d.b.data(), d.b.data() + d.b.size());
  }
  return out;
}

GaussianHead GaussianHead::from_output(const Vector& out, int d, double eps) {
  if (out.size() != gaussian_output_dim(d)) throw ShapeError("gaussian head: bad output size");
  GaussianHead h{out.head(d), Matrix::Zero(d, d)};
  int idx = d;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j <= i; ++j, ++idx) h.chol(i, j) = i == j ? std::exp(out[idx]) + eps : out[idx];
  return h;
}

Vector GaussianHead::sample(Rng& rng) const {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector z(mean.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal(rng);
  return mean + chol.triangularView<Eigen::Lower>() * z;
}

double gaussian_logpdf(const GaussianHead& head, const Vector& a, double eps) {
  const auto d = head.mean.size();
  if (a.size() != d || head.chol.rows() != d || head.chol.cols() != d)
    throw ShapeError("gaussian_logpdf: dimension mismatch");
  double log_det = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) {
    if (!(head.chol(i, i) >= eps * (1.0 - 1e-12)))
      throw ParameterizationError("gaussian_logpdf: Cholesky diagonal below floor");
    log_det += std::log(head.chol(i, i));
  }
  const Vector z = head.chol.triangularView<Eigen::Lower>().solve(a - head.mean);
  return -0.5 * z.squaredNorm() - log_det - 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
}

Vector gaussian_logpdf_grad(const Vector& out, int d, const Vector& a, double eps) {
  const GaussianHead h = GaussianHead::from_output(out, d, eps);
  const Vector z = h.chol.triangularView<Eigen::Lower>().solve(a - h.mean);
  const Vector w = h.chol.transpose().triangularView<Eigen::Upper>().solve(z);
  Vector g(out.size());
  g.head(d) = w;
  int idx = d;
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j <= i; ++j, ++idx) {
      double dl = w[i] * z[j];
      if (i == j) dl = (dl - 1.0 / h.chol(i, i)) * (h.chol(i, i) - eps);
      g[idx] = dl;
    }
  }
  return g;
}

Vector softmax(const Vector& logits) {
  // std::exp underflows to exactly zero; Eigen's vectorized exp stops at a denormal.
  const Vector e = (logits.array() - logits.maxCoeff()).unaryExpr([](double x) { return std::exp(x); });
  return e / e.sum();
}

Vector log_softmax(const Vector& logits) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return logits.array() - lse;
}

Vector sample_gumbel(int k, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Vector g(k);
  for (int i = 0; i < k; ++i) {
    double u = unit(rng);
    while (u <= 0.0) u = unit(rng);
    g[i] = -std::log(-std::log(u));
  }
  return g;
}

Vector gumbel_softmax(const Vector& logits, const Vector& noise, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax: tau must be > 0");
  return softmax((logits + noise) / tau);
}

Vector gumbel_softmax_sample(const Vector& logits, double tau, Rng& rng) {
  return gumbel_softmax(logits, sample_gumbel(static_cast<int>(logits.size()), rng), tau);
}

Vector gumbel_softmax_log_grad(const Vector& y, const Vector& coeffs, double tau) {
  return (coeffs - coeffs.sum() * y) / tau;
}

int gumbel_max_sample(const Vector& logits, Rng& rng) {
  Eigen::Index k = 0;
  (logits + sample_gumbel(static_cast<int>(logits.size()), rng)).maxCoeff(&k);
  return static_cast<int>(k);
}

AdamState::AdamState(const Mlp& net, const AdamConfig& cfg)
    : hyper(cfg), m(zeros_like(net.layers())), v(zeros_like(net.layers())) {}

void adam_step(Mlp& net, const LayerSet& grads, AdamState& st) {
  auto& layers = net.layers();
  if (grads.size() != layers.size() || st.m.size() != layers.size())
    throw ShapeError("adam_step: layer count mismatch");
  ++st.step;
  const double b1 = st.hyper.beta1, b2 = st.hyper.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
    if (p.size() != g.size()) throw ShapeError("adam_step: gradient shape mismatch");
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    p.array() -= st.hyper.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + st.hyper.eps);
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    update(layers[i].W, grads[i].W, st.m[i].W, st.v[i].W);
    update(layers[i].b, grads[i].b, st.m[i].b, st.v[i].b);
  }
}

GradCheckResult grad_check(const std::function<double(std::span<const double>)>& objective,
                           std::span<const double> analytic, std::span<const double> params,
                           const GradCheckOptions& opts) {
  if (analytic.size() != params.size()) throw ShapeError("grad_check: gradient size mismatch");
  GradCheckResult res;
  if (params.empty()) return res;
  Rng rng(opts.seed);
  std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
  std::vector<double> x(params.begin(), params.end());
  const int max_draws = opts.probe_count * 20;
  double diff2 = 0.0, an2 = 0.0, num2 = 0.0;
  for (int draws = 0; res.probes < opts.probe_count && draws < max_draws; ++draws) {
    const std::size_t i = pick(rng);
    const double x0 = x[i];
    x[i] = x0 + opts.h;
    std::vector<bool> pat_plus;
    if (opts.pattern) pat_plus = opts.pattern(x);
    const double f_plus = objective(x);
    x[i] = x0 - opts.h;
    std::vector<bool> pat_minus;
    if (opts.pattern) pat_minus = opts.pattern(x);
    const double f_minus = objective(x);
    x[i] = x0;
    if (opts.pattern && pat_plus != pat_minus) {
      ++res.resampled;
      continue;
    }
    const double numeric = (f_plus - f_minus) / (2.0 * opts.h);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-7});
    res.max_rel_error = std::max(res.max_rel_error, std::abs(numeric - analytic[i]) / denom);
    diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
    an2 += analytic[i] * analytic[i];
    num2 += numeric * numeric;
    ++res.probes;
  }
  const double scale = std::sqrt(std::max({an2, num2, 1e-14}));
  res.vector_rel_error = std::sqrt(diff2) / scale;
  return res;
}

nlohmann::json to_json(const Mlp& net) {
  nlohmann::json layers = nlohmann::json::object();
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& d = net.layers()[i];
    const std::string name = "dense" + std::to_string(i);
    layers[name + ".W"] = {{"shape", {d.W.rows(), d.W.cols()}},
                           {"values", std::vector<double>(d.W.data(), d.W.data() + d.W.size())}};
    layers[name + ".b"] = {{"shape", {d.b.size()}},
                           {"values", std::vector<double>(d.b.data(), d.b.data() + d.b.size())}};
  }
  return {{"format", kMlpFormat},
          {"arch", {{"input", net.arch().input}, {"hidden", net.arch().hidden}, {"output", net.arch().output}}},
          {"layers", layers}};
}

Mlp mlp_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kMlpFormat) throw std::invalid_argument("mlp checkpoint: bad format tag");
  MlpArch arch;
  arch.input = j.at("arch").at("input").get<int>();
  arch.hidden = j.at("arch").at("hidden").get<std::vector<int>>();
  arch.output = j.at("arch").at("output").get<int>();
  Mlp net(arch, 0);
  const auto& layers = j.at("layers");
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    auto& d = net.layers()[i];
    const std::string name = "dense" + std::to_string(i);
    const auto w = layers.at(name + ".W").at("values").get<std::vector<double>>();
    const auto shape = layers.at(name + ".W").at("shape").get<std::vector<long>>();
    if (shape.size() != 2 || shape[0] != d.W.rows() || shape[1] != d.W.cols() ||
        static_cast<long>(w.size()) != d.W.size())
      throw ShapeError("mlp checkpoint: shape mismatch in " + name);
    std::copy(w.begin(), w.end(), d.W.data());
    const auto b = layers.at(name + ".b").at("values").get<std::vector<double>>();
    if (static_cast<long>(b.size()) != d.b.size()) throw ShapeError("mlp checkpoint: bias size in " + name);
    std::copy(b.begin(), b.end(), d.b.data());
  }
  return net;
}

}  // namespace marble::nn
