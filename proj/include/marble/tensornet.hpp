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

#pragma once

// Small fixed-graph network stack: ReLU MLPs with hand-derived backward
// passes, Cholesky-parameterized Gaussian heads, Gumbel-Softmax, Adam.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "marble/rng.hpp"

namespace marble::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kCholeskyFloor = 1e-4;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParameterizationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MlpArch {
  int input = 0;
  std::vector<int> hidden{256, 256};
  int output = 0;

  bool operator==(const MlpArch&) const = default;
};

struct Dense {
  Matrix W;  // out x in
  Vector b;
};

/// Gradients (and Adam moments) share the parameter layout.
using LayerSet = std::vector<Dense>;

struct ForwardCache {
  std::vector<Matrix> inputs;      // input to each layer
  std::vector<Matrix> preactivations;
};

class Mlp {
 public:
  Mlp() = default;
  /// Glorot-uniform weights, zero biases.
  Mlp(const MlpArch& arch, std::uint64_t seed);

  const MlpArch& arch() const { return arch_; }
  LayerSet& layers() { return layers_; }
  const LayerSet& layers() const { return layers_; }

  Vector forward(const Vector& x) const;
  /// Columns are samples.
  Matrix forward_batch(const Matrix& x) const;
  Matrix forward_batch(const Matrix& x, ForwardCache& cache) const;
  /// Parameter gradients for upstream gradient `d_out` (output x batch).
  LayerSet backward(const ForwardCache& cache, const Matrix& d_out) const;

  /// Signs of every hidden preactivation; used to detect ReLU kinks.
  std::vector<bool> activation_pattern(const Matrix& x) const;

  std::size_t parameter_count() const;
  std::vector<double> flat() const;
  void set_flat(std::span<const double> values);

  bool operator==(const Mlp& o) const;

 private:
  MlpArch arch_;
  LayerSet layers_;
};

LayerSet zeros_like(const LayerSet& layers);
void accumulate(LayerSet& into, const LayerSet& add, double scale = 1.0);
std::vector<double> flatten(const LayerSet& layers);

// ---- Gaussian head -------------------------------------------------------

constexpr int gaussian_output_dim(int d) { return d + d * (d + 1) / 2; }

struct GaussianHead {
  Vector mean;
  Matrix chol;  // lower triangular

  /// Raw network output: mean followed by the lower triangle row by row;
  /// diagonal entries pass through exp(raw) + eps.
  static GaussianHead from_output(const Vector& out, int d, double eps = kCholeskyFloor);
  Matrix covariance() const { return chol * chol.transpose(); }
  Vector sample(Rng& rng) const;
};

double gaussian_logpdf(const GaussianHead& head, const Vector& a,
                       double eps = kCholeskyFloor);
/// d logpdf / d raw output, for the parameterization of from_output.
Vector gaussian_logpdf_grad(const Vector& out, int d, const Vector& a,
                            double eps = kCholeskyFloor);

// ---- categorical ---------------------------------------------------------

Vector softmax(const Vector& logits);
Vector log_softmax(const Vector& logits);
Vector sample_gumbel(int k, Rng& rng);
/// softmax((logits + noise) / tau).
Vector gumbel_softmax(const Vector& logits, const Vector& noise, double tau);
Vector gumbel_softmax_sample(const Vector& logits, double tau, Rng& rng);
/// Gradient w.r.t. logits of sum_k c_k log y_k where y = gumbel_softmax(...).
Vector gumbel_softmax_log_grad(const Vector& y, const Vector& coeffs, double tau);
/// Exact categorical draw via Gumbel-max.
int gumbel_max_sample(const Vector& logits, Rng& rng);

// ---- Adam ----------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig hyper;
  LayerSet m;
  LayerSet v;
  long step = 0;

  AdamState() = default;
  AdamState(const Mlp& net, const AdamConfig& cfg);
};

/// Bias-corrected Adam descent step: params -= lr * m_hat / (sqrt(v_hat) + eps).
void adam_step(Mlp& net, const LayerSet& grads, AdamState& state);

// ---- gradient checking ---------------------------------------------------

struct GradCheckOptions {
  double h = 1e-5;
  int probe_count = 32;
  std::uint64_t seed = 0;
  /// Returns a kink signature at a parameter point; coordinates whose +-h
  /// perturbations change the signature are resampled.
  std::function<std::vector<bool>(std::span<const double>)> pattern;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  /// |g - fd| / max(|g|, |fd|) over the probed coordinates as one vector.
  double vector_rel_error = 0.0;
  int probes = 0;
  int resampled = 0;
};

GradCheckResult grad_check(const std::function<double(std::span<const double>)>& objective,
                           std::span<const double> analytic_grad,
                           std::span<const double> params, const GradCheckOptions& opts);

// ---- checkpoints ---------------------------------------------------------

inline constexpr const char* kMlpFormat = "marble-mlp/1";
nlohmann::json to_json(const Mlp& net);
Mlp mlp_from_json(const nlohmann::json& j);

}  // namespace marble::nn
