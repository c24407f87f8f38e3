// SPDX-License-Identifier: Apache-2.0
//
// One-hidden-layer classifier on synthetic Gaussian blobs. It produces the
// penultimate pre-activations, logits and head that the scorers consume, and
// lets the activation in front of the head be swapped for ActFun.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/QR>
#include <nlohmann/json.hpp>

#include "oodkit/actfun.hpp"
#include "oodkit/error.hpp"
#include "oodkit/linalg.hpp"
#include "oodkit/tensor.hpp"

namespace oodkit::refnet {

using MatrixXf = Eigen::MatrixXf;
using VectorXf = Eigen::VectorXf;

struct RefNetParams {
  MatrixXf w1;  // H x I
  VectorXf b1;  // H
  MatrixXf w2;  // C x H
  VectorXf b2;  // C
  ActivationSpec activation;

  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(w1.cols()); }
  std::size_t hidden_dim() const noexcept { return static_cast<std::size_t>(w1.rows()); }
  std::size_t n_classes() const noexcept { return static_cast<std::size_t>(w2.rows()); }

  void validate() const {
    if (w1.rows() < 2) throw Error(ErrorCode::bad_shape, "hidden width must be at least 2");
    if (b1.size() != w1.rows() || w2.cols() != w1.rows() || b2.size() != w2.rows()) {
      throw Error(ErrorCode::dimension_mismatch, "inconsistent layer shapes");
    }
    if (!w1.allFinite() || !b1.allFinite() || !w2.allFinite() || !b2.allFinite()) {
      throw Error(ErrorCode::non_finite, "parameters must be finite");
    }
  }

  ClassifierHead head() const {
    return ClassifierHead(to_tensor(Eigen::MatrixXd(w2.cast<double>())), to_tensor(Eigen::VectorXd(b2.cast<double>())));
  }

  friend bool operator==(const RefNetParams& a, const RefNetParams& b) {
    return a.w1 == b.w1 && a.b1 == b.b1 && a.w2 == b.w2 && a.b2 == b.b2 && a.activation == b.activation;
  }
};

/// He-style initialization for the first layer, 1/sqrt(H) scale for the head.
inline RefNetParams init_params(std::size_t input_dim, std::size_t hidden_dim, std::size_t n_classes,
                                ActivationSpec activation, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const auto I = static_cast<Eigen::Index>(input_dim);
  const auto H = static_cast<Eigen::Index>(hidden_dim);
  const auto C = static_cast<Eigen::Index>(n_classes);
  RefNetParams p;
  p.w1 = MatrixXf::NullaryExpr(H, I, [&] { return static_cast<float>(normal(rng) * std::sqrt(2.0 / static_cast<double>(I))); });
  p.b1 = VectorXf::Zero(H);
  p.w2 = MatrixXf::NullaryExpr(C, H, [&] { return static_cast<float>(normal(rng) / std::sqrt(static_cast<double>(H))); });
  p.b2 = VectorXf::Zero(C);
  p.activation = activation;
  p.validate();
  return p;
}

struct ForwardResult {
  Eigen::VectorXd pre_activation;  // z = W1 x + b1
  Eigen::VectorXd logits;          // W2 act(z) + b2
};

inline ForwardResult forward(const Eigen::VectorXd& x, const RefNetParams& params) {
  if (static_cast<std::size_t>(x.size()) != params.input_dim()) {
    throw Error(ErrorCode::dimension_mismatch, "input has " + std::to_string(x.size()) + " entries, network expects " +
                                                   std::to_string(params.input_dim()));
  }
  ForwardResult r;
  r.pre_activation = params.w1.cast<double>() * x + params.b1.cast<double>();
  const Eigen::VectorXd a = r.pre_activation.unaryExpr([&](double v) { return actfun::activate(v, params.activation); });
  r.logits = params.w2.cast<double>() * a + params.b2.cast<double>();
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic task

struct TaskConfig {
  std::size_t n_classes = 8;
  std::size_t input_dim = 16;
  std::size_t hidden_dim = 32;
  double sigma = 1.0;
  double shift = 10.0;
  double ood_scale = 1.0;
  double center_radius = 10.0;
  std::size_t n_per_class = 100;
  std::uint64_t seed = 0;

  static TaskConfig from_json(const nlohmann::json& j) {
    TaskConfig c;
    try {
      c.n_classes = j.at("n_classes").get<std::size_t>();
      c.input_dim = j.at("input_dim").get<std::size_t>();
      c.sigma = j.at("sigma").get<double>();
      c.shift = j.at("shift").get<double>();
      c.n_per_class = j.at("n_per_class").get<std::size_t>();
      c.seed = j.at("seed").get<std::uint64_t>();
      c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
      c.ood_scale = j.value("ood_scale", c.ood_scale);
      c.center_radius = j.value("center_radius", 10.0 * c.sigma);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::parse, std::string("task config: ") + e.what());
    }
    return c;
  }
};

/// Gaussian blobs around C centers on a sphere. OOD samples come from the
/// same blobs moved by `shift` halfway toward the centroid of all centers and
/// halfway along a direction orthogonal to every center, with noise scaled by
/// `ood_scale`. Shift 0 and scale 1 reproduce the ID law.
struct SyntheticTask {
  TaskConfig config;
  Eigen::MatrixXd centers;        // C x I
  Eigen::MatrixXd ood_shift_dirs;  // C x I, unit rows

  explicit SyntheticTask(TaskConfig cfg) : config(cfg) {
    if (config.n_classes < 2) throw Error(ErrorCode::invalid_argument, "need at least two classes");
    if (config.input_dim < 1 || config.hidden_dim < 2) throw Error(ErrorCode::invalid_argument, "bad layer sizes");
    if (!(config.sigma > 0.0)) throw Error(ErrorCode::invalid_argument, "sigma must be positive");
    if (!(config.center_radius > 0.0) || !(config.shift >= 0.0) || !(config.ood_scale > 0.0)) {
      throw Error(ErrorCode::invalid_argument, "radius, shift and OOD scale must be positive");
    }
    const auto C = static_cast<Eigen::Index>(config.n_classes);
    const auto I = static_cast<Eigen::Index>(config.input_dim);
    std::mt19937_64 rng(config.seed ^ 0x6a09e667f3bcc909ULL);
    std::normal_distribution<double> normal;
    centers.resize(C, I);
    for (Eigen::Index c = 0; c < C; ++c) {
      Eigen::VectorXd v = Eigen::VectorXd::NullaryExpr(I, [&] { return normal(rng); });
      centers.row(c) = config.center_radius * v.normalized().transpose();
    }
    for (Eigen::Index a = 0; a < C; ++a) {
      for (Eigen::Index b = a + 1; b < C; ++b) {
        if ((centers.row(a) - centers.row(b)).norm() < 1e-9 * config.center_radius) {
          throw Error(ErrorCode::invalid_argument, "class centers coincide; raise input_dim");
        }
      }
    }
    // Random direction with the span of the centers projected out; when the
    // centers span the whole input space it stays a plain random direction.
    Eigen::VectorXd u = Eigen::VectorXd::NullaryExpr(I, [&] { return normal(rng); });
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(centers.transpose());
    const Eigen::Index span = std::min(C, I);
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(I, span);
    const Eigen::VectorXd off = u - q * (q.transpose() * u);
    const Eigen::RowVectorXd out = (off.norm() > 1e-6 * u.norm() ? off : u).normalized().transpose();
    const Eigen::RowVectorXd centroid = centers.colwise().mean();
    ood_shift_dirs.resize(C, I);
    for (Eigen::Index c = 0; c < C; ++c) {
      const Eigen::RowVectorXd toward = (centroid - centers.row(c)).normalized();
      ood_shift_dirs.row(c) = (toward + out).normalized();
    }
  }
};

struct Dataset {
  Eigen::MatrixXd inputs;           // N x I
  std::vector<std::int64_t> labels;  // source class of every row
};

enum class Split : std::uint64_t { id_train = 0, id_test = 1, ood = 2 };

/// n_per_class samples per class, rows ordered class-major round robin.
inline Dataset sample(const SyntheticTask& task, Split split, std::uint64_t seed) {
  const auto& cfg = task.config;
  std::seed_seq seq{static_cast<std::uint64_t>(seed), static_cast<std::uint64_t>(split), std::uint64_t{0x5eed}};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal;
  const std::size_t n = cfg.n_per_class * cfg.n_classes;
  const auto I = static_cast<Eigen::Index>(cfg.input_dim);
  Dataset d;
  d.inputs.resize(static_cast<Eigen::Index>(n), I);
  d.labels.resize(n);
  const bool ood = split == Split::ood;
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<Eigen::Index>(i % cfg.n_classes);
    const double noise = cfg.sigma * (ood ? cfg.ood_scale : 1.0);
    Eigen::RowVectorXd x = task.centers.row(c);
    if (ood) x += cfg.shift * task.ood_shift_dirs.row(c);
    for (Eigen::Index j = 0; j < I; ++j) x(j) += noise * normal(rng);
    d.inputs.row(static_cast<Eigen::Index>(i)) = x;
    d.labels[i] = static_cast<std::int64_t>(c);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Training

struct Gradients {
  Eigen::MatrixXd w1, w2;
  Eigen::VectorXd b1, b2;
  double loss = 0.0;
};

/// Mean cross-entropy and its parameter gradients, all in double.
inline Gradients loss_and_gradients(const Eigen::MatrixXd& w1, const Eigen::VectorXd& b1, const Eigen::MatrixXd& w2,
                                    const Eigen::VectorXd& b2, const ActivationSpec& spec, const Eigen::MatrixXd& x,
                                    std::span<const std::int64_t> labels) {
  const auto n = x.rows();
  if (n == 0) throw Error(ErrorCode::invalid_argument, "empty batch");
  Eigen::MatrixXd z = x * w1.transpose();
  z.rowwise() += b1.transpose();
  const Eigen::MatrixXd a = actfun::apply(z, spec);
  Eigen::MatrixXd logits = a * w2.transpose();
  logits.rowwise() += b2.transpose();

  Gradients g;
  Eigen::MatrixXd dlogits(n, logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
    const double s = e.sum();
    const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
    g.loss += (m + std::log(s)) - logits(i, y);
    dlogits.row(i) = e / s;
    dlogits(i, y) -= 1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  g.loss *= inv_n;
  dlogits *= inv_n;

  g.w2 = dlogits.transpose() * a;
  g.b2 = dlogits.colwise().sum().transpose();
  const Eigen::MatrixXd dz =
      (dlogits * w2).cwiseProduct(z.unaryExpr([&](double v) { return actfun::activate_derivative(v, spec); }));
  g.w1 = dz.transpose() * x;
  g.b1 = dz.colwise().sum().transpose();
  return g;
}

struct TrainResult {
  RefNetParams params;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double final_accuracy = 0.0;
};

inline double accuracy(const RefNetParams& params, const Dataset& data) {
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < data.inputs.rows(); ++i) {
    const auto r = forward(data.inputs.row(i).transpose(), params);
    Eigen::Index k = 0;
    r.logits.maxCoeff(&k);
    hits += static_cast<std::int64_t>(k) == data.labels[static_cast<std::size_t>(i)];
  }
  return data.inputs.rows() ? static_cast<double>(hits) / static_cast<double>(data.inputs.rows()) : 0.0;
}

/// Full-batch gradient descent on mean cross-entropy. Gradients are taken in
/// double and each update is rounded back to the f32 parameters.
inline TrainResult train(const Dataset& data, RefNetParams params, std::size_t epochs, double lr) {
  params.validate();
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::invalid_argument, "learning rate must be >= 0");
  auto loss_at = [&](const RefNetParams& p) {
    return loss_and_gradients(p.w1.cast<double>(), p.b1.cast<double>(), p.w2.cast<double>(), p.b2.cast<double>(),
                              p.activation, data.inputs, data.labels);
  };
  TrainResult out;
  out.initial_loss = loss_at(params).loss;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const Gradients g = loss_at(params);
    if (!std::isfinite(g.loss)) throw Error(ErrorCode::divergence, "loss is not finite at epoch " + std::to_string(epoch), epoch);
    params.w1 = (params.w1.cast<double>() - lr * g.w1).cast<float>();
    params.b1 = (params.b1.cast<double>() - lr * g.b1).cast<float>();
    params.w2 = (params.w2.cast<double>() - lr * g.w2).cast<float>();
    params.b2 = (params.b2.cast<double>() - lr * g.b2).cast<float>();
  }
  out.final_loss = loss_at(params).loss;
  if (!std::isfinite(out.final_loss)) throw Error(ErrorCode::divergence, "loss is not finite after training", epochs);
  out.final_accuracy = accuracy(params, data);
  out.params = std::move(params);
  return out;
}

inline TrainResult train(const SyntheticTask& task, RefNetParams params_init, std::size_t epochs, double lr,
                         std::uint64_t seed) {
  return train(sample(task, Split::id_train, seed), std::move(params_init), epochs, lr);
}

/// Largest relative difference between analytic gradients and central finite
/// differences on 64-bit copies of the weights. Relative error uses the scale
/// max(|analytic|, |numeric|, 1).
inline double gradient_check(const RefNetParams& params, const Eigen::MatrixXd& x, std::span<const std::int64_t> labels,
                             double h = 1e-4) {
  if (x.rows() == 0) throw Error(ErrorCode::invalid_argument, "gradient check needs a non-empty batch");
  Eigen::MatrixXd w1 = params.w1.cast<double>(), w2 = params.w2.cast<double>();
  Eigen::VectorXd b1 = params.b1.cast<double>(), b2 = params.b2.cast<double>();
  const auto& spec = params.activation;
  const Gradients g = loss_and_gradients(w1, b1, w2, b2, spec, x, labels);
  auto loss = [&] { return loss_and_gradients(w1, b1, w2, b2, spec, x, labels).loss; };

  double worst = 0.0;
  auto probe = [&](double& w, double analytic) {
    const double saved = w;
    w = saved + h;
    const double up = loss();
    w = saved - h;
    const double down = loss();
    w = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1.0});
    worst = std::max(worst, std::abs(analytic - numeric) / scale);
  };
  for (Eigen::Index i = 0; i < w1.size(); ++i) probe(w1.data()[i], g.w1.data()[i]);
  for (Eigen::Index i = 0; i < b1.size(); ++i) probe(b1.data()[i], g.b1.data()[i]);
  for (Eigen::Index i = 0; i < w2.size(); ++i) probe(w2.data()[i], g.w2.data()[i]);
  for (Eigen::Index i = 0; i < b2.size(); ++i) probe(b2.data()[i], g.b2.data()[i]);
  return worst;
}

// ---------------------------------------------------------------------------
// Bundle export

struct Bundles {
  FeatureBundle id_train;
  FeatureBundle id_test;
  FeatureBundle ood;
  ClassifierHead head;
};

/// Runs a dataset through the network. Pre-activations are rounded to f32
/// first so cached logits match what the head computes from stored features.
inline FeatureBundle capture(const Dataset& data, const RefNetParams& params, std::string name, SplitRole role,
                             bool with_labels) {
  Eigen::MatrixXd z = data.inputs * params.w1.cast<double>().transpose();
  z.rowwise() += params.b1.cast<double>().transpose();
  Tensor features = to_tensor(z);
  const Eigen::MatrixXd zf = to_matrix(features);
  const Eigen::MatrixXd logits = actfun::logits_from_features(zf, params.activation, params.head());
  std::optional<Tensor> labels;
  if (with_labels) labels = Tensor::i64({data.labels.size()}, data.labels);
  return FeatureBundle(std::move(name), role, std::move(features), to_tensor(logits), std::move(labels));
}

inline Bundles make_bundles(const SyntheticTask& task, const RefNetParams& params) {
  const std::uint64_t seed = task.config.seed;
  return Bundles{
      capture(sample(task, Split::id_train, seed), params, "id_train", SplitRole::id_train, true),
      capture(sample(task, Split::id_test, seed), params, "id_test", SplitRole::id_test, true),
      capture(sample(task, Split::ood, seed), params, "ood", SplitRole::ood, false),
      params.head(),
  };
}

}  // namespace oodkit::refnet
