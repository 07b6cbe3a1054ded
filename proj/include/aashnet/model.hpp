#pragma once

// Skip-layer network with a single hidden layer:
//
//   y = a * sum_i x_i w_ik + (1 - a) * sum_j phi(sum_i x_i w_ij) w_jk
//
// L2 shrinkage on the skip (linear) block, smoothed L1 on both dense blocks.
// The bias is a constant trailing input and is never penalized.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "aashnet/adcore.hpp"
#include "aashnet/dataset.hpp"
#include "aashnet/errors.hpp"

namespace aashnet::model {

enum class Activation { tanh, logistic };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "logistic"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "logistic") return Activation::logistic;
  throw ValidationError("unknown activation '" + s + "' (expected tanh or logistic)");
}

struct Topology {
  std::size_t inputs = 1;
  std::size_t hidden = 0;
  Activation activation = Activation::tanh;
  bool bias = true;

  // Input width including the constant bias node.
  std::size_t width() const { return inputs + (bias ? 1 : 0); }
  std::size_t skip_offset() const { return 0; }
  std::size_t input_hidden_offset() const { return width(); }
  std::size_t hidden_out_offset() const { return width() + hidden * width(); }
  std::size_t parameter_count() const { return width() * (1 + hidden) + hidden; }

  void validate() const {
    if (inputs < 1) throw ValidationError("topology needs at least one input");
  }
  bool operator==(const Topology&) const = default;
};

// All weights in one flat vector: skip[width], input_hidden[hidden x width]
// (row-major, row j feeds hidden unit j), hidden_out[hidden].
class Weights {
 public:
  Weights() = default;
  explicit Weights(Topology topology) : topology_(topology), flat_(topology.parameter_count(), 0.0) {
    topology_.validate();
  }
  Weights(Topology topology, std::vector<double> flat) : topology_(topology), flat_(std::move(flat)) {
    topology_.validate();
    if (flat_.size() != topology_.parameter_count()) {
      throw ShapeMismatch("weight vector has " + std::to_string(flat_.size()) + " entries, topology needs " +
                          std::to_string(topology_.parameter_count()));
    }
  }

  const Topology& topology() const { return topology_; }
  std::span<double> flat() { return flat_; }
  std::span<const double> flat() const { return flat_; }
  std::size_t size() const { return flat_.size(); }

  std::span<double> skip() { return flat().subspan(topology_.skip_offset(), topology_.width()); }
  std::span<const double> skip() const { return flat().subspan(topology_.skip_offset(), topology_.width()); }
  std::span<double> input_hidden() {
    return flat().subspan(topology_.input_hidden_offset(), topology_.hidden * topology_.width());
  }
  std::span<const double> input_hidden() const {
    return flat().subspan(topology_.input_hidden_offset(), topology_.hidden * topology_.width());
  }
  double input_hidden(std::size_t j, std::size_t i) const { return input_hidden()[j * topology_.width() + i]; }
  std::span<double> hidden_out() { return flat().subspan(topology_.hidden_out_offset(), topology_.hidden); }
  std::span<const double> hidden_out() const { return flat().subspan(topology_.hidden_out_offset(), topology_.hidden); }

  bool operator==(const Weights&) const = default;

 private:
  Topology topology_;
  std::vector<double> flat_;
};

// Shrinkage hyperparameters, held in unconstrained coordinates:
// theta_lambda = log(lambda), theta_alpha = logit(alpha).
struct HyperParams {
  double theta_lambda1 = -std::numeric_limits<double>::infinity();
  double theta_lambda2 = -std::numeric_limits<double>::infinity();
  double theta_alpha = 0.0;
  double eps_smooth = 1e-6;

  static HyperParams from_natural(double lambda1, double lambda2, double alpha, double eps_smooth = 1e-6) {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ValidationError("shrinkage strengths must be >= 0");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
    if (!(eps_smooth > 0.0)) throw ValidationError("eps_smooth must be > 0");
    HyperParams h;
    h.theta_lambda1 = std::log(lambda1);
    h.theta_lambda2 = std::log(lambda2);
    h.theta_alpha = std::log(alpha) - std::log1p(-alpha);
    h.eps_smooth = eps_smooth;
    return h;
  }

  double lambda1() const { return std::exp(theta_lambda1); }
  double lambda2() const { return std::exp(theta_lambda2); }
  double alpha() const { return 1.0 / (1.0 + std::exp(-theta_alpha)); }
};

inline double activate(Activation a, double z) {
  return a == Activation::tanh ? std::tanh(z) : 1.0 / (1.0 + std::exp(-z));
}

struct PredictionParts {
  double linear = 0.0;
  double dense = 0.0;
};

// Skip-layer and dense contributions before mixing by alpha.
inline PredictionParts predict_parts(const Weights& w, std::span<const double> x) {
  const Topology& t = w.topology();
  if (x.size() != t.inputs) {
    throw ShapeMismatch("predictor has " + std::to_string(x.size()) + " entries, topology expects " +
                        std::to_string(t.inputs));
  }
  PredictionParts p;
  const auto skip = w.skip();
  for (std::size_t i = 0; i < t.inputs; ++i) p.linear += x[i] * skip[i];
  if (t.bias) p.linear += skip[t.inputs];
  const auto out = w.hidden_out();
  for (std::size_t j = 0; j < t.hidden; ++j) {
    double z = 0.0;
    for (std::size_t i = 0; i < t.inputs; ++i) z += x[i] * w.input_hidden(j, i);
    if (t.bias) z += w.input_hidden(j, t.inputs);
    p.dense += activate(t.activation, z) * out[j];
  }
  return p;
}

inline double predict(const Weights& w, const HyperParams& h, std::span<const double> x) {
  const PredictionParts p = predict_parts(w, x);
  const double a = h.alpha();
  return a * p.linear + (1.0 - a) * p.dense;
}

inline double mse(const Weights& w, const HyperParams& h, const Dataset& data) {
  if (data.rows == 0) throw ValidationError("mse of an empty dataset");
  double s = 0.0;
  for (std::size_t i = 0; i < data.rows; ++i) {
    const double r = data.y[i] - predict(w, h, data.row(i));
    s += r * r;
  }
  return s / static_cast<double>(data.rows);
}

// Weight positions the penalties act on.
struct PenaltyMask {
  std::vector<std::size_t> skip;   // L2
  std::vector<std::size_t> dense;  // smoothed L1

  explicit PenaltyMask(const Topology& t) {
    for (std::size_t i = 0; i < t.inputs; ++i) skip.push_back(t.skip_offset() + i);
    for (std::size_t j = 0; j < t.hidden; ++j) {
      for (std::size_t i = 0; i < t.inputs; ++i) dense.push_back(t.input_hidden_offset() + j * t.width() + i);
    }
    for (std::size_t j = 0; j < t.hidden; ++j) dense.push_back(t.hidden_out_offset() + j);
  }
};

inline double penalty(const Weights& w, const HyperParams& h) {
  const PenaltyMask mask(w.topology());
  const auto flat = w.flat();
  double l2 = 0.0;
  for (std::size_t k : mask.skip) l2 += flat[k] * flat[k];
  double l1 = 0.0;
  for (std::size_t k : mask.dense) l1 += std::sqrt(flat[k] * flat[k] + h.eps_smooth);
  return 0.5 * h.lambda2() * l2 + h.lambda1() * l1;
}

inline double regularized_loss(const Weights& w, const HyperParams& h, const Dataset& data) {
  return mse(w, h, data) + penalty(w, h);
}

struct ValueGrad {
  double value = 0.0;
  std::vector<double> grad;
};

struct MixedPartials {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double alpha = 0.0;
};

// A dataset bound to a topology, ready for repeated differentiation. Holds
// the bias-augmented design and the gather indices used on the tape.
class LossProblem {
 public:
  LossProblem(const Topology& topology, const Dataset& data) : topology_(topology), mask_(topology) {
    topology_.validate();
    if (data.cols != topology.inputs) {
      throw ShapeMismatch("dataset has " + std::to_string(data.cols) + " predictors, topology expects " +
                          std::to_string(topology.inputs));
    }
    if (data.rows == 0) throw ValidationError("loss over an empty dataset");
    const std::size_t width = topology.width();
    design_ = ad::Tensor<double>(data.rows, width);
    for (std::size_t r = 0; r < data.rows; ++r) {
      for (std::size_t i = 0; i < topology.inputs; ++i) design_(r, i) = data.at(r, i);
      if (topology.bias) design_(r, topology.inputs) = 1.0;
    }
    target_ = ad::Tensor<double>::column(data.y);

    std::vector<std::size_t> skip(width);
    for (std::size_t i = 0; i < width; ++i) skip[i] = topology.skip_offset() + i;
    // Transposed gather so the tape sees a width x hidden matrix.
    std::vector<std::size_t> in_hidden(width * topology.hidden);
    for (std::size_t i = 0; i < width; ++i) {
      for (std::size_t j = 0; j < topology.hidden; ++j) {
        in_hidden[i * topology.hidden + j] = topology.input_hidden_offset() + j * width + i;
      }
    }
    std::vector<std::size_t> out(topology.hidden);
    for (std::size_t j = 0; j < topology.hidden; ++j) out[j] = topology.hidden_out_offset() + j;
    skip_idx_ = std::make_shared<const std::vector<std::size_t>>(std::move(skip));
    in_hidden_idx_ = std::make_shared<const std::vector<std::size_t>>(std::move(in_hidden));
    out_idx_ = std::make_shared<const std::vector<std::size_t>>(std::move(out));
    l2_idx_ = std::make_shared<const std::vector<std::size_t>>(mask_.skip);
    l1_idx_ = std::make_shared<const std::vector<std::size_t>>(mask_.dense);
  }

  const Topology& topology() const { return topology_; }
  std::size_t rows() const { return design_.rows; }

  // Predictions for every row, as an n x 1 node.
  template <class T>
  ad::Var<T> record_predictions(ad::Tape<T>& tape, ad::Var<T> w, ad::Var<T> alpha) const {
    const std::size_t width = topology_.width();
    const std::size_t hidden = topology_.hidden;
    const ad::Var<T> x = tape.constant(convert<T>(design_));
    const ad::Var<T> linear = ad::matmul(x, ad::gather(w, skip_idx_, width, 1));
    if (hidden == 0) return alpha * linear;
    const ad::Var<T> pre = ad::matmul(x, ad::gather(w, in_hidden_idx_, width, hidden));
    const ad::Var<T> act = topology_.activation == Activation::tanh ? ad::tanh(pre) : ad::logistic(pre);
    const ad::Var<T> dense = ad::matmul(act, ad::gather(w, out_idx_, hidden, 1));
    return alpha * linear + (1.0 - alpha) * dense;
  }

  template <class T>
  ad::Var<T> record_mse(ad::Tape<T>& tape, ad::Var<T> w, ad::Var<T> alpha) const {
    const ad::Var<T> y = tape.constant(convert<T>(target_));
    const ad::Var<T> resid = y - record_predictions(tape, w, alpha);
    return (1.0 / static_cast<double>(rows())) * ad::sum(ad::square(resid));
  }

  template <class T>
  ad::Var<T> record_penalty(ad::Tape<T>& tape, ad::Var<T> w, const HyperParams& h) const {
    ad::Var<T> total = tape.constant(T(0.0));
    if (!l2_idx_->empty()) {
      const ad::Var<T> skip = ad::gather(w, l2_idx_, l2_idx_->size(), 1);
      total = total + (0.5 * h.lambda2()) * ad::sum(ad::square(skip));
    }
    if (!l1_idx_->empty()) {
      const ad::Var<T> dense = ad::gather(w, l1_idx_, l1_idx_->size(), 1);
      total = total + h.lambda1() * ad::sum(ad::smooth_abs(dense, h.eps_smooth));
    }
    return total;
  }

  // Training loss: mse, plus the penalty when `with_penalty`.
  template <class T>
  ad::Var<T> record_loss(ad::Tape<T>& tape, ad::Var<T> w, ad::Var<T> alpha, const HyperParams& h,
                         bool with_penalty) const {
    const ad::Var<T> m = record_mse(tape, w, alpha);
    return with_penalty ? m + record_penalty(tape, w, h) : m;
  }

  double loss(std::span<const double> w, const HyperParams& h, bool with_penalty = true) const {
    check(w);
    ad::Tape<double> tape;
    const auto wv = tape.input(w);
    const auto av = tape.input(ad::Tensor<double>::scalar(h.alpha()));
    return record_loss(tape, wv, av, h, with_penalty).value()[0];
  }

  ValueGrad value_and_grad(std::span<const double> w, const HyperParams& h, bool with_penalty = true) const {
    check(w);
    ad::Tape<double> tape;
    const auto wv = tape.input(w);
    const auto loss = record_loss(tape, wv, tape.constant(h.alpha()), h, with_penalty);
    ValueGrad out{loss.value()[0], ad::reverse_grad(tape, loss)};
    return out;
  }

  // Also returns the partial derivative with respect to alpha at fixed weights.
  ValueGrad value_and_grad(std::span<const double> w, const HyperParams& h, bool with_penalty,
                           double& d_alpha) const {
    check(w);
    ad::Tape<double> tape;
    const auto wv = tape.input(w);
    const auto av = tape.input(ad::Tensor<double>::scalar(h.alpha()));
    const auto loss = record_loss(tape, wv, av, h, with_penalty);
    ValueGrad out{loss.value()[0], ad::reverse_grad(tape, loss)};
    d_alpha = out.grad.back();
    out.grad.pop_back();
    return out;
  }

  // Hessian of the loss with respect to the weights, applied to `v`.
  std::vector<double> hvp(std::span<const double> w, const HyperParams& h, std::span<const double> v,
                          bool with_penalty = true) const {
    check(w);
    check(v);
    ad::Tape<ad::Dual> tape;
    ad::Tensor<ad::Dual> wd(w.size(), 1);
    for (std::size_t k = 0; k < w.size(); ++k) wd[k] = ad::Dual(w[k], v[k]);
    const auto wv = tape.input(std::move(wd));
    const auto loss = record_loss(tape, wv, tape.constant(ad::Dual(h.alpha())), h, with_penalty);
    return tangent_part(ad::reverse_grad(tape, loss));
  }

  // d(grad_w loss)/d(alpha). The penalty does not involve alpha.
  std::vector<double> grad_alpha_derivative(std::span<const double> w, const HyperParams& h) const {
    check(w);
    ad::Tape<ad::Dual> tape;
    ad::Tensor<ad::Dual> wd(w.size(), 1);
    for (std::size_t k = 0; k < w.size(); ++k) wd[k] = ad::Dual(w[k], 0.0);
    const auto wv = tape.input(std::move(wd));
    const auto loss = record_mse(tape, wv, tape.constant(ad::Dual(h.alpha(), 1.0)));
    return tangent_part(ad::reverse_grad(tape, loss));
  }

  // v . d(grad_w loss)/d(lambda1, lambda2, alpha).
  MixedPartials mixed_partial_vec(std::span<const double> w, const HyperParams& h, std::span<const double> v) const {
    check(w);
    check(v);
    MixedPartials out;
    for (std::size_t k : mask_.skip) out.lambda2 += v[k] * w[k];
    for (std::size_t k : mask_.dense) out.lambda1 += v[k] * w[k] / std::sqrt(w[k] * w[k] + h.eps_smooth);
    bool any = false;
    for (double x : v) any = any || x != 0.0;
    if (any) {
      const auto d = grad_alpha_derivative(w, h);
      for (std::size_t k = 0; k < v.size(); ++k) out.alpha += v[k] * d[k];
    }
    return out;
  }

 private:
  void check(std::span<const double> w) const {
    if (w.size() != topology_.parameter_count()) {
      throw ShapeMismatch("weight-shaped vector has " + std::to_string(w.size()) + " entries, expected " +
                          std::to_string(topology_.parameter_count()));
    }
  }

  template <class T>
  static ad::Tensor<T> convert(const ad::Tensor<double>& t) {
    if constexpr (std::is_same_v<T, double>) {
      return t;
    } else {
      ad::Tensor<T> out(t.rows, t.cols);
      for (std::size_t k = 0; k < t.size(); ++k) out[k] = T(t[k]);
      return out;
    }
  }

  static std::vector<double> tangent_part(const std::vector<ad::Dual>& g) {
    std::vector<double> out(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) out[k] = g[k].tan;
    return out;
  }

  Topology topology_;
  PenaltyMask mask_;
  ad::Tensor<double> design_;
  ad::Tensor<double> target_;
  ad::Index skip_idx_, in_hidden_idx_, out_idx_, l2_idx_, l1_idx_;
};

// Gradient of the regularized training loss over all weights.
inline std::vector<double> grad_w(const Weights& w, const HyperParams& h, const Dataset& data) {
  auto g = LossProblem(w.topology(), data).value_and_grad(w.flat(), h).grad;
  for (double x : g) {
    if (!std::isfinite(x)) throw NonFiniteValue("non-finite weight gradient");
  }
  return g;
}

inline MixedPartials mixed_partial_vec(const Weights& w, const HyperParams& h, const Dataset& data,
                                       std::span<const double> v) {
  return LossProblem(w.topology(), data).mixed_partial_vec(w.flat(), h, v);
}

// Zero-mean Gaussian weights with sd 1/sqrt(fan-in). The output-side blocks
// (skip and hidden_out) are scaled by `output_scale`; 2 compensates the 0.5
// factor of a neutral alpha.
inline Weights initialize(const Topology& topology, std::uint64_t seed, double output_scale = 2.0) {
  Weights w(topology);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double skip_sd = output_scale / std::sqrt(static_cast<double>(topology.width()));
  const double in_sd = 1.0 / std::sqrt(static_cast<double>(topology.width()));
  const double out_sd = topology.hidden ? output_scale / std::sqrt(static_cast<double>(topology.hidden)) : 0.0;
  for (double& x : w.skip()) x = skip_sd * normal(rng);
  for (double& x : w.input_hidden()) x = in_sd * normal(rng);
  for (double& x : w.hidden_out()) x = out_sd * normal(rng);
  return w;
}

// ---------------------------------------------------------------------------
// JSON. Doubles are written in shortest round-trip form, so reading back is
// bit-exact.

inline nlohmann::json to_json(const Topology& t) {
  return {{"inputs", t.inputs}, {"hidden", t.hidden}, {"activation", to_string(t.activation)}, {"bias", t.bias}};
}

inline Topology topology_from_json(const nlohmann::json& j) {
  Topology t;
  t.inputs = j.at("inputs").get<std::size_t>();
  t.hidden = j.at("hidden").get<std::size_t>();
  t.activation = activation_from_string(j.at("activation").get<std::string>());
  t.bias = j.at("bias").get<bool>();
  t.validate();
  return t;
}

inline nlohmann::json to_json(const HyperParams& h) {
  return {{"lambda1", h.lambda1()}, {"lambda2", h.lambda2()}, {"alpha", h.alpha()}, {"eps_smooth", h.eps_smooth}};
}

inline HyperParams hyper_from_json(const nlohmann::json& j) {
  return HyperParams::from_natural(j.at("lambda1").get<double>(), j.at("lambda2").get<double>(),
                                   j.at("alpha").get<double>(), j.value("eps_smooth", 1e-6));
}

inline nlohmann::json to_json(const Weights& w, const HyperParams* h = nullptr) {
  const Topology& t = w.topology();
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t j = 0; j < t.hidden; ++j) {
    const auto r = w.input_hidden().subspan(j * t.width(), t.width());
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  nlohmann::json doc = {
      {"format", "aashnet.weights/1"},
      {"topology", to_json(t)},
      {"skip", std::vector<double>(w.skip().begin(), w.skip().end())},
      {"input_hidden", rows},
      {"hidden_out", std::vector<double>(w.hidden_out().begin(), w.hidden_out().end())},
  };
  if (h) doc["hyper"] = to_json(*h);
  return doc;
}

inline Weights weights_from_json(const nlohmann::json& doc) {
  if (doc.value("format", std::string()) != "aashnet.weights/1") throw ValidationError("not an aashnet weights document");
  const Topology t = topology_from_json(doc.at("topology"));
  Weights w(t);
  const auto skip = doc.at("skip").get<std::vector<double>>();
  const auto rows = doc.at("input_hidden").get<std::vector<std::vector<double>>>();
  const auto out = doc.at("hidden_out").get<std::vector<double>>();
  if (skip.size() != t.width() || rows.size() != t.hidden || out.size() != t.hidden) {
    throw ShapeMismatch("weight arrays do not match the topology header");
  }
  std::copy(skip.begin(), skip.end(), w.skip().begin());
  for (std::size_t j = 0; j < t.hidden; ++j) {
    if (rows[j].size() != t.width()) throw ShapeMismatch("input_hidden row has the wrong width");
    std::copy(rows[j].begin(), rows[j].end(), w.input_hidden().begin() + static_cast<std::ptrdiff_t>(j * t.width()));
  }
  std::copy(out.begin(), out.end(), w.hidden_out().begin());
  return w;
}

}  // namespace aashnet::model
