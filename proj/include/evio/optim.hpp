#pragma once

#include "evio/weights.hpp"

namespace evio {

// Gradient-descent-with-momentum and adaptive-moments updates over a parameter
// registry. State tensors are keyed by parameter name so they can round-trip
// through checkpoints alongside the weights.
class Optimizer {
 public:
  enum class Kind { kSgdMomentum, kAdam };

  Optimizer(Kind kind, double lr, double beta1 = 0.9, double beta2 = 0.999,
            double eps = 1e-8)
      : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  static Optimizer sgd_momentum(double lr, double momentum = 0.9) {
    return Optimizer(Kind::kSgdMomentum, lr, momentum);
  }
  static Optimizer adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999) {
    return Optimizer(Kind::kAdam, lr, beta1, beta2);
  }

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  std::int64_t step_count() const { return step_; }

  // Applies one update using gradients pulled from the tape.
  void step(const ParamRegistry& reg, const Tape& tape) {
    ++step_;
    for (const auto& item : reg.items) {
      if (!item.trainable || !tape.has_param(*item.tensor)) continue;
      Tensor g = tape.param_grad(*item.tensor);
      Tensor& w = *item.tensor;
      if (kind_ == Kind::kSgdMomentum) {
        Tensor& m = state(item.name + "#m", w.shape());
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = beta1_ * m[i] + g[i];
          w[i] -= lr_ * m[i];
        }
      } else {
        Tensor& m = state(item.name + "#m", w.shape());
        Tensor& v = state(item.name + "#v", w.shape());
        const double bc1 = 1.0 - std::pow(beta1_, double(step_));
        const double bc2 = 1.0 - std::pow(beta2_, double(step_));
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
          v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
          const double mh = m[i] / bc1;
          const double vh = v[i] / bc2;
          w[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
        }
      }
    }
  }

  // Checkpoint support: optimizer state is stored as extra weight records.
  void export_state(WeightStore& ws, const std::string& prefix) const {
    Tensor meta({1});
    meta[0] = double(step_);
    ws.put(prefix + "#step", meta);
    for (const auto& [name, t] : state_) ws.put(prefix + "#" + name, t);
  }
  void import_state(const WeightStore& ws, const std::string& prefix) {
    state_.clear();
    step_ = 0;
    if (!ws.has(prefix + "#step")) return;
    step_ = std::int64_t(ws.get(prefix + "#step")[0]);
    const std::string pre = prefix + "#";
    for (const auto& [name, t] : ws.tensors()) {
      if (name.rfind(pre, 0) == 0 && name != prefix + "#step")
        state_[name.substr(pre.size())] = t;
    }
  }

 private:
  Tensor& state(const std::string& key, const std::vector<int>& shape) {
    auto it = state_.find(key);
    if (it == state_.end()) it = state_.emplace(key, Tensor::zeros(shape)).first;
    return it->second;
  }

  Kind kind_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t step_ = 0;
  std::map<std::string, Tensor> state_;
};

}  // namespace evio
