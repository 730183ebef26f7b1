#pragma once

#include "evio/tape.hpp"

namespace evio {

// Flat registry of named parameter tensors; drives optimizers and weight IO.
// Running statistics register as non-trainable buffers.
struct ParamRegistry {
  struct Item {
    std::string name;
    Tensor* tensor;
    bool trainable;
  };
  std::vector<Item> items;

  void add(const std::string& name, Tensor& t, bool trainable = true) {
    items.push_back({name, &t, trainable});
  }
};

struct Conv2dLayer {
  Tensor w, b;
  int stride = 1;

  void init(int cout, int cin, int k, Rng& rng) {
    // He initialization for ReLU stacks.
    const double std = std::sqrt(2.0 / double(cin * k * k));
    w = Tensor::randn({cout, cin, k, k}, rng, std);
    b = Tensor::zeros({cout});
  }
  void register_params(ParamRegistry& r, const std::string& prefix) {
    r.add(prefix + ".w", w);
    r.add(prefix + ".b", b);
  }
  Var operator()(Tape& t, Var x) const { return t.conv2d(x, t.param(w), t.param(b), stride); }
};

struct BatchNorm2d {
  Tensor gamma, beta, run_mean, run_var;
  double momentum = 0.9;

  void init(int c) {
    gamma = Tensor::full({c}, 1.0);
    beta = Tensor::zeros({c});
    run_mean = Tensor::zeros({c});
    run_var = Tensor::full({c}, 1.0);
  }
  void register_params(ParamRegistry& r, const std::string& prefix) {
    r.add(prefix + ".gamma", gamma);
    r.add(prefix + ".beta", beta);
    r.add(prefix + ".run_mean", run_mean, false);
    r.add(prefix + ".run_var", run_var, false);
  }
  Var operator()(Tape& t, Var x, bool training) {
    return t.batchnorm2d(x, t.param(gamma), t.param(beta), run_mean, run_var, training, momentum);
  }
};

struct LinearLayer {
  Tensor w, b;

  void init(int dout, int din, Rng& rng) {
    init_scaled(dout, din, rng, std::sqrt(2.0 / double(din)));
  }
  void init_scaled(int dout, int din, Rng& rng, double std) {
    w = Tensor::randn({dout, din}, rng, std);
    b = Tensor::zeros({dout});
  }
  void init_zero(int dout, int din) {
    w = Tensor::zeros({dout, din});
    b = Tensor::zeros({dout});
  }
  void register_params(ParamRegistry& r, const std::string& prefix) {
    r.add(prefix + ".w", w);
    r.add(prefix + ".b", b);
  }
  Var operator()(Tape& t, Var x) const { return t.linear(x, t.param(w), t.param(b)); }
};

// Plain MLP over row vectors: linear + ReLU between hidden layers, linear output.
struct Mlp {
  std::vector<LinearLayer> layers;

  // zero_last starts the output layer at zero (identity residual blocks)
  void init(const std::vector<int>& dims, Rng& rng, bool zero_last = false) {
    require(dims.size() >= 2, "mlp: need at least in/out dims");
    layers.resize(dims.size() - 1);
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
      layers[i].init(dims[i + 1], dims[i], rng);
    if (zero_last) layers.back().init_zero(dims[dims.size() - 1], dims[dims.size() - 2]);
  }
  void register_params(ParamRegistry& r, const std::string& prefix) {
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].register_params(r, prefix + ".l" + std::to_string(i));
  }
  Var operator()(Tape& t, Var x) const {
    Var h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i](t, h);
      if (i + 1 < layers.size()) h = t.relu(h);
    }
    return h;
  }
};

}  // namespace evio
