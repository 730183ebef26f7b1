#include <catch2/catch_amalgamated.hpp>

#include "evio/optim.hpp"

using namespace evio;

namespace {

Tensor randn(std::vector<int> shape, std::uint64_t seed, double std = 1.0) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, std);
}

// Plain quadruple-loop convolution used as the independent oracle.
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  Tensor out({cout, ho, wo});
  for (int co = 0; co < cout; ++co)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        double s = b[std::size_t(co)];
        for (int ci = 0; ci < cin; ++ci)
          for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
              const int si = i * stride + ki - pad;
              const int sj = j * stride + kj - pad;
              if (si >= 0 && si < h && sj >= 0 && sj < wd)
                s += x.at(ci, si, sj) * w.vec()[((std::size_t(co) * cin + ci) * k + ki) * k + kj];
            }
        out.at(co, i, j) = s;
      }
  return out;
}

}  // namespace

TEST_CASE("conv2d identity kernel", "[nn]") {
  Tensor x = randn({1, 5, 7}, 1);
  Tensor w({1, 1, 1, 1}, {1.0});
  Tensor b = Tensor::zeros({1});
  Tape t(false);
  Var y = t.conv2d(t.leaf(x), t.leaf(w), t.leaf(b), 1, 0);
  REQUIRE(t.value(y).shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    REQUIRE(t.value(y)[i] == Catch::Approx(x[i]).margin(1e-12));
}

TEST_CASE("conv2d all-ones kernel on constant image", "[nn]") {
  const double v = 0.37;
  Tensor x = Tensor::full({1, 6, 6}, v);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor b = Tensor::zeros({1});
  Tape t(false);
  Var y = t.conv2d(t.leaf(x), t.leaf(w), t.leaf(b), 1, 1);
  // interior pixels see all nine taps
  for (int i = 1; i < 5; ++i)
    for (int j = 1; j < 5; ++j)
      REQUIRE(t.value(y).at(0, i, j) == Catch::Approx(9.0 * v).epsilon(1e-12));
  REQUIRE(t.value(y).at(0, 0, 0) == Catch::Approx(4.0 * v).epsilon(1e-12));
}

TEST_CASE("conv2d forward matches naive oracle", "[nn]") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor x = randn({1, 4, 4}, 100 + seed);
    Tensor w = randn({2, 1, 3, 3}, 200 + seed);
    Tensor b = randn({2}, 300 + seed);
    for (int stride : {1, 2}) {
      Tape t(false);
      Var y = t.conv2d(t.leaf(x), t.leaf(w), t.leaf(b), stride, 1);
      Tensor ref = conv_oracle(x, w, b, stride, 1);
      REQUIRE(t.value(y).shape() == ref.shape());
      for (std::size_t i = 0; i < ref.size(); ++i)
        REQUIRE(t.value(y)[i] == Catch::Approx(ref[i]).margin(1e-6));
    }
  }
}

TEST_CASE("conv2d gradients", "[nn]") {
  Tensor x = randn({2, 5, 5}, 7);
  Tensor w = randn({3, 2, 3, 3}, 8, 0.5);
  Tensor b = randn({3}, 9, 0.1);
  auto wrt_input = [&](Tape& t, Var xv) {
    Var y = t.conv2d(xv, t.leaf(w), t.leaf(b), 1, 1);
    return t.reduce_mean(t.mul(y, y));
  };
  auto wrt_kernel = [&](Tape& t, Var wv) {
    Var y = t.conv2d(t.leaf(x), wv, t.leaf(b), 1, 1);
    return t.reduce_mean(t.mul(y, y));
  };
  REQUIRE(grad_check(wrt_input, x).max_rel_err <= 1e-4);
  REQUIRE(grad_check(wrt_kernel, w).max_rel_err <= 1e-4);
}

TEST_CASE("attention single key broadcasts the value row", "[nn]") {
  Tensor q = randn({4, 8}, 11);
  Tensor k = randn({1, 8}, 12);
  Tensor v = randn({1, 8}, 13);
  Tape t(false);
  Var out = attention(t, t.leaf(q), t.leaf(k), t.leaf(v), 2);
  REQUIRE(t.value(out).shape() == std::vector<int>{4, 8});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 8; ++j)
      REQUIRE(t.value(out).at(i, j) == Catch::Approx(v.at(0, j)).margin(1e-12));
}

TEST_CASE("attention with identical keys averages values", "[nn]") {
  const int m = 5;
  Tensor q = randn({3, 4}, 21);
  Tensor krow = randn({1, 4}, 22);
  Tensor k({m, 4});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < 4; ++j) k.at(i, j) = krow.at(0, j);
  Tensor v = randn({m, 4}, 23);
  Tape t(false);
  Var out = attention(t, t.leaf(q), t.leaf(k), t.leaf(v), 1);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      double mean = 0.0;
      for (int r = 0; r < m; ++r) mean += v.at(r, j);
      mean /= m;
      REQUIRE(t.value(out).at(i, j) == Catch::Approx(mean).margin(1e-9));
    }
}

TEST_CASE("attention gradients vs finite differences", "[nn]") {
  Tensor q = randn({3, 8}, 31);
  Tensor k = randn({4, 8}, 32);
  Tensor v = randn({4, 8}, 33);
  auto wrt_q = [&](Tape& t, Var qv) {
    Var out = attention(t, qv, t.leaf(k), t.leaf(v), 2);
    return t.reduce_mean(t.mul(out, out));
  };
  auto wrt_k = [&](Tape& t, Var kv) {
    Var out = attention(t, t.leaf(q), kv, t.leaf(v), 2);
    return t.reduce_mean(t.mul(out, out));
  };
  auto wrt_v = [&](Tape& t, Var vv) {
    Var out = attention(t, t.leaf(q), t.leaf(k), vv, 2);
    return t.reduce_mean(t.mul(out, out));
  };
  REQUIRE(grad_check(wrt_q, q).max_rel_err <= 1e-4);
  REQUIRE(grad_check(wrt_k, k).max_rel_err <= 1e-4);
  REQUIRE(grad_check(wrt_v, v).max_rel_err <= 1e-4);
}

TEST_CASE("grad_check analytic quadratic", "[nn]") {
  Tensor x({2}, {1.0, 2.0});
  auto f = [](Tape& t, Var xv) { return t.reduce_sum(t.mul(xv, xv)); };
  Tape t(true);
  Var xv = t.leaf(x, true);
  t.backward(f(t, xv));
  Tensor g = t.grad_of(xv);
  REQUIRE(g[0] == Catch::Approx(2.0).epsilon(1e-12));
  REQUIRE(g[1] == Catch::Approx(4.0).epsilon(1e-12));
  REQUIRE(grad_check(f, x).max_rel_err <= 1e-8);
}

TEST_CASE("cross entropy over softmax gradient", "[nn]") {
  Tensor logits = randn({6, 9}, 41);
  std::vector<int> labels(9);
  Rng rng(42);
  for (auto& l : labels) l = int(rng.index(6));
  auto f = [&](Tape& t, Var lv) { return t.cross_entropy_cols(lv, labels); };
  REQUIRE(grad_check(f, logits).max_rel_err <= 1e-4);
}

TEST_CASE("conv-bn-relu-pool stack gradient", "[nn]") {
  Tensor x = randn({1, 8, 8}, 51);
  Conv2dLayer conv;
  Rng rng(52);
  conv.init(4, 1, 3, rng);
  BatchNorm2d bn;
  bn.init(4);
  auto f = [&](Tape& t, Var xv) {
    Var h = conv(t, xv);
    h = bn(t, h, true);
    h = t.relu(h);
    h = t.maxpool2x2(h);
    return t.reduce_mean(t.mul(h, h));
  };
  REQUIRE(grad_check(f, x).max_rel_err <= 1e-4);
  // and through the kernel weights
  auto fw = [&](Tape& t, Var wv) {
    Var h = t.conv2d(t.leaf(x), wv, t.param(conv.b));
    h = bn(t, h, true);
    h = t.relu(h);
    h = t.maxpool2x2(h);
    return t.reduce_mean(t.mul(h, h));
  };
  REQUIRE(grad_check(fw, conv.w).max_rel_err <= 1e-4);
}

TEST_CASE("layer backward property over random seeds", "[nn]") {
  // softmax / l2norm / linear / relu / maxpool / bn on random small shapes
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(900 + seed);
    const int r = 2 + int(rng.index(3));
    const int c = 2 + int(rng.index(4));
    Tensor x = Tensor::randn({r, c}, rng);
    const int pick = int(seed % 5);
    auto f = [&](Tape& t, Var xv) -> Var {
      switch (pick) {
        case 0: return t.reduce_mean(t.mul(t.softmax_rows(xv), t.softmax_rows(xv)));
        case 1: return t.reduce_sum(t.mul(t.l2norm_cols(xv), xv));
        case 2: return t.reduce_mean(t.relu(xv));
        case 3: return t.reduce_sum(t.mul(t.transpose2d(xv), t.transpose2d(xv)));
        default: return t.reduce_mean(t.exp(t.scale(xv, 0.5)));
      }
    };
    INFO("seed " << seed << " op " << pick);
    REQUIRE(grad_check(f, x, 1e-4).max_rel_err <= 1e-4);
  }
}

TEST_CASE("softmax rows sum to one and l2norm is unit", "[nn]") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor x = randn({5, 9}, 700 + seed, 3.0);
    Tape t(false);
    Var s = t.softmax_rows(t.leaf(x));
    for (int i = 0; i < 5; ++i) {
      double sum = 0.0;
      for (int j = 0; j < 9; ++j) sum += t.value(s).at(i, j);
      REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
    }
    Var n = t.l2norm_cols(t.leaf(x));
    for (int j = 0; j < 9; ++j) {
      double sum = 0.0;
      for (int i = 0; i < 5; ++i) sum += t.value(n).at(i, j) * t.value(n).at(i, j);
      REQUIRE(std::sqrt(sum) == Catch::Approx(1.0).margin(1e-6));
    }
  }
}

TEST_CASE("forward determinism", "[nn]") {
  auto run = [] {
    Rng rng(77);
    Tensor x = Tensor::randn({1, 12, 12}, rng);
    Conv2dLayer conv;
    conv.init(3, 1, 3, rng);
    BatchNorm2d bn;
    bn.init(3);
    Tape t(false);
    Var h = conv(t, t.leaf(x));
    h = bn(t, h, true);
    h = t.maxpool2x2(t.relu(h));
    return t.value(h);
  };
  Tensor a = run(), b = run();
  REQUIRE(a.vec() == b.vec());
}

TEST_CASE("weight store round trip is bit exact", "[nn]") {
  Rng rng(88);
  WeightStore ws;
  ws.put("enc.w", Tensor::randn({3, 4}, rng));
  ws.put("enc.b", Tensor::randn({3}, rng));
  ws.put("head.w", Tensor::randn({2, 3, 3, 3}, rng, 0.2));
  const std::string path = "ws_roundtrip.bin";
  ws.save(path);
  WeightStore lo = WeightStore::load(path);
  lo.save(path + ".2");
  std::ifstream f1(path, std::ios::binary), f2(path + ".2", std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(s1 == s2);
  REQUIRE(lo.count() == 3);
  REQUIRE(lo.get("enc.w").shape() == std::vector<int>{3, 4});
  // loaded values are float32 quantizations of the originals
  Tensor q = ws.get("enc.w");
  WeightStore::quantize_f32(q);
  REQUIRE(lo.get("enc.w").vec() == q.vec());
}

TEST_CASE("optimizers reduce a quadratic", "[nn]") {
  for (auto kind : {0, 1}) {
    Tensor w({4}, {1.0, -2.0, 3.0, 0.5});
    ParamRegistry reg;
    reg.add("w", w);
    Optimizer opt = kind == 0 ? Optimizer::sgd_momentum(0.05) : Optimizer::adam(0.05);
    double first = 0.0, last = 0.0;
    for (int it = 0; it < 200; ++it) {
      Tape t(true);
      Var wv = t.param(w);
      Var loss = t.reduce_sum(t.mul(wv, wv));
      if (it == 0) first = t.value(loss)[0];
      last = t.value(loss)[0];
      t.backward(loss);
      opt.step(reg, t);
    }
    REQUIRE(last < 0.01 * first);
  }
}

TEST_CASE("optimizer state export and import", "[nn]") {
  Tensor w({2}, {1.0, 2.0});
  ParamRegistry reg;
  reg.add("w", w);
  Optimizer opt = Optimizer::adam(0.01);
  for (int it = 0; it < 3; ++it) {
    Tape t(true);
    Var loss = t.reduce_sum(t.mul(t.param(w), t.param(w)));
    t.backward(loss);
    opt.step(reg, t);
  }
  WeightStore ws;
  opt.export_state(ws, "opt");
  Optimizer opt2 = Optimizer::adam(0.01);
  opt2.import_state(ws, "opt");
  REQUIRE(opt2.step_count() == 3);
}
