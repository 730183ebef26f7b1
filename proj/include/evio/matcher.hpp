#pragma once

#include "evio/detector_train.hpp"

namespace evio {

struct MatchInput {
  std::vector<Keypoint> keypoints_a, keypoints_b;
  std::vector<Descriptor> descriptors_a, descriptors_b;
  int width = 0, height = 0;  // for coordinate normalization

  void validate() const {
    require(!keypoints_a.empty() && !keypoints_b.empty(),
            "matcher: empty keypoint list (degenerate match call)");
    require(keypoints_a.size() == descriptors_a.size() &&
                keypoints_b.size() == descriptors_b.size(),
            "matcher: keypoint/descriptor count mismatch");
    require(width > 1 && height > 1, "matcher: image size required");
  }
};

struct MatcherConfig {
  int desc_dim = 64;
  int layers = 6;  // alternating self/cross; must be even
  int heads = 4;
  std::vector<int> encoder_dims = {2, 32, 64};  // hidden dims; desc_dim appended
  int sinkhorn_iters = 100;
  double temperature = 1.0;
  double match_threshold = 0.2;
  bool mutual_check = true;
};

struct Assignment {
  Tensor p;  // (R+1)x(C+1), entries in [0,1]
  bool converged = false;
  int iterations = 0;
};

struct Match {
  int index_a = 0, index_b = 0;
  double confidence = 0.0;
};

struct MatchSet {
  std::vector<Match> matches;
  std::vector<int> unmatched_a, unmatched_b;
};

// Graph-attention matcher: keypoint encoder, alternating self/cross attention
// with residual update MLPs (weights shared between the two sides), linear
// projection, dustbin-extended Sinkhorn assignment.
class MatcherNet {
 public:
  MatcherConfig cfg;

  explicit MatcherNet(MatcherConfig config = {}, std::uint64_t seed = 2) : cfg(config) {
    require_config(cfg.layers % 2 == 0, "matcher: layer count must be even");
    require_config(cfg.desc_dim % cfg.heads == 0, "matcher: heads must divide desc_dim");
    Rng rng(seed);
    std::vector<int> enc = cfg.encoder_dims;
    enc.push_back(cfg.desc_dim);
    encoder_.init(enc, rng);
    layers_.resize(std::size_t(cfg.layers));
    for (auto& layer : layers_) {
      layer.wq.init(cfg.desc_dim, cfg.desc_dim, rng);
      layer.wk.init(cfg.desc_dim, cfg.desc_dim, rng);
      layer.wv.init(cfg.desc_dim, cfg.desc_dim, rng);
      // zero-initialized output keeps the residual stack at identity at step 0
      layer.update.init({2 * cfg.desc_dim, 2 * cfg.desc_dim, cfg.desc_dim}, rng, true);
    }
    // small projection keeps initial scores near zero so no NLL term clamps
    final_.init_scaled(cfg.desc_dim, cfg.desc_dim, rng, 1.0 / std::sqrt(2.0 * cfg.desc_dim));
    dustbin_ = Tensor::scalar(1.0);
  }

  void register_params(ParamRegistry& r) {
    encoder_.register_params(r, "match.enc");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = "match.layer" + std::to_string(i);
      layers_[i].wq.register_params(r, p + ".wq");
      layers_[i].wk.register_params(r, p + ".wk");
      layers_[i].wv.register_params(r, p + ".wv");
      layers_[i].update.register_params(r, p + ".update");
    }
    final_.register_params(r, "match.final");
    r.add("match.dustbin", dustbin_);
  }

  // test hook: zero all update MLPs so propagation is the identity
  void zero_update_mlps() {
    for (auto& layer : layers_)
      for (auto& lin : layer.update.layers) {
        lin.w.fill(0.0);
        lin.b.fill(0.0);
      }
  }

  // z^0 = d + MLP_enc(p), coordinates normalized to [-1, 1]
  std::pair<Var, Var> encode_keypoints(Tape& t, const MatchInput& in) const {
    in.validate();
    auto embed = [&](const std::vector<Keypoint>& kps, const std::vector<Descriptor>& ds) {
      const int n = int(kps.size());
      Tensor pos({n, 2});
      Tensor desc({n, cfg.desc_dim});
      for (int i = 0; i < n; ++i) {
        pos.at(i, 0) = 2.0 * kps[std::size_t(i)].x / (in.width - 1.0) - 1.0;
        pos.at(i, 1) = 2.0 * kps[std::size_t(i)].y / (in.height - 1.0) - 1.0;
        require(int(ds[std::size_t(i)].values.size()) == cfg.desc_dim,
                "matcher: descriptor dimension mismatch");
        for (int d = 0; d < cfg.desc_dim; ++d)
          desc.at(i, d) = ds[std::size_t(i)].values[std::size_t(d)];
      }
      return t.add(t.leaf(desc), encoder_(t, t.leaf(pos)));
    };
    return {embed(in.keypoints_a, in.descriptors_a), embed(in.keypoints_b, in.descriptors_b)};
  }

  // Alternating self/cross message passing: z += MLP(concat(z, m)).
  std::pair<Var, Var> propagate(Tape& t, Var za, Var zb) const {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const AttentionLayer& layer = layers_[l];
      const bool self_layer = l % 2 == 0;
      Var src_a = self_layer ? za : zb;
      Var src_b = self_layer ? zb : za;
      Var ma = attention(t, layer.wq(t, za), layer.wk(t, src_a), layer.wv(t, src_a), cfg.heads);
      Var mb = attention(t, layer.wq(t, zb), layer.wk(t, src_b), layer.wv(t, src_b), cfg.heads);
      za = t.add(za, layer.update(t, t.concat_cols(za, ma)));
      zb = t.add(zb, layer.update(t, t.concat_cols(zb, mb)));
    }
    return {za, zb};
  }

  // f = W z + b; M_ij = <f_i^A, f_j^B>; dustbin row/column filled with alpha.
  Var score_matrix(Tape& t, Var za, Var zb) const {
    Var fa = final_(t, za);
    Var fb = final_(t, zb);
    Var inner = t.matmul(fa, fb, false, true);  // [R, C]
    const int r = t.value(inner).dim(0), c = t.value(inner).dim(1);
    Var alpha = t.param(dustbin_);
    Var col = t.broadcast_scalar(alpha, {r, 1});
    Var row = t.broadcast_scalar(alpha, {1, c + 1});
    return t.concat_rows(t.concat_cols(inner, col), row);
  }

  Var forward_log_assignment(Tape& t, const MatchInput& in) const {
    auto [za, zb] = encode_keypoints(t, in);
    std::tie(za, zb) = propagate(t, za, zb);
    Var scores = score_matrix(t, za, zb);
    return t.sinkhorn_dustbin_log(scores, cfg.sinkhorn_iters, cfg.temperature);
  }

 private:
  struct AttentionLayer {
    LinearLayer wq, wk, wv;
    Mlp update;
  };

  Mlp encoder_;
  std::vector<AttentionLayer> layers_;
  LinearLayer final_;
  Tensor dustbin_;
};

// Standalone Sinkhorn entry point used by tests and tooling.
inline Assignment sinkhorn(const Tensor& extended_scores, int n_iters, double temperature) {
  Tape t(false);
  Var log_p = t.sinkhorn_dustbin_log(t.leaf(extended_scores), n_iters, temperature);
  Assignment out;
  out.p = t.value(log_p);
  for (auto& v : out.p.vec()) v = std::exp(v);
  out.iterations = n_iters;
  const int rows = out.p.dim(0), cols = out.p.dim(1);
  double worst = 0.0;
  for (int i = 0; i < rows - 1; ++i) {
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += out.p.at(i, j);
    worst = std::max(worst, std::abs(s - 1.0));
  }
  for (int j = 0; j < cols - 1; ++j) {
    double s = 0.0;
    for (int i = 0; i < rows; ++i) s += out.p.at(i, j);
    worst = std::max(worst, std::abs(s - 1.0));
  }
  out.converged = worst <= 1e-6;
  return out;
}

// Mutual row/column argmax with a confidence threshold.
inline MatchSet extract_matches(const Tensor& p, double confidence_threshold, bool mutual) {
  require(p.rank() == 2 && p.dim(0) >= 2 && p.dim(1) >= 2, "extract_matches: bad P");
  const int r = p.dim(0) - 1, c = p.dim(1) - 1;
  std::vector<int> row_best(std::size_t(r), -1), col_best(std::size_t(c), -1);
  for (int i = 0; i < r; ++i) {
    double best = -1.0;
    for (int j = 0; j < c + 1; ++j)
      if (p.at(i, j) > best) {
        best = p.at(i, j);
        row_best[std::size_t(i)] = j;
      }
  }
  for (int j = 0; j < c; ++j) {
    double best = -1.0;
    for (int i = 0; i < r + 1; ++i)
      if (p.at(i, j) > best) {
        best = p.at(i, j);
        col_best[std::size_t(j)] = i;
      }
  }
  MatchSet out;
  std::vector<bool> matched_a(std::size_t(r), false), matched_b(std::size_t(c), false);
  for (int i = 0; i < r; ++i) {
    const int j = row_best[std::size_t(i)];
    if (j >= c) continue;  // dustbin
    if (mutual && col_best[std::size_t(j)] != i) continue;
    if (p.at(i, j) < confidence_threshold) continue;
    out.matches.push_back({i, j, p.at(i, j)});
    matched_a[std::size_t(i)] = true;
    matched_b[std::size_t(j)] = true;
  }
  for (int i = 0; i < r; ++i)
    if (!matched_a[std::size_t(i)]) out.unmatched_a.push_back(i);
  for (int j = 0; j < c; ++j)
    if (!matched_b[std::size_t(j)]) out.unmatched_b.push_back(j);
  return out;
}

// NLL of the assignment against ground truth; log clamped at -30.
inline Var match_loss(Tape& t, Var log_p, const MatchSet& gt) {
  const Tensor& lp = t.value(log_p);
  const int rows = lp.dim(0), cols = lp.dim(1);
  std::vector<std::size_t> picks;
  for (const Match& m : gt.matches) {
    require(m.index_a >= 0 && m.index_a < rows - 1 && m.index_b >= 0 && m.index_b < cols - 1,
            "match_loss: ground-truth index out of range");
    picks.push_back(std::size_t(m.index_a) * cols + std::size_t(m.index_b));
  }
  for (int i : gt.unmatched_a) {
    require(i >= 0 && i < rows - 1, "match_loss: unmatched index out of range");
    picks.push_back(std::size_t(i) * cols + std::size_t(cols - 1));
  }
  for (int j : gt.unmatched_b) {
    require(j >= 0 && j < cols - 1, "match_loss: unmatched index out of range");
    picks.push_back(std::size_t(rows - 1) * cols + std::size_t(j));
  }
  return t.gather_neg_sum(log_p, picks, -30.0);
}

inline MatchSet match_pair(const MatcherNet& net, const MatchInput& in) {
  Tape t(false);
  Var log_p = net.forward_log_assignment(t, in);
  Tensor p = t.value(log_p);
  for (auto& v : p.vec()) v = std::exp(v);
  return extract_matches(p, net.cfg.match_threshold, net.cfg.mutual_check);
}

// ---- keypoint/descriptor text files: `x y score d0 ... dD-1` per line ----

inline void save_keypoint_file(const std::vector<Keypoint>& kps,
                               const std::vector<Descriptor>& ds, const std::string& path) {
  require(kps.size() == ds.size(), "keypoint file: count mismatch");
  std::ofstream out(path);
  require(bool(out), "cannot write keypoint file: " + path);
  for (std::size_t i = 0; i < kps.size(); ++i) {
    out << kps[i].x << " " << kps[i].y << " " << kps[i].score;
    for (double v : ds[i].values) out << " " << v;
    out << "\n";
  }
}

inline std::pair<std::vector<Keypoint>, std::vector<Descriptor>> load_keypoint_file(
    const std::string& path) {
  std::ifstream in(path);
  require(bool(in), "cannot open keypoint file: " + path);
  std::vector<Keypoint> kps;
  std::vector<Descriptor> ds;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    Keypoint k;
    require(bool(ss >> k.x >> k.y >> k.score), "malformed keypoint line in " + path);
    Descriptor d;
    double v;
    while (ss >> v) d.values.push_back(v);
    require(!d.values.empty(), "keypoint line missing descriptor in " + path);
    if (!ds.empty())
      require(d.values.size() == ds.front().values.size(),
              "inconsistent descriptor dimension in " + path);
    kps.push_back(k);
    ds.push_back(std::move(d));
  }
  return {std::move(kps), std::move(ds)};
}

}  // namespace evio
