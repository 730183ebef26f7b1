#pragma once

#include "evio/event_sim.hpp"
#include "evio/optim.hpp"

namespace evio {

struct Keypoint {
  int x = 0, y = 0;
  double score = 0.0;
};

struct Descriptor {
  std::vector<double> values;  // unit L2 norm
  double dot(const Descriptor& o) const {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[i] * o.values[i];
    return s;
  }
};

// Per-cell training target: one of the 64 in-cell positions or 64 = dustbin.
struct CellLabels {
  int cells_y = 0, cells_x = 0;
  std::vector<int> classes;  // row-major, values in [0, 64]

  int at(int cy, int cx) const { return classes[std::size_t(cy) * cells_x + cx]; }
};

struct DetectorConfig {
  // encoder channel plan c1-c1-c2-c2-c3 with three 2x2 pools -> /8
  int c1 = 32, c2 = 64, c3 = 128;
  int head_channels = 256;
  int desc_dim = 256;
  double conf_threshold = 0.015;
  int nms_radius = 4;
  int max_keypoints = 400;
  // hinge-loss constants and the interest/descriptor balance
  double lambda_pos = 250.0, mu_pos = 1.0, mu_neg = 0.2;
  double beta = 1e-4;
  double delta_px = 8.0;
  int cell = 8;

  static DetectorConfig desk_scale() {
    DetectorConfig cfg;
    cfg.c1 = 16;
    cfg.c2 = 32;
    cfg.c3 = 64;
    cfg.head_channels = 128;
    cfg.desc_dim = 64;
    return cfg;
  }
};

struct DetectorOutput {
  Var logits = -1;  // [65, H/8, W/8]
  Var desc = -1;    // [D, H/8, W/8], unit columns
  int cells_y = 0, cells_x = 0;
  int width = 0, height = 0;  // unpadded input size
};

// Interest-point and descriptor network on normalized time surfaces.
class DetectorNet {
 public:
  DetectorConfig cfg;

  explicit DetectorNet(DetectorConfig config = {}, std::uint64_t seed = 1)
      : cfg(config) {
    Rng rng(seed);
    enc1a_.init(cfg.c1, 1, 3, rng);
    bn1a_.init(cfg.c1);
    enc1b_.init(cfg.c1, cfg.c1, 3, rng);
    bn1b_.init(cfg.c1);
    enc2a_.init(cfg.c2, cfg.c1, 3, rng);
    bn2a_.init(cfg.c2);
    enc2b_.init(cfg.c2, cfg.c2, 3, rng);
    bn2b_.init(cfg.c2);
    enc3_.init(cfg.c3, cfg.c2, 3, rng);
    bn3_.init(cfg.c3);
    iph_.init(cfg.head_channels, cfg.c3, 3, rng);
    bn_iph_.init(cfg.head_channels);
    ipo_.init(65, cfg.head_channels, 1, rng);
    bn_ipo_.init(65);
    dsh_.init(cfg.head_channels, cfg.c3, 3, rng);
    bn_dsh_.init(cfg.head_channels);
    dso_.init(cfg.desc_dim, cfg.head_channels, 1, rng);
    bn_dso_.init(cfg.desc_dim);
  }

  void register_params(ParamRegistry& r) {
    enc1a_.register_params(r, "det.enc1a");
    bn1a_.register_params(r, "det.bn1a");
    enc1b_.register_params(r, "det.enc1b");
    bn1b_.register_params(r, "det.bn1b");
    enc2a_.register_params(r, "det.enc2a");
    bn2a_.register_params(r, "det.bn2a");
    enc2b_.register_params(r, "det.enc2b");
    bn2b_.register_params(r, "det.bn2b");
    enc3_.register_params(r, "det.enc3");
    bn3_.register_params(r, "det.bn3");
    iph_.register_params(r, "det.iph");
    bn_iph_.register_params(r, "det.bn_iph");
    ipo_.register_params(r, "det.ipo");
    bn_ipo_.register_params(r, "det.bn_ipo");
    dsh_.register_params(r, "det.dsh");
    bn_dsh_.register_params(r, "det.bn_dsh");
    dso_.register_params(r, "det.dso");
    bn_dso_.register_params(r, "det.bn_dso");
  }

  static Tensor ts_to_tensor(const TimeSurface& ts) {
    // zero-pad to a multiple of 8 on the right/bottom
    const int h = ts.height(), w = ts.width();
    const int hp = (h + 7) / 8 * 8, wp = (w + 7) / 8 * 8;
    Tensor x({1, hp, wp});
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) x.at(0, y, xx) = double(ts.values.at(xx, y));
    return x;
  }

  DetectorOutput forward(Tape& t, const TimeSurface& ts, bool training = false) {
    require(ts.values.min_value() >= 0.f && ts.values.max_value() <= 1.f,
            "detector: input time surface must be normalized to [0,1]");
    DetectorOutput out;
    out.width = ts.width();
    out.height = ts.height();
    Var x = t.leaf(ts_to_tensor(ts));
    Var h = t.relu(bn1a_(t, enc1a_(t, x), training));
    h = t.relu(bn1b_(t, enc1b_(t, h), training));
    h = t.maxpool2x2(h);
    h = t.relu(bn2a_(t, enc2a_(t, h), training));
    h = t.relu(bn2b_(t, enc2b_(t, h), training));
    h = t.maxpool2x2(h);
    h = t.relu(bn3_(t, enc3_(t, h), training));
    h = t.maxpool2x2(h);

    Var ip = t.relu(bn_iph_(t, iph_(t, h), training));
    out.logits = bn_ipo_(t, ipo_(t, ip), training);
    out.cells_y = t.value(out.logits).dim(1);
    out.cells_x = t.value(out.logits).dim(2);

    Var ds = t.relu(bn_dsh_(t, dsh_(t, h), training));
    Var d = bn_dso_(t, dso_(t, ds), training);
    const int dd = t.value(d).dim(0);
    Var flat = t.reshape(d, {dd, out.cells_y * out.cells_x});
    Var normed = t.l2norm_cols(flat);
    out.desc = t.reshape(normed, {dd, out.cells_y, out.cells_x});
    return out;
  }

 private:
  Conv2dLayer enc1a_, enc1b_, enc2a_, enc2b_, enc3_, iph_, ipo_, dsh_, dso_;
  BatchNorm2d bn1a_, bn1b_, bn2a_, bn2b_, bn3_, bn_iph_, bn_ipo_, bn_dsh_, bn_dso_;
};

// Channel softmax over the 65 classes, dustbin dropped, cells unfolded back to
// full resolution.
inline Grid decode_heatmap(const Tensor& logits, int width, int height) {
  require(logits.rank() == 3 && logits.dim(0) == 65, "decode: logits must be 65xHcxWc");
  const int hc = logits.dim(1), wc = logits.dim(2);
  Grid heat(width, height, 0.f);
  for (int cy = 0; cy < hc; ++cy)
    for (int cx = 0; cx < wc; ++cx) {
      double m = -1e300;
      for (int k = 0; k < 65; ++k) m = std::max(m, logits.at(k, cy, cx));
      double z = 0.0;
      for (int k = 0; k < 65; ++k) z += std::exp(logits.at(k, cy, cx) - m);
      for (int k = 0; k < 64; ++k) {
        const int px = cx * 8 + k % 8, py = cy * 8 + k / 8;
        if (px < width && py < height)
          heat.at(px, py) = float(std::exp(logits.at(k, cy, cx) - m) / z);
      }
    }
  return heat;
}

// Greedy score-ordered non-maximum suppression on a score map.
inline std::vector<Keypoint> nms_keypoints(const Grid& heat, double conf_threshold,
                                           int nms_radius, int max_keypoints) {
  require(conf_threshold >= 0.0 && nms_radius >= 0, "nms: thresholds must be >= 0");
  std::vector<Keypoint> cand;
  for (int y = 0; y < heat.height; ++y)
    for (int x = 0; x < heat.width; ++x)
      if (heat.at(x, y) >= conf_threshold && heat.at(x, y) > 0.f)
        cand.push_back({x, y, double(heat.at(x, y))});
  std::stable_sort(cand.begin(), cand.end(), [](const Keypoint& a, const Keypoint& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::pair(a.y, a.x) < std::pair(b.y, b.x);
  });
  std::vector<Keypoint> kept;
  Grid occupied(heat.width, heat.height, 0.f);
  const int r = nms_radius;
  for (const Keypoint& k : cand) {
    if (max_keypoints > 0 && int(kept.size()) >= max_keypoints) break;
    bool suppressed = false;
    for (int dy = -r; dy <= r && !suppressed; ++dy)
      for (int dx = -r; dx <= r && !suppressed; ++dx) {
        const int nx = k.x + dx, ny = k.y + dy;
        if (nx < 0 || ny < 0 || nx >= heat.width || ny >= heat.height) continue;
        if (occupied.at(nx, ny) > 0.f && dx * dx + dy * dy <= r * r) suppressed = true;
      }
    if (suppressed) continue;
    kept.push_back(k);
    occupied.at(k.x, k.y) = 1.f;
  }
  return kept;
}

inline std::vector<Keypoint> decode_keypoints(const Tensor& logits, int width, int height,
                                              double conf_threshold, int nms_radius,
                                              int max_keypoints) {
  return nms_keypoints(decode_heatmap(logits, width, height), conf_threshold, nms_radius,
                       max_keypoints);
}

// Bilinear interpolation of the /8 descriptor grid at keypoint/8 coordinates,
// re-normalized to unit length. Cell (i, j) is centered at pixel (8j+3.5, 8i+3.5).
inline std::vector<Descriptor> sample_descriptors(const Tensor& dense_desc,
                                                  const std::vector<Keypoint>& keypoints) {
  require(dense_desc.rank() == 3, "sample_descriptors: DxHcxWc required");
  const int d = dense_desc.dim(0), hc = dense_desc.dim(1), wc = dense_desc.dim(2);
  std::vector<Descriptor> out;
  out.reserve(keypoints.size());
  for (const Keypoint& k : keypoints) {
    const double u = std::clamp((k.x - 3.5) / 8.0, 0.0, double(wc - 1));
    const double v = std::clamp((k.y - 3.5) / 8.0, 0.0, double(hc - 1));
    const int u0 = std::min(int(u), wc - 2 >= 0 ? wc - 2 : 0);
    const int v0 = std::min(int(v), hc - 2 >= 0 ? hc - 2 : 0);
    const double fu = std::clamp(u - u0, 0.0, 1.0), fv = std::clamp(v - v0, 0.0, 1.0);
    Descriptor desc;
    desc.values.resize(std::size_t(d));
    double norm2 = 0.0;
    for (int i = 0; i < d; ++i) {
      const double v00 = dense_desc.at(i, v0, u0);
      const double v10 = dense_desc.at(i, v0, std::min(u0 + 1, wc - 1));
      const double v01 = dense_desc.at(i, std::min(v0 + 1, hc - 1), u0);
      const double v11 = dense_desc.at(i, std::min(v0 + 1, hc - 1), std::min(u0 + 1, wc - 1));
      const double val = (1 - fv) * ((1 - fu) * v00 + fu * v10) + fv * ((1 - fu) * v01 + fu * v11);
      desc.values[std::size_t(i)] = val;
      norm2 += val * val;
    }
    const double inv = 1.0 / std::sqrt(std::max(norm2, 1e-24));
    for (auto& v2 : desc.values) v2 *= inv;
    out.push_back(std::move(desc));
  }
  return out;
}

// ---- losses ----

// Mean cross entropy over cells (Var graph); labels index the 65 classes.
inline Var interest_loss(Tape& t, Var logits, const CellLabels& labels) {
  const Tensor& x = t.value(logits);
  require(x.rank() == 3 && x.dim(0) == 65 && x.dim(1) == labels.cells_y &&
              x.dim(2) == labels.cells_x,
          "interest_loss: logits/labels shape mismatch");
  Var flat = t.reshape(logits, {65, labels.cells_y * labels.cells_x});
  return t.cross_entropy_cols(flat, labels.classes);
}

// t_{p,q} = 1 iff ||H * center_p - center_q|| <= delta, on the /8 cell grid.
inline Tensor correspondence_mask(const Warp& warp, int cells_y, int cells_x,
                                  double delta_px, int cell = 8) {
  require(delta_px > 0.0, "correspondence_mask: delta must be positive");
  const int p = cells_y * cells_x;
  Tensor mask({p, p});
  std::vector<Vec2> warped(static_cast<std::size_t>(p), Vec2::Zero());
  const double half = (cell - 1) / 2.0;
  for (int cy = 0; cy < cells_y; ++cy)
    for (int cx = 0; cx < cells_x; ++cx) {
      const Vec2 center(cx * cell + half, cy * cell + half);
      warped[std::size_t(cy) * cells_x + cx] = warp.apply(center);
    }
  for (int pa = 0; pa < p; ++pa) {
    const Vec2& w = warped[std::size_t(pa)];
    for (int qb = 0; qb < p; ++qb) {
      const Vec2 center((qb % cells_x) * cell + half, (qb / cells_x) * cell + half);
      mask.at(pa, qb) = (w - center).norm() <= delta_px ? 1.0 : 0.0;
    }
  }
  return mask;
}

// Hinge loss over all cell pairs, 1/(Ph*Pw)^2 total normalization.
inline Var descriptor_loss(Tape& t, Var desc_a, Var desc_b, const Tensor& mask,
                           const DetectorConfig& cfg) {
  const Tensor &da = t.value(desc_a), &db = t.value(desc_b);
  require(da.rank() == 3 && db.rank() == 3 && da.dim(0) == db.dim(0),
          "descriptor_loss: desc shape mismatch");
  const int d = da.dim(0);
  const int pa = da.dim(1) * da.dim(2), pb = db.dim(1) * db.dim(2);
  require(mask.rank() == 2 && mask.dim(0) == pa && mask.dim(1) == pb,
          "descriptor_loss: mask shape mismatch");
  Var fa = t.reshape(desc_a, {d, pa});
  Var fb = t.reshape(desc_b, {d, pb});
  Var sim = t.matmul(fa, fb, true, false);  // [pa, pb] of d^T d'
  Var hinge = t.hinge_masked(sim, mask, cfg.lambda_pos, cfg.mu_pos, cfg.mu_neg);
  return t.reduce_mean(hinge);
}

inline Var total_loss(Tape& t, Var loss_i_a, Var loss_i_b, Var loss_desc, double beta) {
  return t.add(t.add(loss_i_a, loss_i_b), t.scale(loss_desc, beta));
}

// ---- base detector and homographic adaptation ----

// Shi-Tomasi minimum-eigenvalue response, normalized to [0, 1].
inline Grid shi_tomasi_heatmap(const Grid& img, int window = 1) {
  const int w = img.width, h = img.height;
  Grid gx(w, h), gy(w, h);
  for (int y = 1; y < h - 1; ++y)
    for (int x = 1; x < w - 1; ++x) {
      gx.at(x, y) = 0.5f * (img.at(x + 1, y) - img.at(x - 1, y));
      gy.at(x, y) = 0.5f * (img.at(x, y + 1) - img.at(x, y - 1));
    }
  Grid heat(w, h, 0.f);
  float peak = 0.f;
  for (int y = window + 1; y < h - window - 1; ++y)
    for (int x = window + 1; x < w - window - 1; ++x) {
      double a = 0, b = 0, c = 0;
      for (int dy = -window; dy <= window; ++dy)
        for (int dx = -window; dx <= window; ++dx) {
          const double ix = gx.at(x + dx, y + dy), iy = gy.at(x + dx, y + dy);
          a += ix * ix;
          b += ix * iy;
          c += iy * iy;
        }
      const double tr = a + c;
      const double det = a * c - b * b;
      const double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
      const double lambda_min = tr / 2.0 - disc;
      heat.at(x, y) = float(std::max(0.0, lambda_min));
      peak = std::max(peak, heat.at(x, y));
    }
  if (peak > 0.f)
    for (auto& v : heat.values) v /= peak;
  return heat;
}

struct AdaptationConfig {
  int n_warps = 25;
  double label_threshold = 0.18;  // on the aggregated heatmap
  WarpConfig warp;                // sampling ranges for adaptation warps
  int cell = 8;
};

// Average of unwarped detection heatmaps over random warps (identity always
// included); per-cell argmax above threshold becomes the label, else dustbin.
template <typename HeatFn>
CellLabels homographic_adaptation(HeatFn&& heatmap_fn, const TimeSurface& ts, int n_warps,
                                  std::uint64_t seed, const AdaptationConfig& cfg = {}) {
  require(n_warps >= 1, "homographic_adaptation: n_warps >= 1");
  const int w = ts.width(), h = ts.height();
  Grid acc(w, h, 0.f), count(w, h, 0.f);
  for (int wi = 0; wi < n_warps; ++wi) {
    Warp warp = wi == 0 ? Warp::from_components(Vec2(w / 2.0, h / 2.0), Vec2::Zero(), 0.0, 1.0)
                        : sample_warp(step_hash(seed, std::uint64_t(wi)),
                                      Vec2(w / 2.0, h / 2.0), cfg.warp);
    TimeSurface warped = ts;
    if (wi != 0) {
      const Warp inv = warp.inverse();
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const Vec2 src = inv.apply(Vec2(x, y));
          warped.values.at(x, y) =
              ts.values.inside(src.x(), src.y()) ? ts.values.sample(src.x(), src.y()) : 0.f;
        }
    }
    Grid heat = heatmap_fn(warped);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const Vec2 q = warp.apply(Vec2(x, y));
        if (!heat.inside(q.x(), q.y())) continue;
        acc.at(x, y) += heat.sample(q.x(), q.y());
        count.at(x, y) += 1.f;
      }
  }
  CellLabels labels;
  labels.cells_y = h / cfg.cell;
  labels.cells_x = w / cfg.cell;
  labels.classes.assign(std::size_t(labels.cells_y) * labels.cells_x, 64);
  for (int cy = 0; cy < labels.cells_y; ++cy)
    for (int cx = 0; cx < labels.cells_x; ++cx) {
      double best = 0.0;
      int best_k = 64;
      for (int k = 0; k < cfg.cell * cfg.cell; ++k) {
        const int px = cx * cfg.cell + k % cfg.cell, py = cy * cfg.cell + k / cfg.cell;
        if (count.at(px, py) <= 0.f) continue;
        const double v = double(acc.at(px, py)) / count.at(px, py);
        if (v > best) {
          best = v;
          best_k = k;
        }
      }
      if (best >= cfg.label_threshold)
        labels.classes[std::size_t(cy) * labels.cells_x + cx] = best_k;
    }
  return labels;
}

inline CellLabels adaptation_labels(const TimeSurface& ts, int n_warps, std::uint64_t seed,
                                    const AdaptationConfig& cfg = {}) {
  return homographic_adaptation(
      [](const TimeSurface& t) { return shi_tomasi_heatmap(t.values); }, ts, n_warps, seed, cfg);
}

}  // namespace evio
