#pragma once

#include <filesystem>

#include "evio/events.hpp"
#include "evio/geometry.hpp"

namespace evio {

// Similarity warp built from crop center, center offset, rotation and zoom.
// The homography acts on crop-local pixel coordinates.
struct Warp {
  Mat3 homography = Mat3::Identity();
  Vec2 crop_center = Vec2::Zero();
  Vec2 center_offset = Vec2::Zero();
  double rotation = 0.0;  // radians
  double scale = 1.0;

  Vec2 apply(const Vec2& p) const {
    const Vec3 q = homography * Vec3(p.x(), p.y(), 1.0);
    require(std::abs(q.z()) > 1e-12, "warp: point at infinity");
    return Vec2(q.x() / q.z(), q.y() / q.z());
  }
  Warp inverse() const {
    Warp w = *this;
    w.homography = homography.inverse().eval();
    w.crop_center = crop_center + center_offset;
    w.center_offset = -center_offset;
    w.rotation = -rotation;
    w.scale = 1.0 / scale;
    return w;
  }

  // scale-rotate about the crop center, then shift the center by the offset
  static Warp from_components(const Vec2& center, const Vec2& offset, double theta, double s) {
    Warp w;
    w.crop_center = center;
    w.center_offset = offset;
    w.rotation = theta;
    w.scale = s;
    const double c = std::cos(theta), sn = std::sin(theta);
    Mat3 rot;
    rot << c, -sn, 0, sn, c, 0, 0, 0, 1;
    Mat3 sc = Mat3::Identity();
    sc(0, 0) = sc(1, 1) = s;
    Mat3 to_origin = Mat3::Identity();
    to_origin(0, 2) = -center.x();
    to_origin(1, 2) = -center.y();
    Mat3 back = Mat3::Identity();
    back(0, 2) = center.x() + offset.x();
    back(1, 2) = center.y() + offset.y();
    w.homography = back * sc * rot * to_origin;
    return w;
  }
};

struct WarpConfig {
  double max_offset = 12.0;     // px, center translation range
  double max_rotation = 0.35;   // radians
  double min_scale = 0.85;
  double max_scale = 1.18;
};

inline Warp sample_warp(std::uint64_t seed, const Vec2& crop_center, const WarpConfig& cfg) {
  require_config(cfg.max_rotation >= 0.0 && cfg.max_rotation <= M_PI, "warp rotation range");
  require_config(cfg.min_scale > 0.0 && cfg.min_scale <= cfg.max_scale, "warp scale range");
  Rng rng(seed);
  const Vec2 offset(rng.uniform(-cfg.max_offset, cfg.max_offset),
                    rng.uniform(-cfg.max_offset, cfg.max_offset));
  const double theta = rng.uniform(-cfg.max_rotation, cfg.max_rotation);
  const double s = rng.uniform(cfg.min_scale, cfg.max_scale);
  return Warp::from_components(crop_center, offset, theta, s);
}

// ---- contrast-threshold event synthesis ----

struct EventSynthConfig {
  double contrast = 0.15;   // log-intensity step per event
  double log_eps = 1e-3;    // stabilizer inside log(I + eps)
  int n_steps = 20;         // sub-frames for two-image interpolation
};

// Stateful per-pixel level-crossing synthesizer. Reference levels persist
// across fed frames so slow drifts still accumulate into events.
class EventSynth {
 public:
  EventSynth(int width, int height, double contrast, double log_eps = 1e-3)
      : w_(width), h_(height), contrast_(contrast), eps_(log_eps) {
    require_config(contrast > 0.0, "event synth: contrast threshold must be positive");
  }

  void init(const Grid& img, double t0) {
    require(img.width == w_ && img.height == h_, "event synth: image size mismatch");
    log_ = log_of(img);
    ref_ = log_;
    t_ = t0;
  }

  // Linear log-intensity ramp from the previous frame to `img` at time t1.
  void feed(const Grid& img, double t1, std::vector<Event>& out) {
    require(img.width == w_ && img.height == h_, "event synth: image size mismatch");
    require(t1 > t_, "event synth: non-increasing frame time");
    std::vector<double> next = log_of(img);
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < w_; ++x) {
        const std::size_t i = std::size_t(y) * w_ + x;
        const double l0 = log_[i], l1 = next[i];
        double ref = ref_[i];
        if (l1 > l0) {
          while (l1 - ref >= contrast_) {
            ref += contrast_;
            const double a = (ref - l0) / (l1 - l0);
            out.push_back({t_ + a * (t1 - t_), x, y, +1});
          }
        } else if (l1 < l0) {
          while (ref - l1 >= contrast_) {
            ref -= contrast_;
            const double a = (ref - l0) / (l1 - l0);
            out.push_back({t_ + a * (t1 - t_), x, y, -1});
          }
        }
        ref_[i] = ref;
      }
    log_ = std::move(next);
    t_ = t1;
  }

 private:
  std::vector<double> log_of(const Grid& img) const {
    std::vector<double> g(img.values.size());
    for (std::size_t i = 0; i < img.values.size(); ++i)
      g[i] = std::log(double(img.values[i]) + eps_);
    return g;
  }

  int w_, h_;
  double contrast_, eps_;
  std::vector<double> log_, ref_;
  double t_ = 0.0;
};

inline EventSlice generate_events(const Grid& img0, const Grid& img1, double duration,
                                  const EventSynthConfig& cfg = {}) {
  require(img0.width == img1.width && img0.height == img1.height,
          "generate_events: image size mismatch");
  require(cfg.n_steps >= 1, "generate_events: n_steps must be >= 1");
  EventSynth synth(img0.width, img0.height, cfg.contrast, cfg.log_eps);
  synth.init(img0, 0.0);
  EventSlice slice;
  slice.t_start = 0.0;
  slice.t_end = duration;
  Grid mid(img0.width, img0.height);
  for (int k = 1; k <= cfg.n_steps; ++k) {
    const double a = double(k) / cfg.n_steps;
    for (std::size_t i = 0; i < mid.values.size(); ++i)
      mid.values[i] = float((1.0 - a) * img0.values[i] + a * img1.values[i]);
    synth.feed(mid, a * duration, slice.events);
  }
  std::stable_sort(slice.events.begin(), slice.events.end(),
                   [](const Event& a, const Event& b) { return a.t < b.t; });
  return slice;
}

// ---- synthetic shapes corpus ----

struct SynthImage {
  Grid intensity;
  std::vector<Vec2> gt_corners;
};

struct SynthShapesConfig {
  int width = 240, height = 180;
  int min_shapes = 5, max_shapes = 8;
  double noise_std = 0.02;
  bool smooth = true;
  // fixed-content switches used by tests
  int forced_kind = -1;       // 0 polygon, 1 segment, 2 ellipse, 3 checkerboard
  int forced_count = -1;      // number of shapes when >= 0
  int checkerboard_squares = 5;
  int polygon_vertices = 0;   // 0 = random in [3, 6]
};

namespace detail {

inline void draw_polygon(Grid& g, const std::vector<Vec2>& verts, float color) {
  // convex fill by half-plane tests
  double x0 = 1e9, x1 = -1e9, y0 = 1e9, y1 = -1e9;
  for (const Vec2& v : verts) {
    x0 = std::min(x0, v.x());
    x1 = std::max(x1, v.x());
    y0 = std::min(y0, v.y());
    y1 = std::max(y1, v.y());
  }
  const int n = int(verts.size());
  for (int y = std::max(0, int(y0)); y <= std::min(g.height - 1, int(y1) + 1); ++y)
    for (int x = std::max(0, int(x0)); x <= std::min(g.width - 1, int(x1) + 1); ++x) {
      bool in = true;
      for (int i = 0; i < n && in; ++i) {
        const Vec2& a = verts[std::size_t(i)];
        const Vec2& b = verts[std::size_t((i + 1) % n)];
        const double cross = (b.x() - a.x()) * (y - a.y()) - (b.y() - a.y()) * (x - a.x());
        in = cross >= 0.0;
      }
      if (in) g.at(x, y) = color;
    }
}

inline void draw_segment(Grid& g, const Vec2& a, const Vec2& b, double half_width, float color) {
  const double x0 = std::min(a.x(), b.x()) - half_width - 1;
  const double x1 = std::max(a.x(), b.x()) + half_width + 1;
  const double y0 = std::min(a.y(), b.y()) - half_width - 1;
  const double y1 = std::max(a.y(), b.y()) + half_width + 1;
  const Vec2 d = b - a;
  const double len2 = std::max(1e-9, d.squaredNorm());
  for (int y = std::max(0, int(y0)); y <= std::min(g.height - 1, int(y1)); ++y)
    for (int x = std::max(0, int(x0)); x <= std::min(g.width - 1, int(x1)); ++x) {
      const Vec2 p(x, y);
      const double t = std::clamp((p - a).dot(d) / len2, 0.0, 1.0);
      if ((p - (a + t * d)).norm() <= half_width) g.at(x, y) = color;
    }
}

inline void draw_ellipse(Grid& g, const Vec2& c, double rx, double ry, float color) {
  for (int y = std::max(0, int(c.y() - ry) - 1); y <= std::min(g.height - 1, int(c.y() + ry) + 1); ++y)
    for (int x = std::max(0, int(c.x() - rx) - 1); x <= std::min(g.width - 1, int(c.x() + rx) + 1); ++x) {
      const double dx = (x - c.x()) / rx, dy = (y - c.y()) / ry;
      if (dx * dx + dy * dy <= 1.0) g.at(x, y) = color;
    }
}

// checkerboard with `squares` cells per side inside the given box; returns
// the (squares-1)^2 inner corners
inline void draw_checkerboard(Grid& g, const Vec2& origin, double size, int squares,
                              std::vector<Vec2>& corners) {
  const double cell = size / squares;
  for (int i = 0; i < squares; ++i)
    for (int j = 0; j < squares; ++j) {
      const float color = (i + j) % 2 == 0 ? 0.95f : 0.05f;
      const int xa = int(origin.x() + j * cell), xb = int(origin.x() + (j + 1) * cell);
      const int ya = int(origin.y() + i * cell), yb = int(origin.y() + (i + 1) * cell);
      for (int y = std::max(0, ya); y < std::min(g.height, yb); ++y)
        for (int x = std::max(0, xa); x < std::min(g.width, xb); ++x) g.at(x, y) = color;
    }
  for (int i = 1; i < squares; ++i)
    for (int j = 1; j < squares; ++j)
      corners.emplace_back(origin.x() + j * cell, origin.y() + i * cell);
}

inline void smooth3x3(Grid& g) {
  Grid out = g;
  for (int y = 1; y < g.height - 1; ++y)
    for (int x = 1; x < g.width - 1; ++x) {
      float s = 0.f;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) s += g.at(x + dx, y + dy);
      out.at(x, y) = s / 9.f;
    }
  g = out;
}

}  // namespace detail

// Renders random high-contrast shapes into separate slots so ground-truth
// corners stay unoccluded.
inline SynthImage synth_shapes(std::uint64_t seed, const SynthShapesConfig& cfg = {}) {
  Rng rng(seed);
  SynthImage img;
  img.intensity = Grid(cfg.width, cfg.height, 0.f);
  Grid& g = img.intensity;
  for (auto& v : g.values) v = float(std::clamp(0.45 + cfg.noise_std * rng.normal(), 0.0, 1.0));

  const int count = cfg.forced_count >= 0
                        ? cfg.forced_count
                        : rng.uniform_int(cfg.min_shapes, cfg.max_shapes);
  // slot layout: ceil(sqrt(count)) per side
  int side = 1;
  while (side * side < count) ++side;
  std::vector<int> slots(std::size_t(side) * side);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = int(i);
  rng.shuffle(slots);
  const double slot_w = double(cfg.width) / side, slot_h = double(cfg.height) / side;

  for (int s = 0; s < count; ++s) {
    const int slot = slots[std::size_t(s)];
    const double ox = (slot % side) * slot_w, oy = (slot / side) * slot_h;
    const double margin = 0.14 * std::min(slot_w, slot_h);
    const double cx = ox + slot_w / 2 + rng.uniform(-0.08, 0.08) * slot_w;
    const double cy = oy + slot_h / 2 + rng.uniform(-0.08, 0.08) * slot_h;
    const double radius = 0.5 * std::min(slot_w, slot_h) - margin;
    const int kind = cfg.forced_kind >= 0 ? cfg.forced_kind : int(rng.index(4));
    const float color = rng.uniform() < 0.5 ? float(rng.uniform(0.0, 0.12))
                                            : float(rng.uniform(0.82, 1.0));
    switch (kind) {
      case 0: {  // convex polygon
        const int nv = cfg.polygon_vertices > 0 ? cfg.polygon_vertices : rng.uniform_int(3, 6);
        std::vector<Vec2> verts;
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        for (int i = 0; i < nv; ++i) {
          const double ang = phase + 2.0 * M_PI * i / nv + rng.uniform(-0.25, 0.25) / nv;
          const double r = radius * rng.uniform(0.72, 1.0);
          verts.emplace_back(cx + r * std::cos(ang), cy + r * std::sin(ang));
        }
        detail::draw_polygon(g, verts, color);
        for (const Vec2& v : verts) img.gt_corners.push_back(v);
        break;
      }
      case 1: {  // thick segment
        const double ang = rng.uniform(0.0, M_PI);
        const Vec2 dir(std::cos(ang), std::sin(ang));
        const Vec2 a = Vec2(cx, cy) - radius * dir, b = Vec2(cx, cy) + radius * dir;
        detail::draw_segment(g, a, b, rng.uniform(1.5, 3.0), color);
        img.gt_corners.push_back(a);
        img.gt_corners.push_back(b);
        break;
      }
      case 2: {  // ellipse: a corner-free distractor
        detail::draw_ellipse(g, Vec2(cx, cy), radius * rng.uniform(0.6, 1.0),
                             radius * rng.uniform(0.6, 1.0), color);
        break;
      }
      default: {  // checkerboard
        const int squares = cfg.checkerboard_squares;
        const double size = 2.0 * radius;
        detail::draw_checkerboard(g, Vec2(cx - radius, cy - radius), size, squares,
                                  img.gt_corners);
        break;
      }
    }
  }
  if (cfg.smooth) detail::smooth3x3(g);
  for (auto& c : img.gt_corners) {
    require(c.x() >= 0 && c.x() <= cfg.width - 1 && c.y() >= 0 && c.y() <= cfg.height - 1,
            "synth_shapes: corner out of bounds");
  }
  return img;
}

// ---- training pairs ----

struct TrainingPair {
  TimeSurface ts_a, ts_b;
  Warp warp;  // crop-local: pixel_b = warp(pixel_a)
  std::vector<std::pair<Vec2, Vec2>> correspondences;
};

struct TrainingPairConfig {
  int crop_width = 160, crop_height = 120;
  WarpConfig warp;
  EventSynthConfig synth;
  double slice_duration = 0.033;
  double tau = 0.03;
  double jitter_min = 1.0, jitter_max = 3.0;  // px, intra-pair motion
  int cell = 8;                               // correspondence grid pitch
  int max_retries = 16;
  const Warp* forced_warp = nullptr;          // overrides warp sampling (tests)
};

namespace detail {

// samples src at an affine-warped location; outside pixels get the border value
inline Grid resample(const Grid& src, const Vec2& origin, const Mat3& local_to_src,
                     int w, int h) {
  Grid out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Vec3 q = local_to_src * Vec3(x, y, 1.0);
      const double sx = origin.x() + q.x() / q.z(), sy = origin.y() + q.y() / q.z();
      if (src.inside(sx, sy))
        out.at(x, y) = src.sample(sx, sy);
      else
        out.at(x, y) = src.at(std::clamp(int(sx), 0, src.width - 1),
                              std::clamp(int(sy), 0, src.height - 1));
    }
  return out;
}

inline Grid translate_image(const Grid& src, const Vec2& shift) {
  Mat3 m = Mat3::Identity();
  m(0, 2) = -shift.x();
  m(1, 2) = -shift.y();
  return resample(src, Vec2::Zero(), m, src.width, src.height);
}

}  // namespace detail

// A time-surface pair with known homography and cell-grid correspondences.
// ts_a comes from events of (crop -> jittered crop); ts_b likewise for the
// warped crop.
inline TrainingPair make_training_pair(const Grid& image, std::uint64_t seed,
                                       const TrainingPairConfig& cfg = {}) {
  const int cw = cfg.crop_width, ch = cfg.crop_height;
  require(image.width > cw && image.height > ch, "make_training_pair: image smaller than crop");
  Rng rng(seed);

  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    const double ox = rng.uniform(0.0, image.width - 1.0 - cw);
    const double oy = rng.uniform(0.0, image.height - 1.0 - ch);
    const Vec2 origin(ox, oy);
    const Vec2 center(cw / 2.0, ch / 2.0);
    Warp warp = cfg.forced_warp ? *cfg.forced_warp : sample_warp(rng.next_u64(), center, cfg.warp);

    // warped crop must stay within the source image
    const Warp inv = warp.inverse();
    bool ok = true;
    for (const Vec2& corner : {Vec2(0, 0), Vec2(cw - 1, 0), Vec2(0, ch - 1), Vec2(cw - 1, ch - 1)}) {
      const Vec2 src = inv.apply(corner) + origin;
      if (!image.inside(src.x(), src.y())) ok = false;
    }
    if (!ok) continue;

    Grid img_a = detail::resample(image, origin, Mat3::Identity(), cw, ch);
    Grid img_b = detail::resample(image, origin, inv.homography, cw, ch);

    auto jitter = [&] {
      const double mag = rng.uniform(cfg.jitter_min, cfg.jitter_max);
      const double ang = rng.uniform(0.0, 2.0 * M_PI);
      return Vec2(mag * std::cos(ang), mag * std::sin(ang));
    };
    EventSlice ev_a = generate_events(img_a, detail::translate_image(img_a, jitter()),
                                      cfg.slice_duration, cfg.synth);
    EventSlice ev_b = generate_events(img_b, detail::translate_image(img_b, jitter()),
                                      cfg.slice_duration, cfg.synth);
    if (ev_a.events.empty() || ev_b.events.empty()) continue;

    TrainingPair pair;
    pair.warp = warp;
    pair.ts_a = normalize(build_time_surface(ev_a, cw, ch, cfg.tau, cfg.slice_duration));
    pair.ts_b = normalize(build_time_surface(ev_b, cw, ch, cfg.tau, cfg.slice_duration));
    for (int cy2 = cfg.cell / 2; cy2 < ch; cy2 += cfg.cell)
      for (int cx2 = cfg.cell / 2; cx2 < cw; cx2 += cfg.cell) {
        const Vec2 pa(cx2, cy2);
        const Vec2 pb = warp.apply(pa);
        if (pb.x() >= 0 && pb.x() <= cw - 1 && pb.y() >= 0 && pb.y() <= ch - 1)
          pair.correspondences.emplace_back(pa, pb);
      }
    return pair;
  }
  throw DataError("make_training_pair: could not sample a valid warp");
}

// ---- dataset records ----

struct DatasetRecord {
  TimeSurface ts_a, ts_b;
  Mat3 homography;
  std::vector<std::pair<Vec2, Vec2>> correspondences;
};

inline void save_record(const TrainingPair& pair, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_grid(pair.ts_a.values, dir + "/ts_a.bin");
  save_grid(pair.ts_b.values, dir + "/ts_b.bin");
  {
    std::ofstream out(dir + "/warp.txt");
    require(bool(out), "cannot write warp file");
    const Mat3& h = pair.warp.homography;
    char buf[64];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        std::snprintf(buf, sizeof(buf), "%.17g%c", h(i, j), j == 2 ? '\n' : ' ');
        out << buf;
      }
  }
  {
    std::ofstream out(dir + "/corr.txt");
    require(bool(out), "cannot write correspondence file");
    char buf[160];
    for (const auto& [a, b] : pair.correspondences) {
      std::snprintf(buf, sizeof(buf), "%.6f %.6f %.6f %.6f\n", a.x(), a.y(), b.x(), b.y());
      out << buf;
    }
  }
}

inline DatasetRecord load_record(const std::string& dir) {
  DatasetRecord rec;
  rec.ts_a.values = load_grid(dir + "/ts_a.bin");
  rec.ts_b.values = load_grid(dir + "/ts_b.bin");
  rec.ts_a.normalized = rec.ts_b.normalized = true;
  {
    std::ifstream in(dir + "/warp.txt");
    require(bool(in), "cannot read warp file in " + dir);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) require(bool(in >> rec.homography(i, j)), "bad warp file");
  }
  {
    std::ifstream in(dir + "/corr.txt");
    require(bool(in), "cannot read correspondence file in " + dir);
    double xa, ya, xb, yb;
    while (in >> xa >> ya >> xb >> yb)
      rec.correspondences.emplace_back(Vec2(xa, ya), Vec2(xb, yb));
  }
  return rec;
}

}  // namespace evio
