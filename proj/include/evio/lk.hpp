#pragma once

#include "evio/events.hpp"
#include "evio/geometry.hpp"

namespace evio {

struct LkConfig {
  int window = 21;       // odd
  int levels = 3;        // pyramid levels including the base
  int max_iters = 30;
  double epsilon = 0.01;     // px convergence
  double min_eig = 1e-7;     // Hessian conditioning floor
  double max_residual = 0.35;  // mean |I_cur - I_prev| over the window
};

inline std::vector<Grid> build_pyramid(const Grid& base, int levels) {
  std::vector<Grid> pyr{base};
  for (int l = 1; l < levels; ++l) {
    const Grid& prev = pyr.back();
    if (prev.width < 4 || prev.height < 4) break;
    Grid next(prev.width / 2, prev.height / 2);
    for (int y = 0; y < next.height; ++y)
      for (int x = 0; x < next.width; ++x)
        next.at(x, y) = 0.25f * (prev.at(2 * x, 2 * y) + prev.at(2 * x + 1, 2 * y) +
                                 prev.at(2 * x, 2 * y + 1) + prev.at(2 * x + 1, 2 * y + 1));
    pyr.push_back(std::move(next));
  }
  return pyr;
}

struct LkResult {
  std::vector<Vec2> points;
  std::vector<bool> status;
};

// Pyramidal inverse-compositional Lucas-Kanade for translation-only flow.
// The template gradient and Hessian come from the previous surface, so each
// iteration only resamples the current one.
inline LkResult track_lk(const Grid& prev, const Grid& cur, const std::vector<Vec2>& prev_points,
                         const LkConfig& cfg = {}) {
  require(prev.width == cur.width && prev.height == cur.height, "track_lk: size mismatch");
  require(cfg.window % 2 == 1 && cfg.window >= 3, "track_lk: window must be odd >= 3");
  const int half = cfg.window / 2;
  const auto pyr_prev = build_pyramid(prev, cfg.levels);
  const auto pyr_cur = build_pyramid(cur, cfg.levels);
  const int levels = int(pyr_prev.size());

  LkResult out;
  out.points.resize(prev_points.size(), Vec2::Zero());
  out.status.resize(prev_points.size(), false);

  std::vector<float> tmpl(std::size_t(cfg.window) * cfg.window);
  std::vector<float> gx(tmpl.size()), gy(tmpl.size());

  for (std::size_t pi = 0; pi < prev_points.size(); ++pi) {
    const Vec2 p0 = prev_points[pi];
    if (!prev.inside(p0.x(), p0.y(), 1.0)) continue;
    Vec2 d = Vec2::Zero();  // displacement at the current level's scale
    bool ok = true;
    double residual = 0.0;
    for (int level = levels - 1; level >= 0 && ok; --level) {
      const Grid& ip = pyr_prev[std::size_t(level)];
      const Grid& ic = pyr_cur[std::size_t(level)];
      const double scale = double(1 << level);
      const Vec2 pl = p0 / scale;
      if (!ip.inside(pl.x(), pl.y(), half + 2)) {
        if (level == 0) ok = false;
        continue;  // too close to the border at this pyramid level
      }
      // template and its gradients from the previous surface
      double a11 = 0, a12 = 0, a22 = 0;
      int idx = 0;
      for (int wy = -half; wy <= half; ++wy)
        for (int wx = -half; wx <= half; ++wx, ++idx) {
          const double sx = pl.x() + wx, sy = pl.y() + wy;
          tmpl[std::size_t(idx)] = ip.sample(sx, sy);
          const double dx = 0.5 * (ip.sample(sx + 1, sy) - ip.sample(sx - 1, sy));
          const double dy = 0.5 * (ip.sample(sx, sy + 1) - ip.sample(sx, sy - 1));
          gx[std::size_t(idx)] = float(dx);
          gy[std::size_t(idx)] = float(dy);
          a11 += dx * dx;
          a12 += dx * dy;
          a22 += dy * dy;
        }
      const double det = a11 * a22 - a12 * a12;
      const double tr = a11 + a22;
      const double min_eig = (tr - std::sqrt(std::max(0.0, tr * tr - 4 * det))) / 2.0 /
                             double(cfg.window * cfg.window);
      if (min_eig < cfg.min_eig || det <= 0.0) {
        ok = false;
        break;
      }
      d *= 2.0;  // upsample displacement from the coarser level
      bool converged = false;
      for (int it = 0; it < cfg.max_iters; ++it) {
        const Vec2 q = pl + d;
        if (!ic.inside(q.x() - half, q.y() - half) ||
            !ic.inside(q.x() + half, q.y() + half)) {
          ok = false;
          break;
        }
        double b1 = 0, b2 = 0, res = 0;
        idx = 0;
        for (int wy = -half; wy <= half; ++wy)
          for (int wx = -half; wx <= half; ++wx, ++idx) {
            const double diff = ic.sample(q.x() + wx, q.y() + wy) - tmpl[std::size_t(idx)];
            b1 += diff * gx[std::size_t(idx)];
            b2 += diff * gy[std::size_t(idx)];
            res += std::abs(diff);
          }
        residual = res / double(cfg.window * cfg.window);
        // inverse composition: the template-side increment applies negated
        const double dx = (a22 * b1 - a12 * b2) / det;
        const double dy = (a11 * b2 - a12 * b1) / det;
        d -= Vec2(dx, dy);
        if (std::sqrt(dx * dx + dy * dy) < cfg.epsilon) {
          converged = true;
          break;
        }
      }
      if (level == 0 && !converged && residual > cfg.max_residual) ok = false;
    }
    if (!ok) continue;
    const Vec2 q = p0 + d;
    if (!cur.inside(q.x(), q.y(), 1.0) || residual > cfg.max_residual) continue;
    out.points[pi] = q;
    out.status[pi] = true;
  }
  return out;
}

}  // namespace evio
