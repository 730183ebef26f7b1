#pragma once

#include "evio/geometry.hpp"

namespace evio {

namespace detail {

struct Normalization {
  Mat3 t = Mat3::Identity();
  std::vector<Vec2> points;
};

inline Normalization hartley_normalize(const std::vector<Vec2>& pts) {
  Normalization out;
  Vec2 centroid = Vec2::Zero();
  for (const Vec2& p : pts) centroid += p;
  centroid /= double(pts.size());
  double mean_dist = 0.0;
  for (const Vec2& p : pts) mean_dist += (p - centroid).norm();
  mean_dist /= double(pts.size());
  const double s = mean_dist > 1e-12 ? std::sqrt(2.0) / mean_dist : 1.0;
  out.t << s, 0, -s * centroid.x(), 0, s, -s * centroid.y(), 0, 0, 1;
  out.points.reserve(pts.size());
  for (const Vec2& p : pts) out.points.emplace_back(s * (p - centroid));
  return out;
}

}  // namespace detail

// Normalized 8-point fundamental matrix (rank-2 enforced).
inline Mat3 fundamental_8point(const std::vector<Vec2>& pa, const std::vector<Vec2>& pb) {
  require(pa.size() == pb.size() && pa.size() >= 8,
          "fundamental_8point: need at least 8 correspondences");
  auto na = detail::hartley_normalize(pa);
  auto nb = detail::hartley_normalize(pb);
  Eigen::MatrixXd a(long(pa.size()), 9);
  for (long i = 0; i < long(pa.size()); ++i) {
    const Vec2& x = na.points[std::size_t(i)];
    const Vec2& y = nb.points[std::size_t(i)];
    a.row(i) << y.x() * x.x(), y.x() * x.y(), y.x(), y.y() * x.x(), y.y() * x.y(), y.y(), x.x(),
        x.y(), 1.0;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  Eigen::Matrix<double, 9, 1> f = svd.matrixV().col(8);
  Mat3 fm;
  fm << f(0), f(1), f(2), f(3), f(4), f(5), f(6), f(7), f(8);
  Eigen::JacobiSVD<Mat3> rank_svd(fm, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 sv = rank_svd.singularValues();
  sv.z() = 0.0;
  fm = rank_svd.matrixU() * sv.asDiagonal() * rank_svd.matrixV().transpose();
  return nb.t.transpose() * fm * na.t;
}

inline double sampson_distance_sq(const Mat3& f, const Vec2& a, const Vec2& b) {
  const Vec3 xa(a.x(), a.y(), 1.0), xb(b.x(), b.y(), 1.0);
  const Vec3 fa = f * xa;
  const Vec3 ftb = f.transpose() * xb;
  const double err = xb.dot(fa);
  const double denom = fa.x() * fa.x() + fa.y() * fa.y() + ftb.x() * ftb.x() + ftb.y() * ftb.y();
  return denom > 1e-18 ? err * err / denom : 1e18;
}

// DLT homography from >= 4 correspondences.
inline Mat3 homography_dlt(const std::vector<Vec2>& pa, const std::vector<Vec2>& pb) {
  require(pa.size() == pb.size() && pa.size() >= 4, "homography_dlt: need at least 4 points");
  auto na = detail::hartley_normalize(pa);
  auto nb = detail::hartley_normalize(pb);
  Eigen::MatrixXd a(2 * long(pa.size()), 9);
  for (long i = 0; i < long(pa.size()); ++i) {
    const Vec2& x = na.points[std::size_t(i)];
    const Vec2& y = nb.points[std::size_t(i)];
    a.row(2 * i) << -x.x(), -x.y(), -1, 0, 0, 0, y.x() * x.x(), y.x() * x.y(), y.x();
    a.row(2 * i + 1) << 0, 0, 0, -x.x(), -x.y(), -1, y.y() * x.x(), y.y() * x.y(), y.y();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);
  Mat3 hm;
  hm << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  return nb.t.inverse() * hm * na.t;
}

inline double homography_transfer_sq(const Mat3& h, const Vec2& a, const Vec2& b) {
  const Vec3 q = h * Vec3(a.x(), a.y(), 1.0);
  if (std::abs(q.z()) < 1e-12) return 1e18;
  return (Vec2(q.x() / q.z(), q.y() / q.z()) - b).squaredNorm();
}

enum class RansacModel { kFundamental, kHomography };

struct RansacResult {
  std::vector<bool> inliers;
  Mat3 model = Mat3::Zero();
  int inlier_count = 0;
  int iterations = 0;
};

// Seeded RANSAC outlier rejection over correspondences in pixel units.
inline RansacResult ransac_reject(const std::vector<Vec2>& pa, const std::vector<Vec2>& pb,
                                  RansacModel model, double inlier_threshold_px,
                                  double confidence, std::uint64_t seed, int max_iters = 500) {
  const std::size_t n = pa.size();
  const std::size_t sample_size = model == RansacModel::kFundamental ? 8 : 4;
  require(pa.size() == pb.size(), "ransac_reject: size mismatch");
  require(n >= sample_size,
          "ransac_reject: insufficient correspondences (need >= " +
              std::to_string(sample_size) + " for parallax estimation)");
  require(inlier_threshold_px > 0.0 && confidence > 0.0 && confidence < 1.0,
          "ransac_reject: bad parameters");

  Rng rng(seed);
  const double thresh_sq = inlier_threshold_px * inlier_threshold_px;
  auto score = [&](const Mat3& m, std::vector<bool>& mask) {
    int count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = model == RansacModel::kFundamental
                           ? sampson_distance_sq(m, pa[i], pb[i])
                           : homography_transfer_sq(m, pa[i], pb[i]);
      mask[i] = d <= thresh_sq;
      count += mask[i];
    }
    return count;
  };

  RansacResult best;
  best.inliers.assign(n, false);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::vector<Vec2> sa(sample_size), sb(sample_size);
  std::vector<bool> mask(n, false);
  int needed = max_iters;
  int it = 0;
  for (; it < needed && it < max_iters; ++it) {
    // partial Fisher-Yates for the minimal sample
    for (std::size_t k = 0; k < sample_size; ++k)
      std::swap(idx[k], idx[k + rng.index(n - k)]);
    for (std::size_t k = 0; k < sample_size; ++k) {
      sa[k] = pa[idx[k]];
      sb[k] = pb[idx[k]];
    }
    Mat3 m;
    try {
      m = model == RansacModel::kFundamental ? fundamental_8point(sa, sb)
                                             : homography_dlt(sa, sb);
    } catch (const DataError&) {
      continue;
    }
    const int count = score(m, mask);
    if (count > best.inlier_count) {
      best.inlier_count = count;
      best.inliers = mask;
      best.model = m;
      const double w = double(count) / double(n);
      const double denom = std::log(std::max(1e-12, 1.0 - std::pow(w, double(sample_size))));
      if (denom < 0.0)
        needed = std::min(max_iters, int(std::ceil(std::log(1.0 - confidence) / denom)));
    }
  }
  best.iterations = it;

  // refit on the inlier set when possible
  if (best.inlier_count >= int(sample_size)) {
    std::vector<Vec2> ia, ib;
    for (std::size_t i = 0; i < n; ++i)
      if (best.inliers[i]) {
        ia.push_back(pa[i]);
        ib.push_back(pb[i]);
      }
    try {
      const Mat3 refit = model == RansacModel::kFundamental ? fundamental_8point(ia, ib)
                                                            : homography_dlt(ia, ib);
      std::vector<bool> refit_mask(n, false);
      const int refit_count = score(refit, refit_mask);
      if (refit_count >= best.inlier_count) {
        best.inlier_count = refit_count;
        best.inliers = refit_mask;
        best.model = refit;
      }
    } catch (const DataError&) {
    }
  }
  return best;
}

}  // namespace evio
