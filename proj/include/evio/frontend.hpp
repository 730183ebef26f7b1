#pragma once

#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>

#include "evio/camera.hpp"
#include "evio/detector_train.hpp"
#include "evio/lk.hpp"
#include "evio/ransac.hpp"

namespace evio {

struct TrackObservation {
  int frame_index = 0;
  Vec2 pixel = Vec2::Zero();         // raw (distorted) pixel position
  Vec2 undistorted = Vec2::Zero();   // undistorted pixel coordinates
  Vec2 normalized = Vec2::Zero();    // undistorted normalized image plane
};

struct TrackedFeature {
  std::int64_t id = 0;
  std::vector<TrackObservation> observations;

  const TrackObservation& last() const { return observations.back(); }
};

struct FrameBundle {
  int frame_index = 0;
  double t_ref = 0.0;
  std::shared_ptr<const TimeSurface> ts;  // normalized
  std::vector<std::int64_t> active_track_ids;
  bool detected = false;  // keypoints/descriptors populated this frame
  std::vector<Keypoint> keypoints;
  std::vector<Descriptor> descriptors;
};

struct FrontendConfig {
  int target_tracks = 150;
  double min_distance = 15.0;  // px between a new keypoint and existing tracks
  LkConfig lk;
  double ransac_threshold = 1.0;  // undistorted px
  double ransac_confidence = 0.99;
  RansacModel ransac_model = RansacModel::kFundamental;
  std::uint64_t seed = 7;
  int min_tracks_for_ransac = 8;
};

// Keeps detection separate from new-track admission so callers can run the
// detector only when tracks are needed.
inline std::vector<std::size_t> select_replenish(const std::vector<Keypoint>& keypoints,
                                                 const std::vector<Vec2>& existing,
                                                 double min_distance, int budget) {
  std::vector<std::size_t> picked;
  if (budget <= 0) return picked;
  std::vector<Vec2> occupied = existing;
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    if (int(picked.size()) >= budget) break;
    const Vec2 p(keypoints[i].x, keypoints[i].y);
    bool ok = true;
    for (const Vec2& q : occupied)
      if ((p - q).norm() < min_distance) {
        ok = false;
        break;
      }
    if (!ok) continue;
    picked.push_back(i);
    occupied.push_back(p);
  }
  return picked;
}

// Per-frame tracking pipeline: build/normalize the surface upstream, track
// features with pyramidal LK, reject outliers with RANSAC, replenish from the
// detector when the track count drops.
class Frontend {
 public:
  using DetectFn = std::function<Detection(const TimeSurface&)>;

  Frontend(CameraModel cam, FrontendConfig cfg, DetectFn detect_fn)
      : cam_(std::move(cam)), cfg_(std::move(cfg)), detect_(std::move(detect_fn)) {}

  const std::vector<TrackedFeature>& tracks() const { return tracks_; }
  const FrontendConfig& config() const { return cfg_; }

  FrameBundle process(const TimeSurface& normalized_ts, double t_ref) {
    require(normalized_ts.normalized, "frontend: time surface must be normalized");
    FrameBundle bundle;
    bundle.frame_index = frame_index_;
    bundle.t_ref = t_ref;
    auto ts = std::make_shared<TimeSurface>(normalized_ts);
    bundle.ts = ts;

    if (prev_ts_) {
      std::vector<Vec2> prev_points;
      std::vector<std::size_t> track_idx;
      for (std::size_t i = 0; i < tracks_.size(); ++i) {
        prev_points.push_back(tracks_[i].last().pixel);
        track_idx.push_back(i);
      }
      if (!prev_points.empty()) {
        LkResult lk = track_lk(prev_ts_->values, ts->values, prev_points, cfg_.lk);
        std::vector<std::size_t> tracked;
        std::vector<Vec2> ua, ub;
        for (std::size_t i = 0; i < prev_points.size(); ++i) {
          if (!lk.status[i]) continue;
          tracked.push_back(i);
          ua.push_back(cam_.undistort_pixel(prev_points[i]));
          ub.push_back(cam_.undistort_pixel(lk.points[i]));
        }
        std::vector<bool> keep(tracked.size(), true);
        if (int(tracked.size()) >= cfg_.min_tracks_for_ransac) {
          RansacResult rr = ransac_reject(ua, ub, cfg_.ransac_model, cfg_.ransac_threshold,
                                          cfg_.ransac_confidence,
                                          cfg_.seed + std::uint64_t(frame_index_) * 7919);
          keep = rr.inliers;
        }
        std::vector<TrackedFeature> survivors;
        for (std::size_t k = 0; k < tracked.size(); ++k) {
          if (!keep[k]) continue;
          TrackedFeature& tf = tracks_[track_idx[tracked[k]]];
          TrackObservation obs;
          obs.frame_index = frame_index_;
          obs.pixel = lk.points[tracked[k]];
          obs.undistorted = ub[k];
          obs.normalized = cam_.pixel_to_normalized(obs.pixel);
          tf.observations.push_back(obs);
          survivors.push_back(std::move(tf));
        }
        tracks_ = std::move(survivors);
      }
    }

    if (int(tracks_.size()) < cfg_.target_tracks && detect_) {
      Detection det = detect_(*ts);
      bundle.detected = true;
      bundle.keypoints = det.keypoints;
      bundle.descriptors = det.descriptors;
      replenish(det, bundle.frame_index);
    }

    for (const TrackedFeature& tf : tracks_) bundle.active_track_ids.push_back(tf.id);
    prev_ts_ = ts;
    ++frame_index_;
    return bundle;
  }

  // Admits detector keypoints at least min_distance away from live tracks.
  std::size_t replenish(const Detection& det, int frame_index) {
    std::vector<Vec2> existing;
    for (const TrackedFeature& tf : tracks_) existing.push_back(tf.last().pixel);
    const int budget = cfg_.target_tracks - int(tracks_.size());
    auto picked = select_replenish(det.keypoints, existing, cfg_.min_distance, budget);
    for (std::size_t i : picked) {
      TrackedFeature tf;
      tf.id = next_id_++;
      TrackObservation obs;
      obs.frame_index = frame_index;
      obs.pixel = Vec2(det.keypoints[i].x, det.keypoints[i].y);
      obs.undistorted = cam_.undistort_pixel(obs.pixel);
      obs.normalized = cam_.pixel_to_normalized(obs.pixel);
      tf.observations.push_back(obs);
      tracks_.push_back(std::move(tf));
    }
    return picked.size();
  }

  const TrackedFeature* find_track(std::int64_t id) const {
    for (const TrackedFeature& tf : tracks_)
      if (tf.id == id) return &tf;
    return nullptr;
  }

 private:
  CameraModel cam_;
  FrontendConfig cfg_;
  DetectFn detect_;
  std::vector<TrackedFeature> tracks_;
  std::shared_ptr<const TimeSurface> prev_ts_;
  int frame_index_ = 0;
  std::int64_t next_id_ = 1;
};

// Bounded FIFO handoff between the frontend and backend stages. push blocks
// when full; pop blocks until an item or shutdown arrives.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity = 4) : capacity_(capacity) {}

  void push(T item) {
    std::unique_lock lock(mutex_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
    if (closed_) return;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
  }

  std::optional<T> pop() {
    std::unique_lock lock(mutex_);
    not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return items_.size();
  }

 private:
  mutable std::mutex mutex_;
  std::condition_variable not_empty_, not_full_;
  std::deque<T> items_;
  std::size_t capacity_;
  bool closed_ = false;
};

}  // namespace evio
