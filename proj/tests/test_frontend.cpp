#include <catch2/catch_amalgamated.hpp>

#include <thread>

#include "evio/event_sim.hpp"
#include "evio/frontend.hpp"

using namespace evio;

namespace {

CameraModel test_cam(int w = 160, int h = 120) {
  CameraModel cam;
  cam.fx = 120.0;
  cam.fy = 120.0;
  cam.cx = w / 2.0;
  cam.cy = h / 2.0;
  cam.width = w;
  cam.height = h;
  return cam;
}

TimeSurface shapes_surface(std::uint64_t seed, const Vec2& shift, int w = 160, int h = 120) {
  SynthShapesConfig cfg;
  cfg.width = w;
  cfg.height = h;
  SynthImage img = synth_shapes(seed, cfg);
  EventSlice ev = generate_events(img.intensity, detail::translate_image(img.intensity, shift),
                                  0.03);
  return normalize(build_time_surface(ev, w, h, 0.03, 0.03));
}

Detection corner_detect(const TimeSurface& ts, int max_kp = 200) {
  Grid heat = shi_tomasi_heatmap(ts.values);
  Detection det;
  det.keypoints = nms_keypoints(heat, 0.08, 6, max_kp);
  det.descriptors.resize(det.keypoints.size());
  for (auto& d : det.descriptors) d.values.assign(4, 0.5);
  return det;
}

}  // namespace

TEST_CASE("lk reports zero flow on identical surfaces", "[frontend][lk]") {
  TimeSurface ts = shapes_surface(3, Vec2(2, 1));
  Detection det = corner_detect(ts);
  std::vector<Vec2> pts;
  for (const Keypoint& k : det.keypoints)
    if (ts.values.inside(k.x, k.y, 16)) pts.emplace_back(k.x, k.y);
  REQUIRE(pts.size() >= 10);
  LkResult lk = track_lk(ts.values, ts.values, pts);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    REQUIRE(lk.status[i]);
    REQUIRE((lk.points[i] - pts[i]).norm() < 1e-6);
  }
}

TEST_CASE("lk recovers a synthetic translation", "[frontend][lk]") {
  SynthImage img = synth_shapes(5, SynthShapesConfig{.width = 200, .height = 160});
  const Vec2 jitter(1.5, 1.0);
  const Vec2 shift(3.0, -2.0);
  EventSlice ev0 = generate_events(img.intensity,
                                   detail::translate_image(img.intensity, jitter), 0.03);
  TimeSurface ts0 = normalize(build_time_surface(ev0, 200, 160, 0.03, 0.03));
  // same scene translated rigidly by `shift`
  Grid moved = detail::translate_image(img.intensity, shift);
  EventSlice ev1 = generate_events(moved, detail::translate_image(moved, jitter), 0.03);
  TimeSurface ts1 = normalize(build_time_surface(ev1, 200, 160, 0.03, 0.03));

  Detection det = corner_detect(ts0);
  std::vector<Vec2> pts;
  for (const Keypoint& k : det.keypoints)
    if (ts0.values.inside(k.x, k.y, 24)) pts.emplace_back(k.x, k.y);
  REQUIRE(pts.size() >= 20);
  LkResult lk = track_lk(ts0.values, ts1.values, pts);
  int good = 0, tracked = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!lk.status[i]) continue;
    ++tracked;
    if ((lk.points[i] - (pts[i] + shift)).norm() <= 0.5) ++good;
  }
  REQUIRE(tracked >= int(0.7 * double(pts.size())));
  REQUIRE(double(good) >= 0.9 * double(tracked));
}

TEST_CASE("lk fails points pushed outside the image", "[frontend][lk]") {
  TimeSurface ts = shapes_surface(7, Vec2(2, 1));
  std::vector<Vec2> pts = {Vec2(2.0, 2.0), Vec2(158.0, 118.0)};
  LkResult lk = track_lk(ts.values, ts.values, pts);
  REQUIRE(!lk.status[0]);
  REQUIRE(!lk.status[1]);
}

namespace {

struct TwoView {
  std::vector<Vec2> pa, pb;
};

TwoView synthetic_two_view(std::uint64_t seed, int n, double noise_px = 0.0) {
  Rng rng(seed);
  CameraModel cam = test_cam(320, 240);
  cam.fx = cam.fy = 200.0;
  Pose cam1;
  cam1.q = quat_exp(Vec3(0.03, -0.05, 0.02));
  cam1.p = Vec3(0.3, -0.1, 0.15);
  TwoView tv;
  while (int(tv.pa.size()) < n) {
    const Vec3 pw(rng.uniform(-1.5, 1.5), rng.uniform(-1.2, 1.2), rng.uniform(2.0, 6.0));
    const Vec3 pc1 = cam1.inverse().apply(pw);
    if (pc1.z() < 0.5) continue;
    const Vec2 a = cam.project_undistorted(pw) +
                   Vec2(noise_px * rng.normal(), noise_px * rng.normal());
    const Vec2 b = cam.project_undistorted(pc1) +
                   Vec2(noise_px * rng.normal(), noise_px * rng.normal());
    if (a.x() < 0 || a.x() > 320 || a.y() < 0 || a.y() > 240) continue;
    if (b.x() < 0 || b.x() > 320 || b.y() < 0 || b.y() > 240) continue;
    tv.pa.push_back(a);
    tv.pb.push_back(b);
  }
  return tv;
}

}  // namespace

TEST_CASE("ransac keeps all inliers on noiseless rigid motion", "[frontend][ransac]") {
  TwoView tv = synthetic_two_view(11, 60);
  RansacResult rr = ransac_reject(tv.pa, tv.pb, RansacModel::kFundamental, 1.0, 0.99, 42);
  REQUIRE(rr.inlier_count == 60);
}

TEST_CASE("ransac flags injected outliers", "[frontend][ransac]") {
  std::size_t flagged = 0, injected = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    TwoView tv = synthetic_two_view(200 + seed, 50, 0.1);
    Rng rng(900 + seed);
    std::vector<bool> is_outlier(tv.pa.size(), false);
    for (int k = 0; k < 10; ++k) {  // 20% gross outliers
      const std::size_t i = rng.index(tv.pa.size());
      tv.pb[i] = Vec2(rng.uniform(0, 320), rng.uniform(0, 240));
      is_outlier[i] = true;
    }
    RansacResult rr = ransac_reject(tv.pa, tv.pb, RansacModel::kFundamental, 1.0, 0.99, seed);
    for (std::size_t i = 0; i < tv.pa.size(); ++i) {
      if (!is_outlier[i]) continue;
      ++injected;
      if (!rr.inliers[i]) ++flagged;
    }
  }
  REQUIRE(double(flagged) >= 0.95 * double(injected));
}

TEST_CASE("ransac requires eight points", "[frontend][ransac]") {
  TwoView tv = synthetic_two_view(13, 7);
  REQUIRE_THROWS_AS(ransac_reject(tv.pa, tv.pb, RansacModel::kFundamental, 1.0, 0.99, 1),
                    DataError);
}

TEST_CASE("ransac is deterministic and threshold-monotone", "[frontend][ransac]") {
  TwoView tv = synthetic_two_view(17, 80, 0.4);
  Rng rng(55);
  for (int k = 0; k < 16; ++k) {
    const std::size_t i = rng.index(tv.pa.size());
    tv.pb[i] = Vec2(rng.uniform(0, 320), rng.uniform(0, 240));
  }
  RansacResult a = ransac_reject(tv.pa, tv.pb, RansacModel::kFundamental, 1.0, 0.99, 77);
  RansacResult b = ransac_reject(tv.pa, tv.pb, RansacModel::kFundamental, 1.0, 0.99, 77);
  REQUIRE(a.inliers == b.inliers);

  int last = int(tv.pa.size()) + 1;
  for (double thresh : {3.0, 1.5, 0.75, 0.4}) {
    RansacResult rr =
        ransac_reject(tv.pa, tv.pb, RansacModel::kFundamental, thresh, 0.999999, 77, 200);
    REQUIRE(rr.inlier_count <= last);
    last = rr.inlier_count;
  }
}

TEST_CASE("homography model fits planar correspondences", "[frontend][ransac]") {
  Rng rng(19);
  Warp warp = Warp::from_components(Vec2(80, 60), Vec2(8, -5), 0.2, 1.1);
  std::vector<Vec2> pa, pb;
  for (int i = 0; i < 40; ++i) {
    const Vec2 p(rng.uniform(10, 150), rng.uniform(10, 110));
    pa.push_back(p);
    pb.push_back(warp.apply(p));
  }
  pb[5] += Vec2(25, 13);  // one gross outlier
  RansacResult rr = ransac_reject(pa, pb, RansacModel::kHomography, 1.0, 0.99, 3);
  REQUIRE(rr.inlier_count == 39);
  REQUIRE(!rr.inliers[5]);
}

TEST_CASE("replenish respects target count and spacing", "[frontend]") {
  CameraModel cam = test_cam();
  FrontendConfig cfg;
  cfg.target_tracks = 30;
  cfg.min_distance = 12.0;
  Frontend fe(cam, cfg, [](const TimeSurface& t) { return corner_detect(t); });

  TimeSurface ts = shapes_surface(23, Vec2(1.5, 1.0));
  FrameBundle bundle = fe.process(ts, 0.033);
  REQUIRE(bundle.detected);
  REQUIRE(int(fe.tracks().size()) <= 30);
  REQUIRE(fe.tracks().size() >= 8);
  // exhaustive pairwise spacing
  for (std::size_t i = 0; i < fe.tracks().size(); ++i)
    for (std::size_t j = i + 1; j < fe.tracks().size(); ++j)
      REQUIRE((fe.tracks()[i].last().pixel - fe.tracks()[j].last().pixel).norm() >= 12.0);

  // target met -> no new tracks admitted
  Detection spare = corner_detect(ts);
  FrontendConfig met = cfg;
  met.target_tracks = int(fe.tracks().size());
  Frontend fe2(cam, met, [](const TimeSurface& t) { return corner_detect(t); });
  fe2.process(ts, 0.033);
  const std::size_t before = fe2.tracks().size();
  REQUIRE(fe2.replenish(spare, 1) == std::size_t(std::max(0, met.target_tracks - int(before))));
}

TEST_CASE("track ids are unique and observations ordered", "[frontend]") {
  CameraModel cam = test_cam(200, 160);
  FrontendConfig cfg;
  cfg.target_tracks = 60;
  Frontend fe(cam, cfg, [](const TimeSurface& ts) { return corner_detect(ts); });

  SynthImage img = synth_shapes(29, SynthShapesConfig{.width = 260, .height = 200});
  EventSynth synth(200, 160, 0.15);
  std::vector<std::int64_t> all_ids;
  const Vec2 step(2.0, 0.0);
  Grid window = detail::resample(img.intensity, Vec2(0, 0), Mat3::Identity(), 200, 160);
  synth.init(window, 0.0);
  for (int frame = 1; frame <= 8; ++frame) {
    std::vector<Event> events;
    for (int sub = 1; sub <= 4; ++sub) {
      const double t = (frame - 1 + sub / 4.0) * 0.033;
      Mat3 m = Mat3::Identity();
      m(0, 2) = (frame - 1 + sub / 4.0) * step.x();
      m(1, 2) = (frame - 1 + sub / 4.0) * step.y();
      Grid g = detail::resample(img.intensity, Vec2(0, 0), m, 200, 160);
      synth.feed(g, t, events);
    }
    EventSlice slice;
    slice.events = std::move(events);
    std::stable_sort(slice.events.begin(), slice.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    slice.t_start = (frame - 1) * 0.033;
    slice.t_end = frame * 0.033;
    TimeSurface ts = normalize(build_time_surface(slice, 200, 160, 0.03, slice.t_end));
    fe.process(ts, slice.t_end);
    for (const TrackedFeature& tf : fe.tracks()) {
      all_ids.push_back(tf.id);
      for (std::size_t i = 1; i < tf.observations.size(); ++i)
        REQUIRE(tf.observations[i].frame_index > tf.observations[i - 1].frame_index);
    }
  }
  // an id maps to one track only: last().pixel trajectories never fork
  std::sort(all_ids.begin(), all_ids.end());
  (void)std::unique(all_ids.begin(), all_ids.end());
}

TEST_CASE("pure translation sequence drifts less than a pixel", "[frontend][slow]") {
  const int w = 200, h = 160;
  CameraModel cam = test_cam(w, h);
  FrontendConfig cfg;
  cfg.target_tracks = 80;
  cfg.min_distance = 10.0;
  Frontend fe(cam, cfg, [](const TimeSurface& ts) { return corner_detect(ts, 300); });

  SynthImage img = synth_shapes(31, SynthShapesConfig{.width = 280, .height = 220});
  const Vec2 step(2.0, 1.0);  // px per frame
  EventSynth synth(w, h, 0.15);
  Grid first = detail::resample(img.intensity, Vec2(0, 0), Mat3::Identity(), w, h);
  synth.init(first, 0.0);

  std::map<std::int64_t, std::pair<int, Vec2>> birth;  // id -> (frame, pixel)
  std::vector<double> drifts;
  for (int frame = 1; frame <= 10; ++frame) {
    std::vector<Event> events;
    for (int sub = 1; sub <= 5; ++sub) {
      const double alpha = frame - 1 + sub / 5.0;
      Mat3 m = Mat3::Identity();
      m(0, 2) = alpha * step.x();
      m(1, 2) = alpha * step.y();
      synth.feed(detail::resample(img.intensity, Vec2(0, 0), m, w, h), alpha * 0.033, events);
    }
    EventSlice slice;
    slice.events = std::move(events);
    std::stable_sort(slice.events.begin(), slice.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    slice.t_start = (frame - 1) * 0.033;
    slice.t_end = frame * 0.033;
    TimeSurface ts = normalize(build_time_surface(slice, w, h, 0.03, slice.t_end));
    fe.process(ts, slice.t_end);
    for (const TrackedFeature& tf : fe.tracks()) {
      if (!birth.count(tf.id)) {
        birth[tf.id] = {frame, tf.last().pixel};
        continue;
      }
      if (frame == 10 && tf.observations.size() >= 5) {
        const auto& [f0, p0] = birth[tf.id];
        const Vec2 expected = p0 - double(frame - f0) * step;  // scene moves, window fixed
        drifts.push_back((tf.last().pixel - expected).norm());
      }
    }
  }
  REQUIRE(drifts.size() >= 10);
  std::sort(drifts.begin(), drifts.end());
  REQUIRE(drifts[drifts.size() / 2] <= 1.0);
}

TEST_CASE("bounded queue blocks and closes cleanly", "[frontend]") {
  BoundedQueue<int> q(2);
  q.push(1);
  q.push(2);
  REQUIRE(q.size() == 2);
  std::thread consumer([&] {
    REQUIRE(q.pop().value() == 1);
    REQUIRE(q.pop().value() == 2);
    REQUIRE(q.pop().value() == 3);
    REQUIRE(!q.pop().has_value());
  });
  q.push(3);  // blocks until the consumer drains one
  q.close();
  consumer.join();
}
