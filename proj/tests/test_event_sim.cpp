#include <catch2/catch_amalgamated.hpp>
#include <map>

#include "evio/event_sim.hpp"

using namespace evio;

TEST_CASE("warp components compose as expected", "[sim]") {
  Warp id = Warp::from_components(Vec2(30, 40), Vec2::Zero(), 0.0, 1.0);
  REQUIRE((id.homography - Mat3::Identity()).norm() < 1e-12);

  Warp rot = Warp::from_components(Vec2(0, 0), Vec2::Zero(), M_PI / 2, 1.0);
  const Vec2 mapped = rot.apply(Vec2(1, 0));
  REQUIRE(mapped.x() == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(mapped.y() == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("sample_warp is deterministic in the seed", "[sim]") {
  WarpConfig cfg;
  Warp a = sample_warp(42, Vec2(80, 60), cfg);
  Warp b = sample_warp(42, Vec2(80, 60), cfg);
  REQUIRE(a.homography == b.homography);
  REQUIRE(a.rotation == b.rotation);
  REQUIRE(a.scale == b.scale);
  Warp c = sample_warp(43, Vec2(80, 60), cfg);
  REQUIRE(a.homography != c.homography);
}

TEST_CASE("warp homography reproduces its geometric construction", "[sim]") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const Vec2 center(rng.uniform(10, 100), rng.uniform(10, 80));
    const Vec2 offset(rng.uniform(-15, 15), rng.uniform(-15, 15));
    const double theta = rng.uniform(-0.6, 0.6);
    const double s = rng.uniform(0.7, 1.4);
    Warp w = Warp::from_components(center, offset, theta, s);
    for (const Vec2& p : {Vec2(0, 0), Vec2(120, 0), Vec2(0, 90), Vec2(120, 90)}) {
      Eigen::Rotation2Dd rot(theta);
      const Vec2 manual = center + offset + s * (rot * (p - center));
      REQUIRE((w.apply(p) - manual).norm() < 1e-9);
    }
    // components reconstruct the homography
    Warp again = Warp::from_components(w.crop_center, w.center_offset, w.rotation, w.scale);
    REQUIRE((again.homography - w.homography).norm() < 1e-12);
  }
}

TEST_CASE("no brightness change emits no events", "[sim]") {
  Rng rng(5);
  Grid img(16, 16);
  for (auto& v : img.values) v = float(rng.uniform(0.1, 0.9));
  EventSlice s = generate_events(img, img, 0.05);
  REQUIRE(s.events.empty());
}

TEST_CASE("a 2C log step emits exactly two positive events", "[sim]") {
  EventSynthConfig cfg;
  cfg.contrast = 0.15;
  Grid img0(4, 4, 0.2f);
  Grid img1 = img0;
  const double l0 = std::log(double(img0.at(1, 1)) + cfg.log_eps);
  img1.at(1, 1) = float(std::exp(l0 + 2.0 * cfg.contrast + 1e-6) - cfg.log_eps);
  EventSlice s = generate_events(img0, img1, 0.02, cfg);
  REQUIRE(s.events.size() == 2);
  for (const Event& e : s.events) {
    REQUIRE(e.p == 1);
    REQUIRE(e.x == 1);
    REQUIRE(e.y == 1);
  }
  REQUIRE(s.events[0].t < s.events[1].t);
}

TEST_CASE("event synthesis matches a 10x finer-step oracle", "[sim]") {
  Rng rng(11);
  Grid img0(16, 16), img1(16, 16);
  for (auto& v : img0.values) v = float(rng.uniform(0.05, 0.95));
  for (auto& v : img1.values) v = float(rng.uniform(0.05, 0.95));
  EventSynthConfig coarse;
  coarse.n_steps = 4;
  EventSynthConfig fine = coarse;
  fine.n_steps = 40;
  EventSlice a = generate_events(img0, img1, 0.03, coarse);
  EventSlice b = generate_events(img0, img1, 0.03, fine);
  // the crossing levels are discretization-independent, so per-pixel counts
  // and polarities agree; crossing times shift with the sub-step curve
  REQUIRE(a.events.size() == b.events.size());
  auto per_pixel = [](const EventSlice& s) {
    std::map<std::tuple<int, int, int>, int> m;
    for (const Event& e : s.events) m[{e.x, e.y, e.p}]++;
    return m;
  };
  REQUIRE(per_pixel(a) == per_pixel(b));
  for (const Event& e : a.events) {
    REQUIRE(e.t >= 0.0);
    REQUIRE(e.t <= 0.03);
  }
  REQUIRE(a.time_ordered());
  REQUIRE(b.time_ordered());
}

TEST_CASE("swapping the image pair flips every polarity", "[sim]") {
  Rng rng(13);
  Grid img0(12, 12), img1(12, 12);
  for (auto& v : img0.values) v = float(rng.uniform(0.05, 0.95));
  for (auto& v : img1.values) v = float(rng.uniform(0.05, 0.95));
  EventSlice fwd = generate_events(img0, img1, 0.02);
  EventSlice bwd = generate_events(img1, img0, 0.02);
  REQUIRE(fwd.events.size() == bwd.events.size());
  auto count = [](const EventSlice& s, int x, int y, int p) {
    std::size_t n = 0;
    for (const Event& e : s.events)
      if (e.x == x && e.y == y && e.p == p) ++n;
    return n;
  };
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x) {
      REQUIRE(count(fwd, x, y, +1) == count(bwd, x, y, -1));
      REQUIRE(count(fwd, x, y, -1) == count(bwd, x, y, +1));
    }
}

TEST_CASE("event count is floor(|dlog|/C) for monotone ramps", "[sim]") {
  EventSynthConfig cfg;
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Grid img0(2, 2, float(rng.uniform(0.1, 0.5)));
    Grid img1 = img0;
    img1.at(0, 0) = float(rng.uniform(0.05, 0.95));
    const double dlog = std::abs(std::log(double(img1.at(0, 0)) + cfg.log_eps) -
                                 std::log(double(img0.at(0, 0)) + cfg.log_eps));
    EventSlice s = generate_events(img0, img1, 0.01, cfg);
    const long expect = long(dlog / cfg.contrast);
    REQUIRE(std::abs(long(s.events.size()) - expect) <= 1);
  }
}

TEST_CASE("shapes: a single triangle has three corners", "[sim]") {
  SynthShapesConfig cfg;
  cfg.forced_kind = 0;
  cfg.forced_count = 1;
  cfg.polygon_vertices = 3;
  SynthImage img = synth_shapes(123, cfg);
  REQUIRE(img.gt_corners.size() == 3);
}

TEST_CASE("shapes: a 4x4 checkerboard has nine inner corners", "[sim]") {
  SynthShapesConfig cfg;
  cfg.forced_kind = 3;
  cfg.forced_count = 1;
  cfg.checkerboard_squares = 4;
  SynthImage img = synth_shapes(7, cfg);
  REQUIRE(img.gt_corners.size() == 9);
}

TEST_CASE("shapes generator self-audit over 1000 seeds", "[sim]") {
  SynthShapesConfig cfg;
  int rich = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    SynthImage img = synth_shapes(seed, cfg);
    for (const Vec2& c : img.gt_corners) {
      REQUIRE(c.x() >= 0.0);
      REQUIRE(c.y() >= 0.0);
      REQUIRE(c.x() <= cfg.width - 1);
      REQUIRE(c.y() <= cfg.height - 1);
    }
    if (img.gt_corners.size() >= 8) ++rich;
  }
  REQUIRE(rich >= 950);
}

TEST_CASE("training pair with identity warp has identical correspondences", "[sim]") {
  SynthImage img = synth_shapes(31);
  TrainingPairConfig cfg;
  cfg.crop_width = 96;
  cfg.crop_height = 80;
  Warp identity = Warp::from_components(Vec2(48, 40), Vec2::Zero(), 0.0, 1.0);
  cfg.forced_warp = &identity;
  TrainingPair pair = make_training_pair(img.intensity, 5, cfg);
  REQUIRE(!pair.correspondences.empty());
  for (const auto& [a, b] : pair.correspondences) REQUIRE((a - b).norm() < 1e-12);
}

TEST_CASE("training pair with pure translation shifts all correspondences", "[sim]") {
  SynthImage img = synth_shapes(37);
  TrainingPairConfig cfg;
  cfg.crop_width = 96;
  cfg.crop_height = 80;
  Warp shift = Warp::from_components(Vec2(48, 40), Vec2(10, 0), 0.0, 1.0);
  cfg.forced_warp = &shift;
  TrainingPair pair = make_training_pair(img.intensity, 5, cfg);
  REQUIRE(!pair.correspondences.empty());
  for (const auto& [a, b] : pair.correspondences) {
    REQUIRE(b.x() - a.x() == Catch::Approx(10.0).margin(1e-9));
    REQUIRE(b.y() - a.y() == Catch::Approx(0.0).margin(1e-9));
  }
}

TEST_CASE("100 random pairs satisfy the homography within 1e-6", "[sim]") {
  SynthImage img = synth_shapes(41, SynthShapesConfig{.width = 320, .height = 240});
  TrainingPairConfig cfg;
  cfg.crop_width = 120;
  cfg.crop_height = 88;
  int produced = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    TrainingPair pair = make_training_pair(img.intensity, seed, cfg);
    ++produced;
    REQUIRE(pair.ts_a.width() == cfg.crop_width);
    REQUIRE(pair.ts_b.height() == cfg.crop_height);
    for (const auto& [a, b] : pair.correspondences)
      REQUIRE((pair.warp.apply(a) - b).norm() < 1e-6);
  }
  REQUIRE(produced == 100);
}

TEST_CASE("dataset record round trip", "[sim]") {
  SynthImage img = synth_shapes(53);
  TrainingPairConfig cfg;
  cfg.crop_width = 64;
  cfg.crop_height = 48;
  TrainingPair pair = make_training_pair(img.intensity, 9, cfg);
  save_record(pair, "sim_record_test/rec_000");
  DatasetRecord rec = load_record("sim_record_test/rec_000");
  REQUIRE(rec.ts_a.values.values == pair.ts_a.values.values);
  REQUIRE(rec.ts_b.values.values == pair.ts_b.values.values);
  REQUIRE((rec.homography - pair.warp.homography).norm() < 1e-12);
  REQUIRE(rec.correspondences.size() == pair.correspondences.size());
}
