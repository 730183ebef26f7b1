#pragma once

#include "evio/matcher.hpp"

namespace evio {

struct MatchSample {
  MatchInput input;
  MatchSet gt;
  Mat3 homography = Mat3::Identity();
};

// Associates detections across a record's homography with a mutual
// nearest-neighbor gate; everything else is labeled unmatched.
inline MatchSample build_match_sample(const Detection& da, const Detection& db,
                                      const Mat3& homography, int width, int height,
                                      double gate_px = 3.0) {
  MatchSample sample;
  sample.homography = homography;
  sample.input.keypoints_a = da.keypoints;
  sample.input.descriptors_a = da.descriptors;
  sample.input.keypoints_b = db.keypoints;
  sample.input.descriptors_b = db.descriptors;
  sample.input.width = width;
  sample.input.height = height;

  Warp warp;
  warp.homography = homography;
  const std::size_t na = da.keypoints.size(), nb = db.keypoints.size();
  std::vector<int> best_ab(na, -1), best_ba(nb, -1);
  std::vector<double> dist_ab(na, 1e300), dist_ba(nb, 1e300);
  for (std::size_t i = 0; i < na; ++i) {
    const Vec2 p = warp.apply(Vec2(da.keypoints[i].x, da.keypoints[i].y));
    for (std::size_t j = 0; j < nb; ++j) {
      const double d = (p - Vec2(db.keypoints[j].x, db.keypoints[j].y)).norm();
      if (d < dist_ab[i]) {
        dist_ab[i] = d;
        best_ab[i] = int(j);
      }
      if (d < dist_ba[j]) {
        dist_ba[j] = d;
        best_ba[j] = int(i);
      }
    }
  }
  std::vector<bool> matched_a(na, false), matched_b(nb, false);
  for (std::size_t i = 0; i < na; ++i) {
    const int j = best_ab[i];
    if (j < 0 || dist_ab[i] > gate_px) continue;
    if (best_ba[std::size_t(j)] != int(i)) continue;
    sample.gt.matches.push_back({int(i), j, 1.0});
    matched_a[i] = true;
    matched_b[std::size_t(j)] = true;
  }
  for (std::size_t i = 0; i < na; ++i)
    if (!matched_a[i]) sample.gt.unmatched_a.push_back(int(i));
  for (std::size_t j = 0; j < nb; ++j)
    if (!matched_b[j]) sample.gt.unmatched_b.push_back(int(j));
  return sample;
}

inline std::vector<MatchSample> build_match_samples(DetectorNet& detector, RecordCache& records,
                                                    double gate_px = 3.0,
                                                    int min_keypoints = 8) {
  std::vector<MatchSample> samples;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const DatasetRecord& rec = records.get(i);
    Detection da = detect(detector, rec.ts_a);
    Detection db = detect(detector, rec.ts_b);
    if (int(da.keypoints.size()) < min_keypoints || int(db.keypoints.size()) < min_keypoints)
      continue;
    samples.push_back(build_match_sample(da, db, rec.homography, rec.ts_a.width(),
                                         rec.ts_a.height(), gate_px));
  }
  return samples;
}

struct MatcherTrainConfig {
  int steps = 1500;
  int checkpoint_every = 500;
  double lr = 1e-3;
  double momentum = 0.9, beta2 = 0.999;
  std::uint64_t seed = 2;
  std::string checkpoint_dir;
  std::string log_csv;
  std::string resume_from;
};

inline void save_matcher(MatcherNet& net, const std::string& path) {
  ParamRegistry reg;
  net.register_params(reg);
  WeightStore::from_registry(reg).save(path);
}

inline void load_matcher(MatcherNet& net, const std::string& path) {
  ParamRegistry reg;
  net.register_params(reg);
  WeightStore::load(path).apply_to_registry(reg);
}

inline TrainReport train_matcher(MatcherNet& net, const std::vector<MatchSample>& samples,
                                 const MatcherTrainConfig& cfg,
                                 const std::string& out_weights = "") {
  require(!samples.empty(), "train_matcher: no training samples");
  ParamRegistry reg;
  net.register_params(reg);
  Optimizer opt = Optimizer::adam(cfg.lr, cfg.momentum, cfg.beta2);
  std::int64_t start_step = 0;
  if (!cfg.resume_from.empty()) {
    WeightStore ck = WeightStore::load(cfg.resume_from);
    ck.apply_to_registry(reg);
    opt.import_state(ck, "opt");
    start_step = opt.step_count();
  }
  std::ofstream log;
  if (!cfg.log_csv.empty()) {
    log.open(cfg.log_csv, start_step > 0 ? std::ios::app : std::ios::out);
    if (start_step == 0) log << "step,loss,num_gt_matches\n";
  }
  TrainReport report;
  for (std::int64_t step = start_step; step < cfg.steps; ++step) {
    const MatchSample& sample =
        samples[std::size_t(step_hash(cfg.seed, std::uint64_t(step)) % samples.size())];
    Tape t(true);
    Var log_p = net.forward_log_assignment(t, sample.input);
    Var loss = match_loss(t, log_p, sample.gt);
    const double loss_val = t.value(loss)[0];
    if (!std::isfinite(loss_val))
      throw NumericError("train_matcher: non-finite loss at step " + std::to_string(step));
    if (step == start_step) report.first_loss = loss_val;
    report.final_loss = loss_val;
    ++report.steps_run;
    t.backward(loss);
    opt.step(reg, t);
    if (log.is_open())
      log << step << "," << loss_val << "," << sample.gt.matches.size() << "\n";

    const bool at_checkpoint =
        !cfg.checkpoint_dir.empty() &&
        ((step + 1) % cfg.checkpoint_every == 0 || step + 1 == cfg.steps);
    if (at_checkpoint) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      WeightStore ck = WeightStore::from_registry(reg);
      opt.export_state(ck, "opt");
      const std::string path = cfg.checkpoint_dir + "/ckpt_" + std::to_string(step + 1) + ".bin";
      ck.save(path);
      WeightStore rounded = WeightStore::load(path);
      rounded.apply_to_registry(reg);
      opt.import_state(rounded, "opt");
    }
  }
  if (!out_weights.empty()) save_matcher(net, out_weights);
  return report;
}

struct MatcherEvalReport {
  double precision = 0.0;      // predicted matches within the gate
  double dustbin_recall = 0.0; // out-of-view keypoints left unmatched
  double mean_matches = 0.0;
};

inline MatcherEvalReport evaluate_matcher(const MatcherNet& net,
                                          const std::vector<MatchSample>& samples,
                                          double gate_px = 3.0) {
  std::size_t correct = 0, predicted = 0, oov_total = 0, oov_dustbin = 0, total_matches = 0;
  for (const MatchSample& sample : samples) {
    MatchSet pred = match_pair(net, sample.input);
    total_matches += pred.matches.size();
    Warp warp;
    warp.homography = sample.homography;
    const double w = sample.input.width - 1.0, h = sample.input.height - 1.0;
    std::vector<bool> matched_a(sample.input.keypoints_a.size(), false);
    for (const Match& m : pred.matches) {
      matched_a[std::size_t(m.index_a)] = true;
      const Keypoint& ka = sample.input.keypoints_a[std::size_t(m.index_a)];
      const Keypoint& kb = sample.input.keypoints_b[std::size_t(m.index_b)];
      const Vec2 p = warp.apply(Vec2(ka.x, ka.y));
      ++predicted;
      if ((p - Vec2(kb.x, kb.y)).norm() <= gate_px) ++correct;
    }
    for (std::size_t i = 0; i < sample.input.keypoints_a.size(); ++i) {
      const Keypoint& ka = sample.input.keypoints_a[i];
      const Vec2 p = warp.apply(Vec2(ka.x, ka.y));
      const bool out_of_view = p.x() < 0 || p.y() < 0 || p.x() > w || p.y() > h;
      if (!out_of_view) continue;
      ++oov_total;
      if (!matched_a[i]) ++oov_dustbin;
    }
  }
  MatcherEvalReport rep;
  rep.precision = predicted ? double(correct) / double(predicted) : 0.0;
  rep.dustbin_recall = oov_total ? double(oov_dustbin) / double(oov_total) : 1.0;
  rep.mean_matches = samples.empty() ? 0.0 : double(total_matches) / double(samples.size());
  return rep;
}

}  // namespace evio
