#pragma once

#include <memory>

#include "evio/detector.hpp"
#include "evio/weights.hpp"

namespace evio {

struct Detection {
  std::vector<Keypoint> keypoints;
  std::vector<Descriptor> descriptors;
};

inline Detection detect(DetectorNet& net, const TimeSurface& ts, double conf_threshold,
                        int nms_radius, int max_keypoints) {
  Tape t(false);
  DetectorOutput out = net.forward(t, ts, false);
  Detection det;
  det.keypoints = decode_keypoints(t.value(out.logits), ts.width(), ts.height(),
                                   conf_threshold, nms_radius, max_keypoints);
  det.descriptors = sample_descriptors(t.value(out.desc), det.keypoints);
  return det;
}

inline Detection detect(DetectorNet& net, const TimeSurface& ts) {
  return detect(net, ts, net.cfg.conf_threshold, net.cfg.nms_radius, net.cfg.max_keypoints);
}

inline void save_detector(DetectorNet& net, const std::string& path) {
  ParamRegistry reg;
  net.register_params(reg);
  WeightStore::from_registry(reg).save(path);
}

inline void load_detector(DetectorNet& net, const std::string& path) {
  ParamRegistry reg;
  net.register_params(reg);
  WeightStore::load(path).apply_to_registry(reg);
}

// ---- dataset access ----

inline std::vector<std::string> list_records(const std::string& dataset_dir) {
  namespace fs = std::filesystem;
  require(fs::exists(dataset_dir), "dataset directory not found: " + dataset_dir);
  std::vector<std::string> dirs;
  for (const auto& entry : fs::directory_iterator(dataset_dir))
    if (entry.is_directory() && entry.path().filename().string().rfind("rec_", 0) == 0)
      dirs.push_back(entry.path().string());
  std::sort(dirs.begin(), dirs.end());
  require(!dirs.empty(), "dataset has no rec_* records: " + dataset_dir);
  return dirs;
}

// In-memory record cache; desk-scale datasets fit comfortably.
class RecordCache {
 public:
  explicit RecordCache(std::vector<std::string> dirs) : dirs_(std::move(dirs)) {
    cache_.resize(dirs_.size());
  }
  std::size_t size() const { return dirs_.size(); }
  const std::string& dir(std::size_t i) const { return dirs_[i]; }
  const DatasetRecord& get(std::size_t i) {
    if (!cache_[i]) cache_[i] = std::make_unique<DatasetRecord>(load_record(dirs_[i]));
    return *cache_[i];
  }

 private:
  std::vector<std::string> dirs_;
  std::vector<std::unique_ptr<DatasetRecord>> cache_;
};

// ---- pseudo-label cache ----

inline void save_labels(const CellLabels& labels, const std::string& path) {
  std::ofstream out(path);
  require(bool(out), "cannot write label file: " + path);
  out << labels.cells_y << " " << labels.cells_x << "\n";
  for (std::size_t i = 0; i < labels.classes.size(); ++i)
    out << labels.classes[i] << (i + 1 == labels.classes.size() ? "\n" : " ");
}

inline CellLabels load_labels(const std::string& path) {
  std::ifstream in(path);
  require(bool(in), "cannot read label file: " + path);
  CellLabels labels;
  require(bool(in >> labels.cells_y >> labels.cells_x), "bad label header");
  labels.classes.resize(std::size_t(labels.cells_y) * labels.cells_x);
  for (auto& c : labels.classes) require(bool(in >> c), "truncated label file");
  return labels;
}

struct DetectorTrainConfig {
  int steps = 2000;
  int checkpoint_every = 500;
  double lr = 1e-3;
  std::string optimizer = "adam";  // or "sgd"
  double momentum = 0.9, beta2 = 0.999;
  std::uint64_t seed = 1;
  int n_warps = 25;
  AdaptationConfig adaptation;
  std::string label_cache_dir;  // defaults to <dataset>/label_cache
  std::string checkpoint_dir;   // empty = no checkpoints
  std::string log_csv;          // empty = no log
  std::string resume_from;      // checkpoint path
};

struct TrainReport {
  double first_loss = 0.0;
  double final_loss = 0.0;
  std::int64_t steps_run = 0;
};

// Pseudo labels from homographic adaptation of the corner response, cached on
// disk mirroring the dataset record names.
class LabelProvider {
 public:
  LabelProvider(const std::string& cache_dir, int n_warps, AdaptationConfig cfg,
                std::uint64_t seed)
      : cache_dir_(cache_dir), n_warps_(n_warps), cfg_(cfg), seed_(seed) {
    if (!cache_dir_.empty()) std::filesystem::create_directories(cache_dir_);
  }

  CellLabels get(const std::string& record_dir, char side, const TimeSurface& ts) {
    const std::string key =
        std::filesystem::path(record_dir).filename().string() + "." + side + ".labels";
    const std::string path = cache_dir_.empty() ? "" : cache_dir_ + "/" + key;
    if (!path.empty() && std::filesystem::exists(path)) return load_labels(path);
    CellLabels labels =
        adaptation_labels(ts, n_warps_, step_hash(seed_, std::hash<std::string>{}(key)), cfg_);
    if (!path.empty()) save_labels(labels, path);
    return labels;
  }

 private:
  std::string cache_dir_;
  int n_warps_;
  AdaptationConfig cfg_;
  std::uint64_t seed_;
};

inline TrainReport train_detector(DetectorNet& net, RecordCache& records,
                                  const DetectorTrainConfig& cfg,
                                  const std::string& out_weights = "") {
  require(records.size() > 0, "train_detector: empty dataset");
  ParamRegistry reg;
  net.register_params(reg);
  Optimizer opt = cfg.optimizer == "sgd" ? Optimizer::sgd_momentum(cfg.lr, cfg.momentum)
                                         : Optimizer::adam(cfg.lr, cfg.momentum, cfg.beta2);
  std::int64_t start_step = 0;
  if (!cfg.resume_from.empty()) {
    WeightStore ck = WeightStore::load(cfg.resume_from);
    ck.apply_to_registry(reg);
    opt.import_state(ck, "opt");
    start_step = opt.step_count();
  }
  LabelProvider labels(cfg.label_cache_dir, cfg.n_warps, cfg.adaptation, cfg.seed);

  std::ofstream log;
  if (!cfg.log_csv.empty()) {
    log.open(cfg.log_csv, start_step > 0 ? std::ios::app : std::ios::out);
    if (start_step == 0) log << "step,loss_total,loss_i_a,loss_i_b,loss_desc\n";
  }

  TrainReport report;
  for (std::int64_t step = start_step; step < cfg.steps; ++step) {
    const std::size_t idx = std::size_t(step_hash(cfg.seed, std::uint64_t(step)) % records.size());
    const DatasetRecord& rec = records.get(idx);
    CellLabels la = labels.get(records.dir(idx), 'a', rec.ts_a);
    CellLabels lb = labels.get(records.dir(idx), 'b', rec.ts_b);

    Tape t(true);
    DetectorOutput oa = net.forward(t, rec.ts_a, true);
    DetectorOutput ob = net.forward(t, rec.ts_b, true);
    Var li_a = interest_loss(t, oa.logits, la);
    Var li_b = interest_loss(t, ob.logits, lb);
    Warp warp;
    warp.homography = rec.homography;
    Tensor mask = correspondence_mask(warp, oa.cells_y, oa.cells_x, net.cfg.delta_px,
                                      net.cfg.cell);
    Var ld = descriptor_loss(t, oa.desc, ob.desc, mask, net.cfg);
    Var loss = total_loss(t, li_a, li_b, ld, net.cfg.beta);

    const double loss_val = t.value(loss)[0];
    if (!std::isfinite(loss_val))
      throw NumericError("train_detector: non-finite loss at step " + std::to_string(step));
    if (step == start_step) report.first_loss = loss_val;
    report.final_loss = loss_val;
    ++report.steps_run;

    t.backward(loss);
    opt.step(reg, t);
    if (log.is_open())
      log << step << "," << loss_val << "," << t.value(li_a)[0] << "," << t.value(li_b)[0]
          << "," << t.value(ld)[0] << "\n";

    const bool at_checkpoint =
        !cfg.checkpoint_dir.empty() &&
        ((step + 1) % cfg.checkpoint_every == 0 || step + 1 == cfg.steps);
    if (at_checkpoint) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      WeightStore ck = WeightStore::from_registry(reg);
      opt.export_state(ck, "opt");
      ck.save(cfg.checkpoint_dir + "/ckpt_" + std::to_string(step + 1) + ".bin");
      // keep live weights and optimizer state identical to what a resume loads
      ck.apply_to_registry(reg);
      WeightStore rounded = WeightStore::load(cfg.checkpoint_dir + "/ckpt_" +
                                              std::to_string(step + 1) + ".bin");
      opt.import_state(rounded, "opt");
    }
  }
  if (!out_weights.empty()) save_detector(net, out_weights);
  return report;
}

// ---- held-out evaluation ----

struct DetectorEvalReport {
  double repeatability = 0.0;   // re-detected within tol under the homography
  double matching_score = 0.0;  // correct mutual NN descriptor matches
  double mean_keypoints = 0.0;
};

inline DetectorEvalReport evaluate_detector(DetectorNet& net,
                                            const std::vector<DatasetRecord>& pairs,
                                            double tol_px = 3.0) {
  std::size_t rep_hit = 0, rep_total = 0, match_correct = 0, match_den = 0, kp_total = 0;
  for (const DatasetRecord& rec : pairs) {
    Detection da = detect(net, rec.ts_a);
    Detection db = detect(net, rec.ts_b);
    kp_total += da.keypoints.size() + db.keypoints.size();
    if (da.keypoints.empty() || db.keypoints.empty()) continue;
    Warp warp;
    warp.homography = rec.homography;
    Warp inv = warp;
    inv.homography = rec.homography.inverse().eval();
    const double w = rec.ts_a.width() - 1.0, h = rec.ts_a.height() - 1.0;

    auto nearest = [&](const Vec2& p, const std::vector<Keypoint>& kps) {
      double best = 1e300;
      for (const Keypoint& k : kps) best = std::min(best, (Vec2(k.x, k.y) - p).norm());
      return best;
    };
    for (const Keypoint& k : da.keypoints) {
      const Vec2 p = warp.apply(Vec2(k.x, k.y));
      if (p.x() < 0 || p.y() < 0 || p.x() > w || p.y() > h) continue;
      ++rep_total;
      if (nearest(p, db.keypoints) <= tol_px) ++rep_hit;
    }
    for (const Keypoint& k : db.keypoints) {
      const Vec2 p = inv.apply(Vec2(k.x, k.y));
      if (p.x() < 0 || p.y() < 0 || p.x() > w || p.y() > h) continue;
      ++rep_total;
      if (nearest(p, da.keypoints) <= tol_px) ++rep_hit;
    }

    // mutual nearest neighbor matching in descriptor space
    const std::size_t na = da.keypoints.size(), nb = db.keypoints.size();
    std::vector<int> best_ab(na, -1), best_ba(nb, -1);
    std::vector<double> score_ab(na, -2.0), score_ba(nb, -2.0);
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j < nb; ++j) {
        const double s = da.descriptors[i].dot(db.descriptors[j]);
        if (s > score_ab[i]) {
          score_ab[i] = s;
          best_ab[i] = int(j);
        }
        if (s > score_ba[j]) {
          score_ba[j] = s;
          best_ba[j] = int(i);
        }
      }
    for (std::size_t i = 0; i < na; ++i) {
      const int j = best_ab[i];
      if (j < 0 || best_ba[std::size_t(j)] != int(i)) continue;
      const Vec2 p = warp.apply(Vec2(da.keypoints[i].x, da.keypoints[i].y));
      const Vec2 q(db.keypoints[std::size_t(j)].x, db.keypoints[std::size_t(j)].y);
      if ((p - q).norm() <= tol_px) ++match_correct;
    }
    match_den += std::min(na, nb);
  }
  DetectorEvalReport rep;
  rep.repeatability = rep_total ? double(rep_hit) / double(rep_total) : 0.0;
  rep.matching_score = match_den ? double(match_correct) / double(match_den) : 0.0;
  rep.mean_keypoints = pairs.empty() ? 0.0 : double(kp_total) / (2.0 * double(pairs.size()));
  return rep;
}

}  // namespace evio
