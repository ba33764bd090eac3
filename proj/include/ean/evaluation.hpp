#pragma once

// Chamfer-distance-thresholded average precision. Within each scene and
// class, predictions claim ground-truth instances greedily in confidence
// order; a claim succeeds when the Chamfer distance clears the threshold and
// the instance is still free. Flags pool across the split per (class,
// threshold) and all-point interpolated AP summarizes them.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ean/decoder.hpp"
#include "ean/geometry.hpp"
#include "ean/synthetic.hpp"
#include "ean/util.hpp"

namespace ean {

struct EvalConfig {
  std::vector<double> thresholds = {0.5, 1.0, 1.5};  // meters
  double score_floor = 0.0;
  int64_t num_classes = kNumMapClasses;

  void validate() const {
    if (thresholds.empty()) throw ConfigError("eval: need at least one threshold");
    double prev = 0.0;
    for (double t : thresholds) {
      if (t <= prev) throw ConfigError("eval: thresholds must be positive and increasing");
      prev = t;
    }
  }
};

inline const char* map_class_name(int class_id) {
  switch (class_id) {
    case kPedestrianCrossing: return "pedestrian_crossing";
    case kLaneDivider: return "lane_divider";
    case kBoundary: return "boundary";
    default: return "unknown";
  }
}

struct ScoredPrediction {
  int64_t scene_index = 0;
  int class_id = 0;
  double score = 0.0;
  std::vector<Vec2> points_m;
};

// TP/FP flags for one scene and class. `preds` must already be confidence
// sorted (descending); each prediction claims the free GT with the smallest
// Chamfer distance, succeeding only below the threshold.
inline std::vector<char> match_predictions(const std::vector<const ScoredPrediction*>& preds,
                                           const std::vector<const ResampledElement*>& gts,
                                           double tau) {
  std::vector<char> tp(preds.size(), 0);
  std::vector<char> claimed(gts.size(), 0);
  for (size_t p = 0; p < preds.size(); ++p) {
    double best = std::numeric_limits<double>::infinity();
    int best_g = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (claimed[g]) continue;
      const double d = chamfer_distance(preds[p]->points_m, gts[g]->points);
      if (d < best) {
        best = d;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0 && best < tau) {
      tp[p] = 1;
      claimed[static_cast<size_t>(best_g)] = 1;
    }
  }
  return tp;
}

// All-point interpolated AP over flags sorted by confidence (descending).
// No ground truth and no predictions is undefined (NaN); no ground truth with
// predictions scores zero.
inline double average_precision(const std::vector<char>& tp_sorted, int64_t total_gt) {
  if (total_gt < 0) throw ContractError("average_precision: negative GT count");
  if (total_gt == 0) {
    return tp_sorted.empty() ? std::numeric_limits<double>::quiet_NaN() : 0.0;
  }
  if (tp_sorted.empty()) return 0.0;
  const size_t n = tp_sorted.size();
  std::vector<double> precision(n), recall(n);
  int64_t tp_acc = 0;
  for (size_t k = 0; k < n; ++k) {
    tp_acc += tp_sorted[k] ? 1 : 0;
    precision[k] = static_cast<double>(tp_acc) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(tp_acc) / static_cast<double>(total_gt);
  }
  for (size_t k = n - 1; k-- > 0;) {
    precision[k] = std::max(precision[k], precision[k + 1]);
  }
  double ap = 0.0, prev_recall = 0.0;
  for (size_t k = 0; k < n; ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

struct EvalReport {
  // ap[class][threshold index]; NaN where undefined
  std::vector<std::vector<double>> ap;
  std::vector<double> class_ap;  // mean over thresholds
  double map = 0.0;
  std::vector<double> thresholds;

  nlohmann::json to_json() const {
    nlohmann::json classes = nlohmann::json::object();
    for (size_t c = 0; c < ap.size(); ++c) {
      nlohmann::json per_tau = nlohmann::json::object();
      for (size_t t = 0; t < thresholds.size(); ++t) {
        const double v = ap[c][t];
        per_tau[std::to_string(thresholds[t])] =
            std::isnan(v) ? nlohmann::json() : nlohmann::json(v);
      }
      classes[map_class_name(static_cast<int>(c))] = {
          {"ap_per_tau", per_tau},
          {"ap", std::isnan(class_ap[c]) ? nlohmann::json() : nlohmann::json(class_ap[c])}};
    }
    return {{"classes", classes}, {"map", map}, {"thresholds", thresholds}};
  }
};

// Pools predictions against ground truth over a whole split.
inline EvalReport evaluate_detections(const std::vector<ScoredPrediction>& preds,
                                      const std::vector<std::vector<ResampledElement>>& gts,
                                      const EvalConfig& cfg) {
  cfg.validate();
  const int64_t n_scenes = static_cast<int64_t>(gts.size());
  EvalReport report;
  report.thresholds = cfg.thresholds;
  report.ap.assign(static_cast<size_t>(cfg.num_classes),
                   std::vector<double>(cfg.thresholds.size(), 0.0));
  report.class_ap.assign(static_cast<size_t>(cfg.num_classes), 0.0);

  for (int cls = 0; cls < cfg.num_classes; ++cls) {
    int64_t total_gt = 0;
    std::vector<std::vector<const ResampledElement*>> scene_gts(static_cast<size_t>(n_scenes));
    for (int64_t s = 0; s < n_scenes; ++s) {
      for (const ResampledElement& e : gts[static_cast<size_t>(s)]) {
        if (e.class_id == cls) {
          scene_gts[static_cast<size_t>(s)].push_back(&e);
          ++total_gt;
        }
      }
    }
    std::vector<std::vector<const ScoredPrediction*>> scene_preds(
        static_cast<size_t>(n_scenes));
    for (const ScoredPrediction& p : preds) {
      if (p.class_id == cls && p.score >= cfg.score_floor) {
        scene_preds[static_cast<size_t>(p.scene_index)].push_back(&p);
      }
    }
    for (auto& sp : scene_preds) {
      std::stable_sort(sp.begin(), sp.end(),
                       [](const ScoredPrediction* a, const ScoredPrediction* b) {
                         return a->score > b->score;
                       });
    }
    for (size_t t = 0; t < cfg.thresholds.size(); ++t) {
      // (score, tp) pooled over scenes, then globally confidence-sorted
      std::vector<std::pair<double, char>> pooled;
      for (int64_t s = 0; s < n_scenes; ++s) {
        const auto flags = match_predictions(scene_preds[static_cast<size_t>(s)],
                                             scene_gts[static_cast<size_t>(s)],
                                             cfg.thresholds[t]);
        for (size_t p = 0; p < flags.size(); ++p) {
          pooled.push_back({scene_preds[static_cast<size_t>(s)][p]->score, flags[p]});
        }
      }
      std::stable_sort(pooled.begin(), pooled.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });
      std::vector<char> flags;
      flags.reserve(pooled.size());
      for (const auto& [score, f] : pooled) flags.push_back(f);
      report.ap[static_cast<size_t>(cls)][t] = average_precision(flags, total_gt);
    }
    double acc = 0.0;
    bool defined = true;
    for (double v : report.ap[static_cast<size_t>(cls)]) {
      if (std::isnan(v)) defined = false;
      acc += v;
    }
    report.class_ap[static_cast<size_t>(cls)] =
        defined ? acc / static_cast<double>(cfg.thresholds.size())
                : std::numeric_limits<double>::quiet_NaN();
  }
  double acc = 0.0;
  int64_t defined = 0;
  for (double v : report.class_ap) {
    if (!std::isnan(v)) {
      acc += v;
      ++defined;
    }
  }
  report.map = defined > 0 ? acc / static_cast<double>(defined) : 0.0;
  return report;
}

// Ground truth of one scene resampled to the configured point count.
inline std::vector<ResampledElement> scene_ground_truth(const Scene& scene, int n_points) {
  std::vector<ResampledElement> out;
  for (const MapElement& e : scene.elements) out.push_back(resample(e, n_points));
  return out;
}

// Inference over a split (central branch only), denormalized to meters.
// Deterministic for fixed weights; scenes evaluate in parallel.
inline std::vector<ScoredPrediction> predict_split(DetectionModel& model,
                                                   const std::vector<Scene>& scenes,
                                                   const EvalConfig& cfg) {
  const DecoderConfig& dc = model.config();
  std::vector<std::vector<ScoredPrediction>> per_scene(scenes.size());
  parallel_for(static_cast<int64_t>(scenes.size()), [&](int64_t s) {
    NoGradGuard no_grad;
    DetectionSet det =
        model.forward_scene(scenes[static_cast<size_t>(s)].bev_feature, RunMode::kInfer);
    const LayerDetections& last = det.central.back();
    Tensor probs = softmax_lastdim(last.class_logits);
    for (int64_t i = 0; i < dc.groups; ++i) {
      double best = -1.0;
      int best_cls = 0;
      for (int64_t c = 0; c < dc.num_classes; ++c) {
        const double p = probs.at({0, i, c});
        if (p > best) {
          best = p;
          best_cls = static_cast<int>(c);
        }
      }
      if (best < cfg.score_floor) continue;
      ScoredPrediction sp;
      sp.scene_index = s;
      sp.class_id = best_cls;
      sp.score = best;
      for (int64_t j = 0; j < dc.points_per_element; ++j) {
        sp.points_m.push_back(
            from_normalized({last.points.at({0, i, j, 0}), last.points.at({0, i, j, 1})}));
      }
      per_scene[static_cast<size_t>(s)].push_back(std::move(sp));
    }
  });
  std::vector<ScoredPrediction> preds;
  for (auto& sp : per_scene) {
    for (auto& p : sp) preds.push_back(std::move(p));
  }
  return preds;
}

inline EvalReport evaluate_split(DetectionModel& model, const std::vector<Scene>& scenes,
                                 const EvalConfig& cfg) {
  std::vector<std::vector<ResampledElement>> gts;
  for (const Scene& s : scenes) {
    gts.push_back(scene_ground_truth(s, static_cast<int>(model.config().points_per_element)));
  }
  return evaluate_detections(predict_split(model, scenes, cfg), gts, cfg);
}

// Per-prediction Chamfer distances against the nearest same-class GT, for
// plotting. Columns: scene_id,class,score,chamfer_m.
inline void write_chamfer_csv(const std::vector<ScoredPrediction>& preds,
                              const std::vector<std::vector<ResampledElement>>& gts,
                              const std::vector<Scene>& scenes, std::ostream& csv) {
  csv << "scene_id,class,score,chamfer_m\n";
  for (const ScoredPrediction& p : preds) {
    double best = std::numeric_limits<double>::quiet_NaN();
    for (const ResampledElement& e : gts[static_cast<size_t>(p.scene_index)]) {
      if (e.class_id != p.class_id) continue;
      const double d = chamfer_distance(p.points_m, e.points);
      if (std::isnan(best) || d < best) best = d;
    }
    csv << scenes[static_cast<size_t>(p.scene_index)].scene_id << ","
        << map_class_name(p.class_id) << "," << p.score << "," << best << "\n";
  }
}

}  // namespace ean
