#pragma once

// Set matching and the composite training loss. Each decoder layer's
// predictions are matched to ground truth by an exact minimum-cost
// assignment; point costs minimize over the orderings that leave a polyline
// unchanged (direction flips, and cyclic shifts for closed elements).
// Matching runs on detached values; the loss itself is built from graph
// tensors so gradients reach the matched predictions only.

#include <algorithm>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ean/decoder.hpp"
#include "ean/geometry.hpp"

namespace ean {

struct PointOrdering {
  bool reversed = false;
  int shift = 0;  // cyclic shift, closed elements only

  // index into the GT sequence matched to prediction index j of n
  int map(int j, int n) const {
    const int dir = reversed ? -1 : 1;
    return ((shift + dir * j) % n + n) % n;
  }
};

struct PointCostResult {
  double cost = 0.0;
  PointOrdering ordering;
};

// Mean L1 distance (per point, both axes summed) between a prediction and a
// GT element, minimized over the element's equivalent point orderings. Both
// sides in normalized coordinates; the GT element converts on entry.
inline PointCostResult point_cost(std::span<const Vec2> pred_norm,
                                  const ResampledElement& gt) {
  const int n = static_cast<int>(pred_norm.size());
  if (n != static_cast<int>(gt.points.size())) {
    throw ContractError("point_cost: prediction has " + std::to_string(n) + " points, GT has " +
                        std::to_string(gt.points.size()));
  }
  std::vector<Vec2> gt_norm(gt.points.size());
  for (size_t i = 0; i < gt.points.size(); ++i) gt_norm[i] = to_normalized(gt.points[i]);

  PointCostResult best;
  best.cost = std::numeric_limits<double>::infinity();
  auto consider = [&](const PointOrdering& ord) {
    double acc = 0.0;
    for (int j = 0; j < n; ++j) {
      const Vec2 d = pred_norm[static_cast<size_t>(j)] -
                     gt_norm[static_cast<size_t>(ord.map(j, n))];
      acc += std::abs(d.x) + std::abs(d.y);
    }
    acc /= static_cast<double>(n);
    if (acc < best.cost) {
      best.cost = acc;
      best.ordering = ord;
    }
  };
  if (gt.closed) {
    for (int shift = 0; shift < n; ++shift) {
      consider({false, shift});
      consider({true, shift});
    }
  } else {
    consider({false, 0});
    consider({true, n - 1});  // plain reversal: j -> n-1-j
  }
  return best;
}

// Exact minimum-cost assignment of every row to a distinct column
// (rows <= cols), shortest-augmenting-path form with potentials. Ties resolve
// toward lower column indices through the scan order.
inline std::vector<int> min_cost_assignment(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  if (n == 0) return {};
  const int m = static_cast<int>(cost[0].size());
  if (m < n) throw ContractError("min_cost_assignment: fewer columns than rows");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(m) + 1, 0.0);
  std::vector<int> way(static_cast<size_t>(m) + 1, 0);
  std::vector<int> col_to_row(static_cast<size_t>(m) + 1, 0);  // 1-based; 0 = free
  for (int i = 1; i <= n; ++i) {
    col_to_row[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m) + 1, inf);
    std::vector<char> used(static_cast<size_t>(m) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = col_to_row[static_cast<size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = cost[static_cast<size_t>(i0 - 1)][static_cast<size_t>(j - 1)] -
                           u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(col_to_row[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (col_to_row[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      col_to_row[static_cast<size_t>(j0)] = col_to_row[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(static_cast<size_t>(n), -1);
  for (int j = 1; j <= m; ++j) {
    if (col_to_row[static_cast<size_t>(j)] > 0) {
      row_to_col[static_cast<size_t>(col_to_row[static_cast<size_t>(j)] - 1)] = j - 1;
    }
  }
  return row_to_col;
}

struct MatchWeights {
  double w_cls = 2.0;
  double w_pts = 5.0;
};

struct MatchedPair {
  int prediction = -1;  // group index
  int gt = -1;          // instance index
  PointCostResult point_cost;
};

struct Assignment {
  std::vector<MatchedPair> pairs;       // one per GT instance
  std::vector<int> unmatched_predictions;
  double total_cost = 0.0;
};

namespace detail_match {
inline std::vector<Vec2> prediction_points(const Tensor& pred_points, int64_t group) {
  const int64_t N = pred_points.size(1);
  std::vector<Vec2> out(static_cast<size_t>(N));
  const auto& v = pred_points.values();
  for (int64_t j = 0; j < N; ++j) {
    out[static_cast<size_t>(j)] = {v[static_cast<size_t>((group * N + j) * 2)],
                                   v[static_cast<size_t>((group * N + j) * 2 + 1)]};
  }
  return out;
}
}  // namespace detail_match

// class_logits [M,K+1], pred_points [M,N,2] normalized, GT elements in
// meters. cost[pred][gt] = w_cls * (-softmax prob of the GT class)
//                        + w_pts * point_cost.
inline Assignment hungarian_match(const Tensor& class_logits, const Tensor& pred_points,
                                  const std::vector<ResampledElement>& gts,
                                  const MatchWeights& weights = {}) {
  const int64_t M = class_logits.size(0);
  const int G = static_cast<int>(gts.size());
  if (G > M) {
    throw ConfigError("hungarian_match: " + std::to_string(G) + " GT instances exceed " +
                      std::to_string(M) + " prediction groups");
  }
  NoGradGuard no_grad;
  Tensor probs = softmax_lastdim(class_logits.detach());

  std::vector<std::vector<PointCostResult>> pc(static_cast<size_t>(G));
  std::vector<std::vector<double>> cost(static_cast<size_t>(G),
                                        std::vector<double>(static_cast<size_t>(M)));
  for (int g = 0; g < G; ++g) {
    pc[static_cast<size_t>(g)].resize(static_cast<size_t>(M));
    for (int64_t i = 0; i < M; ++i) {
      const auto pts = detail_match::prediction_points(pred_points, i);
      const PointCostResult r = point_cost(pts, gts[static_cast<size_t>(g)]);
      pc[static_cast<size_t>(g)][static_cast<size_t>(i)] = r;
      const double p = probs.at({i, gts[static_cast<size_t>(g)].class_id});
      cost[static_cast<size_t>(g)][static_cast<size_t>(i)] =
          weights.w_cls * (-p) + weights.w_pts * r.cost;
    }
  }
  const std::vector<int> gt_to_pred = min_cost_assignment(cost);

  Assignment a;
  std::vector<char> used(static_cast<size_t>(M), 0);
  for (int g = 0; g < G; ++g) {
    const int i = gt_to_pred[static_cast<size_t>(g)];
    a.pairs.push_back({i, g, pc[static_cast<size_t>(g)][static_cast<size_t>(i)]});
    a.total_cost += cost[static_cast<size_t>(g)][static_cast<size_t>(i)];
    used[static_cast<size_t>(i)] = 1;
  }
  for (int64_t i = 0; i < M; ++i) {
    if (!used[static_cast<size_t>(i)]) a.unmatched_predictions.push_back(static_cast<int>(i));
  }
  return a;
}

// ---------------------------------------------------------------------------
// composite loss
// ---------------------------------------------------------------------------

struct LossConfig {
  double lambda_center = 1.0;
  double lambda_noncenter = 1.0;
  MatchWeights match;
  bool use_gt_neighborhood = true;
  double omega = 0.2;
  // Experimental: reuse the central branch's assignment for the twin instead
  // of matching it separately.
  bool shared_assignment = false;
};

struct LayerLossBreakdown {
  double cls_center = 0.0, pts_center = 0.0;
  double cls_noncenter = 0.0, pts_noncenter = 0.0;
};

struct LossReport {
  double total = 0.0;
  double center = 0.0;
  double noncenter = 0.0;
  std::vector<LayerLossBreakdown> layers;
};

inline nlohmann::json to_json(const LossReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"cls_center", l.cls_center},
                      {"pts_center", l.pts_center},
                      {"cls_noncenter", l.cls_noncenter},
                      {"pts_noncenter", l.pts_noncenter}});
  }
  return {{"total", r.total}, {"center", r.center}, {"noncenter", r.noncenter},
          {"layers", layers}};
}

struct LossOutput {
  Tensor total;  // scalar, graph-connected
  LossReport report;
};

namespace detail_match {

// Cross-entropy over K+1 classes, averaged over groups; unmatched groups
// carry the background label.
inline Tensor classification_loss(const Tensor& class_logits, const Assignment& a,
                                  const std::vector<ResampledElement>& gts,
                                  int64_t num_classes) {
  const int64_t M = class_logits.size(0);
  const int64_t K1 = num_classes + 1;
  std::vector<double> onehot(static_cast<size_t>(M * K1), 0.0);
  std::vector<int64_t> target(static_cast<size_t>(M), num_classes);  // background
  for (const MatchedPair& p : a.pairs) {
    target[static_cast<size_t>(p.prediction)] =
        gts[static_cast<size_t>(p.gt)].class_id;
  }
  for (int64_t i = 0; i < M; ++i) {
    onehot[static_cast<size_t>(i * K1 + target[static_cast<size_t>(i)])] = 1.0;
  }
  Tensor mask = Tensor::from_data({M, K1}, std::move(onehot));
  Tensor logp = ean::log(scalar_add(softmax_lastdim(class_logits), 1e-12));
  return scalar_mul(sum_all(mul(mask, logp)), -1.0 / static_cast<double>(M));
}

// Mean L1 between matched predictions and their targets under the minimizing
// ordering. Targets arrive as plain normalized coordinates.
inline Tensor point_loss(const Tensor& pred_points, const Assignment& a,
                         const std::vector<std::vector<Vec2>>& targets_norm) {
  const int64_t N = pred_points.size(1);
  if (a.pairs.empty()) return Tensor::scalar(0.0);
  std::vector<int64_t> rows;
  std::vector<double> tgt;
  for (const MatchedPair& p : a.pairs) {
    rows.push_back(p.prediction);
    const auto& pts = targets_norm[static_cast<size_t>(p.gt)];
    for (int64_t j = 0; j < N; ++j) {
      const Vec2 q = pts[static_cast<size_t>(
          p.point_cost.ordering.map(static_cast<int>(j), static_cast<int>(N)))];
      tgt.push_back(q.x);
      tgt.push_back(q.y);
    }
  }
  const int64_t P = static_cast<int64_t>(rows.size());
  Tensor matched = index_rows(pred_points, rows);  // [P,N,2]
  Tensor target = Tensor::from_data({P, N, 2}, std::move(tgt));
  return scalar_mul(sum_all(ean::abs(sub(matched, target))),
                    1.0 / static_cast<double>(P * N));
}

}  // namespace detail_match

// Per decoder layer and branch: Hungarian assignment, cross-entropy over
// K+1 classes, mean L1 point loss; the twin is matched separately against
// perturbed targets drawn fresh inside its GT neighborhoods. Layer losses
// average; branch totals combine with the lambda weights.
inline LossOutput compute_loss(const DetectionSet& det,
                               const std::vector<ResampledElement>& gts,
                               const LossConfig& cfg, int64_t num_classes, RandomStream& rng) {
  if (det.batch != 1) throw ContractError("compute_loss: expects per-scene detections");
  const int64_t L = static_cast<int64_t>(det.central.size());
  const bool twin = !det.noncentral.empty();

  std::vector<std::vector<Vec2>> gt_norm(gts.size());
  for (size_t g = 0; g < gts.size(); ++g) {
    for (const Vec2& p : gts[g].points) gt_norm[g].push_back(to_normalized(p));
  }

  // Twin targets: fresh draw inside the GT neighborhoods (or the raw GT when
  // the neighborhood mechanism is ablated away). One draw per loss call.
  std::vector<ResampledElement> twin_gts = gts;
  std::vector<std::vector<Vec2>> twin_norm = gt_norm;
  if (twin && cfg.use_gt_neighborhood) {
    for (size_t g = 0; g < gts.size(); ++g) {
      GtNeighborhoodSample s = perturb_in_gt_neighborhood(gts[g], cfg.omega, rng);
      twin_gts[g].points = s.perturbed_points;
      twin_norm[g].clear();
      for (const Vec2& p : s.perturbed_points) twin_norm[g].push_back(to_normalized(p));
    }
  }

  LossOutput out;
  Tensor center_acc = Tensor::scalar(0.0);
  Tensor noncenter_acc = Tensor::scalar(0.0);
  for (int64_t l = 0; l < L; ++l) {
    LayerLossBreakdown lb;
    const LayerDetections& dc = det.central[static_cast<size_t>(l)];
    Tensor logits_c = reshape(dc.class_logits, {dc.class_logits.size(1), num_classes + 1});
    Tensor points_c = reshape(dc.points, {dc.points.size(1), dc.points.size(2), 2});
    Assignment a_c = hungarian_match(logits_c, points_c, gts, cfg.match);
    {
      Tensor cls = detail_match::classification_loss(logits_c, a_c, gts, num_classes);
      Tensor pts = detail_match::point_loss(points_c, a_c, gt_norm);
      lb.cls_center = cls.item();
      lb.pts_center = pts.item();
      center_acc = add(center_acc,
                       add(scalar_mul(cls, cfg.match.w_cls), scalar_mul(pts, cfg.match.w_pts)));
    }
    if (twin) {
      const LayerDetections& d = det.noncentral[static_cast<size_t>(l)];
      Tensor logits = reshape(d.class_logits, {d.class_logits.size(1), num_classes + 1});
      Tensor points = reshape(d.points, {d.points.size(1), d.points.size(2), 2});
      Assignment a;
      if (cfg.shared_assignment) {
        // reuse the central pairing; re-minimize only the point orderings
        // against the twin's targets
        a = a_c;
        for (MatchedPair& p : a.pairs) {
          const auto pts = detail_match::prediction_points(points, p.prediction);
          p.point_cost = point_cost(pts, twin_gts[static_cast<size_t>(p.gt)]);
        }
      } else {
        a = hungarian_match(logits, points, twin_gts, cfg.match);
      }
      Tensor cls = detail_match::classification_loss(logits, a, twin_gts, num_classes);
      Tensor pts = detail_match::point_loss(points, a, twin_norm);
      lb.cls_noncenter = cls.item();
      lb.pts_noncenter = pts.item();
      noncenter_acc =
          add(noncenter_acc,
              add(scalar_mul(cls, cfg.match.w_cls), scalar_mul(pts, cfg.match.w_pts)));
    }
    out.report.layers.push_back(lb);
  }
  center_acc = scalar_mul(center_acc, 1.0 / static_cast<double>(L));
  noncenter_acc = scalar_mul(noncenter_acc, 1.0 / static_cast<double>(L));
  out.total = add(scalar_mul(center_acc, cfg.lambda_center),
                  scalar_mul(noncenter_acc, cfg.lambda_noncenter));
  out.report.center = center_acc.item();
  out.report.noncenter = noncenter_acc.item();
  out.report.total = out.total.item();
  return out;
}

}  // namespace ean
