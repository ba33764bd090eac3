#pragma once

// Named finite-difference checks over every differentiable op plus one
// miniature end-to-end training step; backs the grad-check command.

#include <functional>
#include <string>
#include <vector>

#include "ean/decoder.hpp"
#include "ean/gradcheck.hpp"
#include "ean/matching.hpp"

namespace ean {

struct OpCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

inline std::vector<OpCheckReport> run_gradient_check_suite(uint64_t seed, double tol = 1e-4) {
  RandomStream rng(seed);
  std::vector<OpCheckReport> reports;
  auto check = [&](const std::string& name, const std::function<Tensor()>& f,
                   std::vector<Tensor> leaves) {
    GradCheckResult r = finite_difference_check(f, std::move(leaves), rng);
    reports.push_back({name, r.max_rel_err, r.pass(tol)});
  };

  for (const Shape& s : std::vector<Shape>{{3, 4}, {2, 3, 4}, {5, 2}}) {
    Tensor x = Tensor::randn(s, rng, 1.0, true);
    Tensor y = Tensor::randn(s, rng, 1.0, true);
    Tensor w = Tensor::randn(s, rng, 1.0);
    const std::string tag = " " + shape_str(s);
    check("add" + tag, [=] { return sum_all(mul(add(x, y), w)); }, {x, y});
    check("sub" + tag, [=] { return sum_all(mul(sub(x, y), w)); }, {x, y});
    check("mul" + tag, [=] { return sum_all(mul(mul(x, y), w)); }, {x, y});
    check("scalar_mul" + tag, [=] { return sum_all(mul(scalar_mul(x, 2.5), w)); }, {x});
    check("relu" + tag, [=] { return sum_all(mul(relu(x), w)); }, {x});
    check("gelu" + tag, [=] { return sum_all(mul(gelu(x), w)); }, {x});
    check("sigmoid" + tag, [=] { return sum_all(mul(sigmoid(x), w)); }, {x});
    check("sin" + tag, [=] { return sum_all(mul(ean::sin(x), w)); }, {x});
    check("cos" + tag, [=] { return sum_all(mul(ean::cos(x), w)); }, {x});
    check("abs" + tag, [=] { return sum_all(mul(ean::abs(x), w)); }, {x});
    check("softmax_lastdim" + tag, [=] { return sum_all(mul(softmax_lastdim(x), w)); }, {x});
    check("layer_norm_lastdim" + tag,
          [=] { return sum_all(mul(layer_norm_lastdim(x), w)); }, {x});
    check("sum_axis" + tag, [=] { return sum_all(sum_axis(mul(x, x), 0)); }, {x});
    check("mean_axis" + tag, [=] { return sum_all(mean_axis(mul(x, x), 1)); }, {x});
    check("transpose" + tag,
          [=] { return sum_all(mul(transpose(x, 0, 1), transpose(w, 0, 1))); }, {x});
    check("reshape" + tag, [=] {
      return sum_all(mul(reshape(mul(x, x), {x.numel()}), reshape(w, {w.numel()})));
    }, {x});
    check("concat_split" + tag, [=] {
      auto parts = split_axis(concat_axis(x, y, 0), 0, 2);
      return sum_all(mul(mul(parts[0], parts[1]), w));
    }, {x, y});
  }

  {
    Tensor a = Tensor::randn({4, 5}, rng, 1.0, true);
    Tensor b = Tensor::randn({5, 3}, rng, 1.0, true);
    check("matmul 4x5@5x3", [=] { return sum_all(matmul(a, b)); }, {a, b});
    Tensor ba = Tensor::randn({3, 2, 4}, rng, 1.0, true);
    Tensor bb = Tensor::randn({4, 5}, rng, 1.0, true);
    check("matmul batched-broadcast",
          [=] { return mean_all(mul(matmul(ba, bb), matmul(ba, bb))); }, {ba, bb});
  }
  {
    std::vector<double> pv;
    for (int i = 0; i < 24; ++i) pv.push_back(0.1 + 0.8 * rng.uniform01());
    Tensor pos = Tensor::from_data({4, 6}, std::vector<double>(pv.begin(), pv.begin() + 24),
                                   true);
    Tensor w = Tensor::randn({4, 6}, rng);
    check("log", [=] { return sum_all(mul(ean::log(scalar_add(pos, 0.5)), w)); }, {pos});
    check("inverse_sigmoid", [=] { return sum_all(mul(inverse_sigmoid(pos), w)); }, {pos});
  }
  {
    Tensor grid = Tensor::randn({3, 8, 6}, rng, 1.0, true);
    std::vector<double> pts;
    for (int i = 0; i < 10; ++i) {
      pts.push_back(0.1 + 0.8 * rng.uniform01());
      pts.push_back(0.1 + 0.8 * rng.uniform01());
    }
    Tensor points = Tensor::from_data({10, 2}, std::move(pts), true);
    Tensor w = Tensor::randn({10, 3}, rng);
    check("bilinear_sample",
          [=] { return sum_all(mul(bilinear_sample(grid, points), w)); }, {grid, points});
  }
  {
    std::vector<double> cv;
    for (int i = 0; i < 12; ++i) cv.push_back(rng.uniform01());
    Tensor coords = Tensor::from_data({6, 2}, std::move(cv), true);
    Tensor w = Tensor::randn({6, 8}, rng);
    check("sine_pe", [=] { return sum_all(mul(sine_pe(coords, 8), w)); }, {coords});
    Tensor small = Tensor::randn({2, 3}, rng, 1.0, true);
    Tensor we = Tensor::randn({4, 2, 3}, rng);
    check("expand", [=] { return sum_all(mul(expand(small, {4, 2, 3}), we)); }, {small});
    Tensor rows = Tensor::randn({5, 3}, rng, 1.0, true);
    Tensor wr = Tensor::randn({3, 3}, rng);
    check("index_rows",
          [=] { return sum_all(mul(index_rows(rows, {4, 0, 2}), wr)); }, {rows});
  }

  // miniature end-to-end training step: forward, Hungarian match, loss
  {
    DecoderConfig cfg;
    cfg.layers = 1;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.sampling_points = 2;
    cfg.points_per_element = 4;
    cfg.groups = 3;
    cfg.bev_channels = 4;
    DetectionModel model(cfg, seed);
    model.resample_offsets(rng);
    Tensor bev = Tensor::randn({cfg.bev_channels, 16, 8}, rng, 0.5);
    std::vector<ResampledElement> gts(1);
    gts[0].class_id = kLaneDivider;
    gts[0].spacing = 5.0;
    gts[0].points = {{1, -8}, {1, -3}, {1, 2}, {1, 7}};
    LossConfig lcfg;
    lcfg.omega = cfg.omega;
    auto forward = [&] {
      RandomStream loss_rng(555);
      DetectionSet det = model.forward_scene(bev, RunMode::kTrain);
      return compute_loss(det, gts, lcfg, cfg.num_classes, loss_rng).total;
    };
    std::vector<Tensor> leaves;
    for (const auto& [name, t] : model.params().all()) leaves.push_back(t);
    GradCheckResult r = finite_difference_check(forward, leaves, rng, 3);
    reports.push_back({"end-to-end tiny model", r.max_rel_err, r.pass(tol)});
  }
  return reports;
}

}  // namespace ean
