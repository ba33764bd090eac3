#pragma once

// Training loop: shuffled mini-batches, per-iteration offset resampling,
// Hungarian matching and the composite loss, AdamW updates, JSON-lines
// logging and resumable checkpoints. With a fixed seed in single-thread mode
// every byte of the log and the final checkpoint is reproducible; resuming
// from a checkpoint replays the exact remaining iterations.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "ean/checkpoint.hpp"
#include "ean/config.hpp"
#include "ean/decoder.hpp"
#include "ean/evaluation.hpp"
#include "ean/matching.hpp"
#include "ean/optim.hpp"

namespace ean {

// Slices a batched DetectionSet into per-scene sets (graph preserved).
inline std::vector<DetectionSet> split_detections(const DetectionSet& det) {
  const int64_t B = det.batch;
  std::vector<DetectionSet> out(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) out[static_cast<size_t>(b)].batch = 1;
  auto scatter = [&](const std::vector<LayerDetections>& layers, bool central) {
    for (const LayerDetections& layer : layers) {
      auto logits = split_axis(layer.class_logits, 0, B);
      auto points = split_axis(layer.points, 0, B);
      for (int64_t b = 0; b < B; ++b) {
        auto& dst = central ? out[static_cast<size_t>(b)].central
                            : out[static_cast<size_t>(b)].noncentral;
        dst.push_back({logits[static_cast<size_t>(b)], points[static_cast<size_t>(b)]});
      }
    }
  };
  scatter(det.central, true);
  scatter(det.noncentral, false);
  return out;
}

struct TrainResult {
  std::vector<double> epoch_mean_loss;
  std::filesystem::path final_checkpoint;
  int64_t iterations = 0;
};

class Trainer {
 public:
  Trainer(RunConfig cfg, std::filesystem::path out_dir, uint64_t seed)
      : cfg_(std::move(cfg)),
        out_dir_(std::move(out_dir)),
        seed_(seed),
        model_(cfg_.decoder, seed),
        opt_(AdamWConfig{cfg_.train.lr, cfg_.train.beta1, cfg_.train.beta2, cfg_.train.eps,
                         cfg_.train.weight_decay}),
        rng_(RandomStream::derived(seed, 0x747261696eull)) {
    cfg_.validate();
    std::filesystem::create_directories(out_dir_);
  }

  DetectionModel& model() { return model_; }
  const RunConfig& config() const { return cfg_; }

  void load_dataset(const std::filesystem::path& data_dir) {
    scenes_ = load_split(data_dir, "train");
    gts_.clear();
    for (const Scene& s : scenes_) {
      if (static_cast<int64_t>(s.elements.size()) > cfg_.decoder.groups) {
        throw ConfigError("scene " + std::to_string(s.scene_id) + " has " +
                          std::to_string(s.elements.size()) + " instances, model has only " +
                          std::to_string(cfg_.decoder.groups) + " groups");
      }
      gts_.push_back(
          scene_ground_truth(s, static_cast<int>(cfg_.decoder.points_per_element)));
    }
    if (scenes_.empty()) throw ConfigError("training split is empty");
  }

  void resume_from(const std::filesystem::path& ckpt_path) {
    TensorArchive ar = TensorArchive::load(ckpt_path);
    const nlohmann::json stored = ar.meta.at("config");
    const nlohmann::json current = cfg_.to_json_obj();
    if (stored.at("decoder") != current.at("decoder") ||
        stored.at("data") != current.at("data")) {
      throw ConfigError("checkpoint was trained under a different decoder/data config");
    }
    model_.load_checkpoint(ar);
    opt_.set_step_count(ar.meta.at("adam_t").get<int64_t>());
    for (const auto& [name, t] : model_.params().all()) {
      if (ar.contains("optim." + name + ".m")) {
        AdamState& st = opt_.state()[name];
        st.m = ar.get("optim." + name + ".m").values();
        st.v = ar.get("optim." + name + ".v").values();
      }
    }
    rng_.load_state(ar.meta.at("rng").get<std::string>());
    start_epoch_ = ar.meta.at("epoch").get<int64_t>();
    global_iter_ = ar.meta.at("global_iter").get<int64_t>();
  }

  TrainResult run(std::ostream* progress = nullptr) {
    const int64_t B = cfg_.train.batch_size;
    const int64_t n_scenes = static_cast<int64_t>(scenes_.size());
    LossConfig loss_cfg;
    loss_cfg.lambda_center = cfg_.train.lambda_center;
    loss_cfg.lambda_noncenter = cfg_.train.lambda_noncenter;
    loss_cfg.match = {cfg_.train.w_cls, cfg_.train.w_pts};
    loss_cfg.use_gt_neighborhood = cfg_.decoder.use_gt_neighborhood;
    loss_cfg.omega = cfg_.decoder.omega;
    loss_cfg.shared_assignment = cfg_.train.shared_assignment;

    const bool fresh = start_epoch_ == 0;
    std::ofstream log(out_dir_ / "train_log.jsonl",
                      fresh ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot open training log in '" + out_dir_.string() + "'");

    TrainResult result;
    for (int64_t epoch = start_epoch_; epoch < cfg_.train.epochs; ++epoch) {
      std::vector<int64_t> order(static_cast<size_t>(n_scenes));
      for (int64_t i = 0; i < n_scenes; ++i) order[static_cast<size_t>(i)] = i;
      rng_.shuffle(order);

      double epoch_loss = 0.0;
      int64_t epoch_iters = 0;
      for (int64_t at = 0; at < n_scenes; at += B) {
        const int64_t bsz = std::min(B, n_scenes - at);
        std::vector<Tensor> bevs;
        std::vector<uint64_t> ids;
        for (int64_t b = 0; b < bsz; ++b) {
          const Scene& s = scenes_[static_cast<size_t>(order[static_cast<size_t>(at + b)])];
          bevs.push_back(s.bev_feature);
          ids.push_back(s.scene_id);
        }
        model_.resample_offsets(rng_);
        DetectionSet det = model_.forward(bevs, RunMode::kTrain, nullptr, &rng_);
        std::vector<DetectionSet> per_scene = split_detections(det);

        Tensor loss_acc = Tensor::scalar(0.0);
        LossReport mean_report;
        mean_report.layers.resize(static_cast<size_t>(cfg_.decoder.layers));
        for (int64_t b = 0; b < bsz; ++b) {
          const auto& gt = gts_[static_cast<size_t>(order[static_cast<size_t>(at + b)])];
          LossOutput lo = compute_loss(per_scene[static_cast<size_t>(b)], gt, loss_cfg,
                                       cfg_.decoder.num_classes, rng_);
          loss_acc = add(loss_acc, lo.total);
          accumulate_report(mean_report, lo.report, 1.0 / static_cast<double>(bsz));
        }
        Tensor loss = scalar_mul(loss_acc, 1.0 / static_cast<double>(bsz));
        const double loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          dump_bad_batch(epoch, ids, mean_report);
          throw NumericFault("non-finite loss at epoch " + std::to_string(epoch) +
                             ", iteration " + std::to_string(global_iter_));
        }
        model_.params().zero_grad_all();
        loss.backward();
        if (cfg_.train.grad_clip_norm > 0.0) clip_gradients(cfg_.train.grad_clip_norm);
        opt_.set_lr(learning_rate_at(global_iter_));
        opt_.step(model_.params());

        nlohmann::json line = to_json(mean_report);
        line["epoch"] = epoch;
        line["iter"] = global_iter_;
        line["scenes"] = ids;
        line["loss"] = loss_value;
        log << line.dump() << "\n";
        epoch_loss += loss_value;
        ++epoch_iters;
        ++global_iter_;
      }
      log.flush();
      result.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(epoch_iters));
      if (progress) {
        (*progress) << "epoch " << epoch << " mean loss "
                    << result.epoch_mean_loss.back() << "\n";
      }
      if ((epoch + 1) % cfg_.train.checkpoint_every == 0 &&
          epoch + 1 < cfg_.train.epochs) {
        save_checkpoint(out_dir_ / ("ckpt_epoch_" + std::to_string(epoch + 1) + ".eanckpt"),
                        epoch + 1);
      }
    }
    result.final_checkpoint = out_dir_ / "final.eanckpt";
    save_checkpoint(result.final_checkpoint, cfg_.train.epochs);
    result.iterations = global_iter_;
    return result;
  }

  void save_checkpoint(const std::filesystem::path& path, int64_t completed_epochs) {
    TensorArchive ar;
    model_.save_checkpoint(ar);
    for (auto& [name, st] : opt_.state()) {
      if (st.m.empty()) continue;
      ar.put("optim." + name + ".m",
             Tensor::from_data({static_cast<int64_t>(st.m.size())}, st.m));
      ar.put("optim." + name + ".v",
             Tensor::from_data({static_cast<int64_t>(st.v.size())}, st.v));
    }
    ar.meta["epoch"] = completed_epochs;
    ar.meta["adam_t"] = opt_.step_count();
    ar.meta["global_iter"] = global_iter_;
    ar.meta["rng"] = rng_.save_state();
    ar.meta["seed"] = seed_;
    ar.meta["config"] = cfg_.to_json_obj();
    ar.save(path);
  }

 private:
  double learning_rate_at(int64_t step) const {
    if (cfg_.train.lr_schedule == "constant") return cfg_.train.lr;
    const int64_t per_epoch =
        (static_cast<int64_t>(scenes_.size()) + cfg_.train.batch_size - 1) /
        cfg_.train.batch_size;
    const int64_t total = std::max<int64_t>(1, cfg_.train.epochs * per_epoch);
    const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
    return cfg_.train.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * f));
  }

  void clip_gradients(double max_norm) {
    double sq = 0.0;
    for (const auto& [name, t] : model_.params().all()) {
      if (!t.has_grad()) continue;
      for (double g : t.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const double scale = max_norm / norm;
    for (const auto& [name, t] : model_.params().all()) {
      if (!t.has_grad()) continue;
      Tensor handle = t;  // grads live on the shared node
      handle.scale_grad(scale);
    }
  }

  static void accumulate_report(LossReport& into, const LossReport& from, double w) {
    into.total += w * from.total;
    into.center += w * from.center;
    into.noncenter += w * from.noncenter;
    for (size_t l = 0; l < into.layers.size() && l < from.layers.size(); ++l) {
      into.layers[l].cls_center += w * from.layers[l].cls_center;
      into.layers[l].pts_center += w * from.layers[l].pts_center;
      into.layers[l].cls_noncenter += w * from.layers[l].cls_noncenter;
      into.layers[l].pts_noncenter += w * from.layers[l].pts_noncenter;
    }
  }

  void dump_bad_batch(int64_t epoch, const std::vector<uint64_t>& ids,
                      const LossReport& report) {
    nlohmann::json dump = to_json(report);
    dump["epoch"] = epoch;
    dump["iter"] = global_iter_;
    dump["scenes"] = ids;
    std::ofstream f(out_dir_ / "nan_dump.json");
    f << dump.dump(2) << "\n";
  }

  RunConfig cfg_;
  std::filesystem::path out_dir_;
  uint64_t seed_;
  DetectionModel model_;
  AdamW opt_;
  RandomStream rng_;
  std::vector<Scene> scenes_;
  std::vector<std::vector<ResampledElement>> gts_;
  int64_t start_epoch_ = 0;
  int64_t global_iter_ = 0;
};

// Convenience wrapper used by the CLI and the ablation driver: train on an
// existing dataset directory, return the result.
inline TrainResult train_run(const RunConfig& cfg, const std::filesystem::path& out_dir,
                             uint64_t seed, const std::filesystem::path& data_dir,
                             std::ostream* progress = nullptr,
                             const std::filesystem::path& resume = {}) {
  Trainer trainer(cfg, out_dir, seed);
  trainer.load_dataset(data_dir);
  if (!resume.empty()) trainer.resume_from(resume);
  return trainer.run(progress);
}

// Loads a checkpoint into a model built from `cfg`, verifying that the
// checkpoint was produced under the same decoder/data configuration.
inline DetectionModel load_model_for_eval(const RunConfig& cfg,
                                          const std::filesystem::path& ckpt_path) {
  TensorArchive ar = TensorArchive::load(ckpt_path);
  const nlohmann::json stored = ar.meta.at("config");
  const nlohmann::json current = cfg.to_json_obj();
  if (stored.at("decoder") != current.at("decoder")) {
    throw ConfigError("checkpoint decoder config does not match the requested config");
  }
  DetectionModel model(cfg.decoder, 0);
  model.load_checkpoint(ar);
  return model;
}

}  // namespace ean
