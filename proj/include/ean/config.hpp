#pragma once

// Run configuration: one JSON document covering the decoder, data generator,
// training recipe, evaluation and profiler sweep. Unknown keys are rejected
// at every level; --set overrides address existing keys by dotted path.

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ean/complexity.hpp"
#include "ean/decoder.hpp"
#include "ean/evaluation.hpp"
#include "ean/synthetic.hpp"

namespace ean {

struct TrainConfig {
  int64_t epochs = 30;
  int64_t batch_size = 4;
  double lr = 2.5e-4;
  double weight_decay = 1.25e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lambda_center = 1.0;
  double lambda_noncenter = 1.0;
  double w_cls = 2.0;
  double w_pts = 5.0;
  bool shared_assignment = false;
  int64_t checkpoint_every = 10;  // epochs
  std::string lr_schedule = "cosine";  // "cosine" | "constant"; lr is the initial rate
  double grad_clip_norm = 35.0;        // global L2 clip; 0 disables

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw ConfigError("train: epochs and batch must be >= 1");
    if (lr <= 0.0) throw ConfigError("train: learning rate must be positive");
    if (checkpoint_every < 1) throw ConfigError("train: checkpoint_every must be >= 1");
    if (lr_schedule != "cosine" && lr_schedule != "constant") {
      throw ConfigError("train: unknown lr schedule '" + lr_schedule + "'");
    }
    if (grad_clip_norm < 0.0) throw ConfigError("train: grad_clip_norm must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"lambda_center", c.lambda_center},
       {"lambda_noncenter", c.lambda_noncenter},
       {"w_cls", c.w_cls},
       {"w_pts", c.w_pts},
       {"shared_assignment", c.shared_assignment},
       {"checkpoint_every", c.checkpoint_every},
       {"lr_schedule", c.lr_schedule},
       {"grad_clip_norm", c.grad_clip_norm}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known = {
      "epochs", "batch_size", "lr", "weight_decay", "beta1", "beta2", "eps",
      "lambda_center", "lambda_noncenter", "w_cls", "w_pts", "shared_assignment",
      "checkpoint_every", "lr_schedule", "grad_clip_norm"};
  for (const auto& [key, v] : j.items()) {
    if (!known.count(key)) throw ConfigError("train config: unknown key '" + key + "'");
  }
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.lambda_center = j.value("lambda_center", d.lambda_center);
  c.lambda_noncenter = j.value("lambda_noncenter", d.lambda_noncenter);
  c.w_cls = j.value("w_cls", d.w_cls);
  c.w_pts = j.value("w_pts", d.w_pts);
  c.shared_assignment = j.value("shared_assignment", d.shared_assignment);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.lr_schedule = j.value("lr_schedule", d.lr_schedule);
  c.grad_clip_norm = j.value("grad_clip_norm", d.grad_clip_norm);
}

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"thresholds", c.thresholds}, {"score_floor", c.score_floor}};
}

inline void eval_from_json(const nlohmann::json& j, EvalConfig& c) {
  static const std::set<std::string> known = {"thresholds", "score_floor"};
  for (const auto& [key, v] : j.items()) {
    if (!known.count(key)) throw ConfigError("eval config: unknown key '" + key + "'");
  }
  EvalConfig d;
  c.thresholds = j.value("thresholds", d.thresholds);
  c.score_floor = j.value("score_floor", d.score_floor);
}

inline void to_json(nlohmann::json& j, const SweepGrid& g) {
  j = {{"groups", g.groups}, {"points", g.points}, {"dims", g.dims}};
}

inline void sweep_from_json(const nlohmann::json& j, SweepGrid& g) {
  static const std::set<std::string> known = {"groups", "points", "dims"};
  for (const auto& [key, v] : j.items()) {
    if (!known.count(key)) throw ConfigError("profile config: unknown key '" + key + "'");
  }
  SweepGrid d;
  g.groups = j.value("groups", d.groups);
  g.points = j.value("points", d.points);
  g.dims = j.value("dims", d.dims);
}

struct RunConfig {
  DecoderConfig decoder;
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;
  SweepGrid profile;
  std::string data_dir;  // empty: <out>/dataset

  void validate() const {
    decoder.validate();
    data.validate();
    train.validate();
    eval.validate();
    if (decoder.bev_channels != data.channels) {
      throw ConfigError("decoder.bev_channels must equal data.channels");
    }
    if (decoder.points_per_element != data.n_points) {
      throw ConfigError("decoder.points_per_element must equal data.n_points");
    }
  }

  nlohmann::json to_json_obj() const {
    return {{"decoder", decoder}, {"data", data},       {"train", train},
            {"eval", eval},       {"profile", profile}, {"data_dir", data_dir}};
  }

  static RunConfig from_json_obj(const nlohmann::json& j) {
    static const std::set<std::string> known = {"decoder", "data", "train",
                                                "eval",    "profile", "data_dir"};
    for (const auto& [key, v] : j.items()) {
      if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "'");
    }
    RunConfig c;
    if (j.contains("decoder")) c.decoder = j.at("decoder").get<DecoderConfig>();
    if (j.contains("data")) c.data = j.at("data").get<DataConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("eval")) eval_from_json(j.at("eval"), c.eval);
    if (j.contains("profile")) sweep_from_json(j.at("profile"), c.profile);
    c.data_dir = j.value("data_dir", std::string{});
    c.eval.num_classes = c.decoder.num_classes;
    return c;
  }
};

// `key=value` pairs address the JSON tree by dotted path; the key must exist.
// Values parse as JSON scalars when possible and fall back to strings.
inline void apply_override(nlohmann::json& tree, const std::string& spec) {
  const size_t eq = spec.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + spec + "' is not of the form key=value");
  }
  const std::string path = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);

  nlohmann::json* node = &tree;
  size_t at = 0;
  std::string leaf;
  while (true) {
    const size_t dot = path.find('.', at);
    const std::string part = path.substr(at, dot == std::string::npos ? dot : dot - at);
    if (!node->contains(part)) {
      throw ConfigError("override names unknown config key '" + path + "'");
    }
    if (dot == std::string::npos) {
      leaf = part;
      break;
    }
    node = &(*node)[part];
    at = dot + 1;
  }
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;  // plain string
  (*node)[leaf] = value;
}

inline RunConfig load_run_config(const std::filesystem::path& config_path,
                                 const std::vector<std::string>& overrides) {
  nlohmann::json tree = RunConfig{}.to_json_obj();
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw IoError("cannot open config '" + config_path.string() + "'");
    nlohmann::json file_tree;
    f >> file_tree;
    RunConfig parsed = RunConfig::from_json_obj(file_tree);  // validates keys
    tree = parsed.to_json_obj();
  }
  for (const std::string& o : overrides) apply_override(tree, o);
  RunConfig cfg = RunConfig::from_json_obj(tree);
  cfg.validate();
  return cfg;
}

}  // namespace ean
