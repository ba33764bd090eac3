// Exercises the config system plus the training/checkpoint machinery the CLI
// drives: determinism of generation, bit-exact resume, checkpoint/config
// mismatch handling, micro-scale train/eval wiring.

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ean/config.hpp"
#include "ean/evaluation.hpp"
#include "ean/train.hpp"

using namespace ean;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* stem) {
  auto p = fs::temp_directory_path() / (std::string(stem) + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Micro recipe: seconds-scale end-to-end runs.
RunConfig micro_config() {
  RunConfig cfg;
  cfg.data.train_scenes = 12;
  cfg.data.val_scenes = 4;
  cfg.data.channels = 4;
  cfg.data.height = 40;
  cfg.data.width = 20;
  cfg.data.n_points = 6;
  cfg.decoder.bev_channels = 4;
  cfg.decoder.points_per_element = 6;
  cfg.decoder.groups = 10;
  cfg.decoder.embed_dim = 16;
  cfg.decoder.heads = 2;
  cfg.decoder.layers = 1;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 4;
  cfg.train.checkpoint_every = 1;
  return cfg;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::vector<double> losses_from_log(const fs::path& p) {
  std::vector<double> out;
  std::ifstream f(p);
  std::string line;
  while (std::getline(f, line)) {
    out.push_back(nlohmann::json::parse(line).at("loss").get<double>());
  }
  return out;
}

}  // namespace

TEST(Config, DefaultsValidateAndRoundTrip) {
  RunConfig cfg;
  cfg.validate();
  nlohmann::json j = cfg.to_json_obj();
  RunConfig back = RunConfig::from_json_obj(j);
  EXPECT_EQ(back.to_json_obj(), j);
}

TEST(Config, UnknownKeysRejectedAtEveryLevel) {
  nlohmann::json j = RunConfig{}.to_json_obj();
  j["mystery"] = 1;
  EXPECT_THROW(RunConfig::from_json_obj(j), ConfigError);
  nlohmann::json j2 = RunConfig{}.to_json_obj();
  j2["decoder"]["mystery"] = 1;
  EXPECT_THROW(RunConfig::from_json_obj(j2), ConfigError);
  nlohmann::json j3 = RunConfig{}.to_json_obj();
  j3["train"]["mystery"] = 1;
  EXPECT_THROW(RunConfig::from_json_obj(j3), ConfigError);
}

TEST(Config, OverridesRequireExistingKeys) {
  nlohmann::json tree = RunConfig{}.to_json_obj();
  apply_override(tree, "decoder.groups=50");
  EXPECT_EQ(tree["decoder"]["groups"], 50);
  apply_override(tree, "train.lr=0.001");
  EXPECT_DOUBLE_EQ(tree["train"]["lr"].get<double>(), 0.001);
  EXPECT_THROW(apply_override(tree, "decoder.nonexistent=1"), ConfigError);
  EXPECT_THROW(apply_override(tree, "malformed"), ConfigError);
}

TEST(Config, CrossFieldConsistencyEnforced) {
  RunConfig cfg = micro_config();
  cfg.decoder.bev_channels = 8;  // disagrees with data.channels = 4
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TrainCli, SameSeedSameLogBytes) {
  RunConfig cfg = micro_config();
  auto data_dir = temp_dir("cli_data");
  save_split(data_dir, "train", generate_split(cfg.data, 5, 0, cfg.data.train_scenes),
             cfg.data, 5);
  auto out_a = temp_dir("cli_runa");
  auto out_b = temp_dir("cli_runb");
  train_run(cfg, out_a, 7, data_dir);
  train_run(cfg, out_b, 7, data_dir);
  EXPECT_EQ(file_bytes(out_a / "train_log.jsonl"), file_bytes(out_b / "train_log.jsonl"));
  EXPECT_EQ(file_bytes(out_a / "final.eanckpt"), file_bytes(out_b / "final.eanckpt"));
  fs::remove_all(data_dir);
  fs::remove_all(out_a);
  fs::remove_all(out_b);
}

TEST(TrainCli, ResumeReproducesLossesBitExactly) {
  RunConfig cfg = micro_config();
  cfg.train.epochs = 4;
  cfg.train.checkpoint_every = 2;
  auto data_dir = temp_dir("cli_data_resume");
  save_split(data_dir, "train", generate_split(cfg.data, 5, 0, cfg.data.train_scenes),
             cfg.data, 5);

  auto out_full = temp_dir("cli_full");
  train_run(cfg, out_full, 9, data_dir);  // writes ckpt_epoch_2 along the way
  const auto full_losses = losses_from_log(out_full / "train_log.jsonl");

  // resume the same run from its mid-point checkpoint
  auto out_resumed = temp_dir("cli_resumed");
  train_run(cfg, out_resumed, 9, data_dir, nullptr, out_full / "ckpt_epoch_2.eanckpt");
  const auto tail_losses = losses_from_log(out_resumed / "train_log.jsonl");

  ASSERT_EQ(full_losses.size(), 12u);  // 4 epochs x 3 iterations
  ASSERT_EQ(tail_losses.size(), 6u);
  for (size_t i = 0; i < tail_losses.size(); ++i) {
    EXPECT_EQ(tail_losses[i], full_losses[6 + i]) << "iteration " << i;
  }
  // the resumed run's final weights equal the uninterrupted run's
  EXPECT_EQ(file_bytes(out_resumed / "final.eanckpt"), file_bytes(out_full / "final.eanckpt"));
  fs::remove_all(data_dir);
  fs::remove_all(out_full);
  fs::remove_all(out_resumed);
}

TEST(TrainCli, CheckpointConfigMismatchRejected) {
  RunConfig cfg = micro_config();
  auto data_dir = temp_dir("cli_data_mismatch");
  save_split(data_dir, "train", generate_split(cfg.data, 5, 0, cfg.data.train_scenes),
             cfg.data, 5);
  auto out = temp_dir("cli_mismatch");
  TrainResult res = train_run(cfg, out, 3, data_dir);
  RunConfig other = cfg;
  other.decoder.groups = cfg.decoder.groups + 2;
  EXPECT_THROW(load_model_for_eval(other, res.final_checkpoint), ConfigError);
  EXPECT_NO_THROW(load_model_for_eval(cfg, res.final_checkpoint));
  fs::remove_all(data_dir);
  fs::remove_all(out);
}

TEST(TrainCli, CentralOnlyRunWhenLambdaZero) {
  RunConfig cfg = micro_config();
  cfg.decoder.use_noncentral_branch = false;
  cfg.train.lambda_noncenter = 0.0;
  auto data_dir = temp_dir("cli_data_l0");
  save_split(data_dir, "train", generate_split(cfg.data, 5, 0, cfg.data.train_scenes),
             cfg.data, 5);
  auto out = temp_dir("cli_l0");
  train_run(cfg, out, 3, data_dir);
  // every logged iteration reports zero auxiliary loss
  std::ifstream f(out / "train_log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(f, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_DOUBLE_EQ(j.at("noncenter").get<double>(), 0.0);
    EXPECT_GT(j.at("loss").get<double>(), 0.0);
    ++lines;
  }
  EXPECT_GT(lines, 0);
  fs::remove_all(data_dir);
  fs::remove_all(out);
}

TEST(TrainCli, GroupCountMustCoverInstances) {
  RunConfig cfg = micro_config();
  cfg.decoder.groups = 2;  // fewer than max instances per scene
  auto data_dir = temp_dir("cli_data_groups");
  save_split(data_dir, "train", generate_split(cfg.data, 11, 0, 6), cfg.data, 11);
  Trainer trainer(cfg, temp_dir("cli_groups_out"), 1);
  EXPECT_THROW(trainer.load_dataset(data_dir), ConfigError);
  fs::remove_all(data_dir);
}

TEST(TrainCli, UntrainedModelScoresNearZero) {
  RunConfig cfg = micro_config();
  auto data_dir = temp_dir("cli_data_untrained");
  auto val = generate_split(cfg.data, 21, 1000, 8);
  save_split(data_dir, "val", val, cfg.data, 21);
  DetectionModel model(cfg.decoder, 77);
  EvalConfig ecfg = cfg.eval;
  ecfg.num_classes = cfg.decoder.num_classes;
  EvalReport r = evaluate_split(model, val, ecfg);
  EXPECT_LT(r.map, 0.1);
  fs::remove_all(data_dir);
}
