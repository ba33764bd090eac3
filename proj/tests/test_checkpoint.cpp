#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ean/checkpoint.hpp"
#include "ean/rng.hpp"
#include "ean/tensor.hpp"

using namespace ean;
namespace fs = std::filesystem;

namespace {
fs::path temp_file(const char* stem) {
  return fs::temp_directory_path() / (std::string(stem) + std::to_string(::getpid()) + ".eanckpt");
}
}  // namespace

TEST(Archive, RoundTripIsBitExact) {
  RandomStream rng(61);
  TensorArchive ar;
  Tensor a = Tensor::randn({3, 7}, rng);
  Tensor b = Tensor::randn({16}, rng);
  Tensor c = Tensor::randn({2, 2, 5}, rng);
  ar.put("query.P", a);
  ar.put("query.C", b);
  ar.put("layer0.w", c);
  ar.meta["epoch"] = 12;
  ar.meta["rng"] = rng.save_state();

  const fs::path p = temp_file("roundtrip");
  ar.save(p);
  TensorArchive back = TensorArchive::load(p);
  EXPECT_EQ(back.get("query.P").values(), a.values());
  EXPECT_EQ(back.get("query.P").shape(), a.shape());
  EXPECT_EQ(back.get("query.C").values(), b.values());
  EXPECT_EQ(back.get("layer0.w").values(), c.values());
  EXPECT_EQ(back.meta["epoch"], 12);
  EXPECT_EQ(back.meta["rng"], ar.meta["rng"]);
  fs::remove(p);
}

TEST(Archive, MagicIsChecked) {
  const fs::path p = temp_file("magic");
  {
    std::ofstream f(p, std::ios::binary);
    f << "NOTANARCHIVE";
  }
  EXPECT_THROW(TensorArchive::load(p), IoError);
  fs::remove(p);
}

TEST(Archive, TruncationDetected) {
  RandomStream rng(67);
  TensorArchive ar;
  ar.put("w", Tensor::randn({64, 64}, rng));
  const fs::path p = temp_file("trunc");
  ar.save(p);
  const auto full = fs::file_size(p);
  fs::resize_file(p, full - 128);
  EXPECT_THROW(TensorArchive::load(p), IoError);
  fs::remove(p);
}

TEST(Archive, MissingTensorNamed) {
  TensorArchive ar;
  ar.put("present", Tensor::zeros({2}));
  EXPECT_THROW(ar.get("absent"), IoError);
}
