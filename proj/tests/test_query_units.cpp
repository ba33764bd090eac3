#include <gtest/gtest.h>

#include <cmath>

#include "ean/gradcheck.hpp"
#include "ean/query_units.hpp"

using namespace ean;

TEST(InitQueryUnits, PaperScaleGivesTwoThousandCentralAnchors) {
  RandomStream rng(71);
  QueryUnitBatch b = init_query_units(100, 20, 64, 0.5, rng);
  QueryParts q = assemble_parts(b, false);
  EXPECT_EQ(q.central_pos.shape(), (Shape{100, 20, 2}));
  EXPECT_EQ(q.central_pos.numel(), 100 * 20 * 2);
}

TEST(InitQueryUnits, ZeroGroupPosMakesGroupsCoincide) {
  RandomStream rng(73);
  QueryUnitBatch b = init_query_units(4, 6, 16, 0.5, rng);
  QueryParts q = assemble_parts(b, false);
  for (int64_t j = 0; j < 6; ++j) {
    for (int64_t i = 1; i < 4; ++i) {
      EXPECT_EQ(q.central_pos.at({i, j, 0}), q.central_pos.at({0, j, 0}));
      EXPECT_EQ(q.central_pos.at({i, j, 1}), q.central_pos.at({0, j, 1}));
    }
  }
}

TEST(InitQueryUnits, SameSeedSameInit) {
  RandomStream a(75), b(75);
  QueryUnitBatch qa = init_query_units(5, 7, 8, 0.5, a);
  QueryUnitBatch qb = init_query_units(5, 7, 8, 0.5, b);
  EXPECT_EQ(qa.base_anchors.values(), qb.base_anchors.values());
  EXPECT_EQ(qa.content.values(), qb.content.values());
  EXPECT_EQ(qa.group_content.values(), qb.group_content.values());
}

TEST(InitQueryUnits, OddEmbedDimRejected) {
  RandomStream rng(77);
  EXPECT_THROW(init_query_units(4, 6, 15, 0.5, rng), ConfigError);
}

TEST(ResampleNoncentral, OffsetsInsidePerAxisNormalizedBounds) {
  RandomStream rng(79);
  QueryUnitBatch b = init_query_units(8, 10, 16, 0.5, rng);
  const double a = 0.5;
  resample_noncentral(b, a, rng);
  const auto& v = b.noncentral_offsets.values();
  for (size_t i = 0; i < v.size(); i += 2) {
    EXPECT_LT(std::abs(v[i]), (a / kBevXExtent) / 2.0);
    EXPECT_LT(std::abs(v[i + 1]), (a / kBevYExtent) / 2.0);
    // back in meters: strictly inside the open square, diagonal < a/2*sqrt(2)
    const double mx = v[i] * kBevXExtent, my = v[i + 1] * kBevYExtent;
    EXPECT_LT(std::hypot(mx, my), 0.25 * std::sqrt(2.0) * (a / 0.5));
  }
}

TEST(ResampleNoncentral, FreshDrawsDiffer) {
  RandomStream rng(81);
  QueryUnitBatch b = init_query_units(3, 4, 8, 0.5, rng);
  resample_noncentral(b, 0.5, rng);
  auto first = b.noncentral_offsets.values();
  resample_noncentral(b, 0.5, rng);
  EXPECT_NE(first, b.noncentral_offsets.values());
}

TEST(ResampleNoncentral, RandomOverBevCoversThePlane) {
  RandomStream rng(83);
  QueryUnitBatch b = init_query_units(10, 10, 8, 0.5, rng);
  resample_noncentral(b, 0.5, rng, /*random_over_bev=*/true);
  QueryParts q = assemble_parts(b, true);
  double min_x = 1, max_x = 0;
  for (int64_t i = 0; i < 10; ++i) {
    for (int64_t j = 0; j < 10; ++j) {
      const double x = q.noncentral_pos.at({i, j, 0});
      min_x = std::min(min_x, x);
      max_x = std::max(max_x, x);
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
  EXPECT_LT(min_x, 0.25);  // spread far beyond any 0.5 m neighborhood
  EXPECT_GT(max_x, 0.75);
}

TEST(SinePe, OriginGivesZeroSinesUnitCosines) {
  Tensor pe = sine_pe(Tensor::from_data({1, 2}, {0, 0}), 16);
  for (int64_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(pe.at({0, 2 * i}), 0.0);      // x-block sines
    EXPECT_DOUBLE_EQ(pe.at({0, 2 * i + 1}), 1.0);  // x-block cosines
  }
}

TEST(SinePe, TranslationSensitive) {
  Tensor a = sine_pe(Tensor::from_data({1, 2}, {0.3, 0.4}), 16);
  Tensor b = sine_pe(Tensor::from_data({1, 2}, {0.4, 0.5}), 16);
  EXPECT_NE(a.values(), b.values());
}

TEST(SinePe, RowPermutationPermutesOutputs) {
  Tensor fwd = sine_pe(Tensor::from_data({3, 2}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}), 8);
  Tensor rev = sine_pe(Tensor::from_data({3, 2}, {0.5, 0.6, 0.3, 0.4, 0.1, 0.2}), 8);
  for (int64_t k = 0; k < 8; ++k) {
    EXPECT_EQ(fwd.at({0, k}), rev.at({2, k}));
    EXPECT_EQ(fwd.at({2, k}), rev.at({0, k}));
    EXPECT_EQ(fwd.at({1, k}), rev.at({1, k}));
  }
}

TEST(SinePe, BadDimRejected) {
  EXPECT_THROW(sine_pe(Tensor::from_data({1, 2}, {0, 0}), 10), ConfigError);
}

TEST(Assemble, DegenerateOffsetsMakeBranchesEqual) {
  RandomStream rng(87);
  QueryUnitBatch b = init_query_units(4, 5, 8, 0.5, rng);
  b.noncentral_offsets = Tensor::zeros({4, 5, 2});
  AssembledQueries q = assemble_queries(b);
  EXPECT_EQ(q.central.values(), q.noncentral.values());
  EXPECT_EQ(q.central.shape(), (Shape{4, 5, 2 + 8}));
}

TEST(Assemble, GroupContentTouchesOnlyItsGroup) {
  RandomStream rng(89);
  QueryUnitBatch b = init_query_units(3, 4, 8, 0.5, rng);
  QueryParts before = assemble_parts(b, false);
  b.group_content.mutable_values()[1 * 8 + 3] += 0.5;  // bump group 1 only
  QueryParts after = assemble_parts(b, false);
  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t j = 0; j < 4; ++j) {
      for (int64_t k = 0; k < 8; ++k) {
        const double delta = after.content.at({i, j, k}) - before.content.at({i, j, k});
        if (i == 1 && k == 3) {
          EXPECT_DOUBLE_EQ(delta, 0.5);
        } else {
          EXPECT_DOUBLE_EQ(delta, 0.0);
        }
      }
    }
  }
}

TEST(Assemble, MissingOffsetsInTrainingRejected) {
  RandomStream rng(91);
  QueryUnitBatch b = init_query_units(2, 3, 8, 0.5, rng);
  EXPECT_THROW(assemble_parts(b, true), ContractError);
}

TEST(Assemble, PerturbingOffsetsLeavesCentralBranchBitIdentical) {
  RandomStream rng(93);
  QueryUnitBatch b = init_query_units(4, 5, 8, 0.5, rng);
  resample_noncentral(b, 0.5, rng);
  QueryParts q1 = assemble_parts(b, true);
  resample_noncentral(b, 0.5, rng);
  QueryParts q2 = assemble_parts(b, true);
  EXPECT_EQ(q1.central_pos.values(), q2.central_pos.values());
  EXPECT_NE(q1.noncentral_pos.values(), q2.noncentral_pos.values());
}

// Shared content: gradients arriving through both branches accumulate into C,
// matching the sum of the single-branch gradients.
TEST(Assemble, ContentGradAccumulatesAcrossBranches) {
  RandomStream rng(95);
  QueryUnitBatch b = init_query_units(3, 4, 8, 0.5, rng);
  ParamStore params;
  register_query_params(params, b);
  resample_noncentral(b, 0.5, rng);
  Tensor wc = Tensor::randn({3, 4, 8}, rng);   // fixed probe weights
  Tensor wn = Tensor::randn({3, 4, 8}, rng);

  auto central_loss = [&] {
    QueryParts q = assemble_parts(b, true);
    return sum_all(mul(mul(q.content, q.content), wc));
  };
  auto noncentral_loss = [&] {
    QueryParts q = assemble_parts(b, true);
    // touch the twin positions so the branch is "real", then weigh content
    return add(sum_all(mul(mul(q.content, q.content), wn)),
               scalar_mul(sum_all(q.noncentral_pos), 0.0));
  };

  params.zero_grad_all();
  central_loss().backward();
  auto g_central = b.content.grad();
  params.zero_grad_all();
  noncentral_loss().backward();
  auto g_noncentral = b.content.grad();
  params.zero_grad_all();
  add(central_loss(), noncentral_loss()).backward();
  const auto& g_both = b.content.grad();
  for (size_t i = 0; i < g_both.size(); ++i) {
    EXPECT_NEAR(g_both[i], g_central[i] + g_noncentral[i], 1e-12);
  }
}

TEST(Assemble, NoncentralGradReachesContentParams) {
  RandomStream rng(97);
  QueryUnitBatch b = init_query_units(2, 3, 8, 0.5, rng);
  ParamStore params;
  register_query_params(params, b);
  resample_noncentral(b, 0.5, rng);
  QueryParts q = assemble_parts(b, true);
  // Loss depends only on the non-central branch content slice.
  sum_all(mul(q.content, q.content)).backward();
  EXPECT_TRUE(b.content.has_grad());
  EXPECT_TRUE(b.group_content.has_grad());
  EXPECT_FALSE(b.noncentral_offsets.has_grad());  // offsets are non-learnable noise
}
