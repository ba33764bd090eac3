#include <gtest/gtest.h>

#include <sstream>

#include "ean/complexity.hpp"

using namespace ean;

TEST(ClosedForm, PinnedBreakdownAtPaperScale) {
  const ClosedFormCounts c = closed_form_glsa(100, 20, 256);
  EXPECT_EQ(c.o1, 1026000);
  EXPECT_EQ(c.o2, 2560000);
  EXPECT_EQ(c.o3, 21506000);
}

TEST(ClosedForm, VanillaBaseline) {
  EXPECT_EQ(closed_form_vanilla(100, 20, 256), 1024000000LL);
  EXPECT_EQ(closed_form_vanilla(1, 1, 64), 64);
}

TEST(Instrumented, MatchesClosedFormExactly) {
  for (auto [M, N, d] : {std::tuple<int64_t, int64_t, int64_t>{3, 2, 8},
                         {5, 4, 16},
                         {10, 5, 32},
                         {25, 10, 64}}) {
    const OpCounter c = count_glsa(M, N, d, 1);
    const ClosedFormCounts f = closed_form_glsa(M, N, d);
    EXPECT_EQ(c.o1(), f.o1) << "M=" << M << " N=" << N << " d=" << d;
    EXPECT_EQ(c.o2(), f.o2) << "M=" << M << " N=" << N << " d=" << d;
    EXPECT_EQ(c.o3(), f.o3) << "M=" << M << " N=" << N << " d=" << d;
    // the two local-query branches are symmetric
    EXPECT_EQ(c.step1_q.score_macs, c.step1_p.score_macs);
    EXPECT_EQ(c.step1_q.matrix_elems, c.step1_p.matrix_elems);
    const OpCounter v = count_vanilla(M, N, d);
    EXPECT_EQ(v.vanilla_score_macs(), closed_form_vanilla(M, N, d));
  }
}

TEST(Instrumented, VanillaValueProductDoublesScores) {
  const OpCounter v = count_vanilla(5, 4, 16);
  EXPECT_EQ(v.vanilla.value_macs, v.vanilla.score_macs);
}

TEST(Instrumented, VanillaScalesQuadraticallyWithTokens) {
  const OpCounter a = count_vanilla(4, 5, 16);
  const OpCounter b = count_vanilla(8, 5, 16);  // token count doubles
  EXPECT_EQ(b.vanilla_score_macs(), 4 * a.vanilla_score_macs());
}

TEST(ScalingFactor, PredictedValuesPinned) {
  EXPECT_DOUBLE_EQ(scaling_factor(100, 20, 32).predicted, 0.0225);
  EXPECT_DOUBLE_EQ(scaling_factor(50, 20, 32).predicted, 0.0425);
}

TEST(ScalingFactor, MeasuredWithinFactorTwoAcrossSweepGrid) {
  const SweepGrid grid;
  for (int64_t M : grid.groups) {
    for (int64_t N : grid.points) {
      const ScalingFactor s = scaling_factor(M, N, 32);
      EXPECT_GE(s.ratio, 0.5) << "M=" << M << " N=" << N;
      EXPECT_LE(s.ratio, 2.0) << "M=" << M << " N=" << N;
    }
  }
}

TEST(ScalingFactor, MonotoneInGroupsAndPoints) {
  const std::vector<int64_t> Ms = {3, 5, 10, 25, 50};
  const std::vector<int64_t> Ns = {2, 5, 10, 20};
  for (size_t i = 0; i < Ms.size(); ++i) {
    for (size_t j = 0; j < Ns.size(); ++j) {
      const double here = scaling_factor(Ms[i], Ns[j], 16).measured;
      if (i + 1 < Ms.size()) {
        EXPECT_GT(here, scaling_factor(Ms[i + 1], Ns[j], 16).measured);
      }
      if (j + 1 < Ns.size()) {
        EXPECT_GT(here, scaling_factor(Ms[i], Ns[j + 1], 16).measured);
      }
    }
  }
}

TEST(MemoryProxy, PinnedAtPaperScale) {
  const MemoryProxy p = memory_proxy(100, 20);
  EXPECT_EQ(p.glsa_elems, 56000);
  EXPECT_EQ(p.vanilla_elems, 4000000);
  EXPECT_LE(static_cast<double>(p.glsa_elems) / p.vanilla_elems, 0.02);
}

TEST(MemoryProxy, CrossoverAtDegenerateScale) {
  const MemoryProxy p = memory_proxy(1, 1);
  EXPECT_EQ(p.glsa_elems, 5);  // 2 + 1 + 2
  EXPECT_EQ(p.vanilla_elems, 1);
}

TEST(MemoryProxy, InstrumentedTraceAgrees) {
  for (auto [M, N] : {std::pair<int64_t, int64_t>{4, 3}, {10, 5}, {25, 10}}) {
    const MemoryProxy closed = memory_proxy(M, N);
    const MemoryProxy measured = memory_proxy_instrumented(M, N);
    EXPECT_EQ(closed.glsa_elems, measured.glsa_elems) << "M=" << M << " N=" << N;
    EXPECT_EQ(closed.vanilla_elems, measured.vanilla_elems);
    // cross-check against the captured attention matrices themselves
    AttentionTrace trace;
    count_glsa(M, N, 16, 1, &trace);
    EXPECT_EQ(trace.total_matrix_elems(), closed.glsa_elems);
  }
}

TEST(Trace, DumpsToArchiveFormat) {
  AttentionTrace trace;
  count_glsa(4, 3, 8, 1, &trace);
  const auto path = std::filesystem::temp_directory_path() /
                    ("trace_" + std::to_string(::getpid()) + ".eanckpt");
  trace.save(path);
  TensorArchive back = TensorArchive::load(path);
  // every captured attention matrix and intermediate is retrievable
  EXPECT_GE(back.names().size(), trace.attention_matrices.size() + trace.tensors.size());
  EXPECT_EQ(back.get("psi_q").values(), trace.tensors.at("psi_q").values());
  int64_t matrix_elems = 0;
  for (const std::string& name : back.names()) {
    if (name.rfind("attn.", 0) == 0) matrix_elems += back.get(name).numel();
  }
  EXPECT_EQ(matrix_elems, memory_proxy(4, 3).glsa_elems);
  std::filesystem::remove(path);
}

TEST(Sweep, CsvHasHeaderAndFullGrid) {
  SweepGrid grid;
  grid.groups = {5, 10};
  grid.points = {2, 5};
  grid.dims = {8};
  std::ostringstream csv;
  run_sweep(grid, csv);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "M,N,d,O1,O2,O3,O_GL,O_van,measured_delta,predicted_delta");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 4);
}
