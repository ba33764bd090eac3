#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "ean/glsa.hpp"
#include "ean/gradcheck.hpp"

using namespace ean;

namespace {

struct Fixture {
  ParamStore params;
  GlsaWeights w;
  LocalQueries local;
  Tensor content, positions;
  GlsaOptions opt;

  Fixture(int64_t M, int64_t N, int64_t n, int64_t heads, uint64_t seed,
          bool improved = true) {
    RandomStream rng(seed);
    w = GlsaWeights(params, "glsa", n, improved, rng);
    local = init_local_queries(params, "glsa.local_queries", M, n, improved, rng);
    content = Tensor::randn({M, N, n}, rng, 0.5);
    positions = Tensor::rand01({M, N, 2}, rng);
    opt.heads = heads;
  }
};

}  // namespace

TEST(Glsa, MinimalShapeIsFinite) {
  Fixture f(1, 1, 8, 1, 101);
  Tensor out = glsa_forward(f.content, f.positions, f.local, f.w, f.opt);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 8}));
  EXPECT_TRUE(all_finite(out));
}

TEST(Glsa, StepThreeUsesTwoTokensAtMinimalShape) {
  Fixture f(1, 1, 8, 1, 103);
  AttentionTrace trace;
  glsa_forward(f.content, f.positions, f.local, f.w, f.opt, &trace);
  // step-3 attention matrix is 1 query over N+1 = 2 tokens
  bool found = false;
  for (const auto& e : trace.attention_matrices) {
    if (std::string(e.label) == "step3") {
      EXPECT_EQ(e.matrix.numel(), 2);
      found = true;
    }
  }
  EXPECT_TRUE(found);
}

TEST(Glsa, ZeroInputsZeroBiasesGiveZeroOutputPath) {
  // With zero content, values are zero everywhere; with the cross-group token
  // silenced the projection path (pre-residual, pre-norm) is exactly zero by
  // linearity. Positions still inject nonzero scores, which must not matter.
  const int64_t M = 3, N = 4, n = 16;
  Fixture f(M, N, n, 2, 107);
  // zero out biases and the inputs
  for (auto& [name, t] : f.params.all()) {
    if (name.size() > 2 && name.substr(name.size() - 2) == ".b") {
      Tensor h = t;
      std::fill(h.mutable_values().begin(), h.mutable_values().end(), 0.0);
    }
  }
  f.content = Tensor::zeros({M, N, n});
  f.positions = Tensor::zeros({M, N, 2});
  {
    Tensor zl = f.local.L;
    std::fill(zl.mutable_values().begin(), zl.mutable_values().end(), 0.0);
  }
  f.opt.zero_step2 = true;
  AttentionTrace trace;
  Tensor out = glsa_forward(f.content, f.positions, f.local, f.w, f.opt, &trace);
  for (double v : trace.tensors.at("psi_q").values()) EXPECT_DOUBLE_EQ(v, 0.0);
  for (double v : trace.tensors.at("psi_p").values()) EXPECT_DOUBLE_EQ(v, 0.0);
  for (double v : trace.tensors.at("q_hat").values()) EXPECT_DOUBLE_EQ(v, 0.0);
  // residual of zeros through layer norm of zeros stays zero
  for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Glsa, GroupPermutationEquivariantBitExact) {
  const int64_t M = 5, N = 3, n = 16;
  Fixture f(M, N, n, 4, 109);
  Tensor out = glsa_forward(f.content, f.positions, f.local, f.w, f.opt);

  std::vector<int64_t> perm = {3, 0, 4, 2, 1};
  Tensor pc = index_rows(f.content, perm).detach();
  Tensor pp = index_rows(f.positions, perm).detach();
  LocalQueries plocal = f.local;
  plocal.L = index_rows(f.local.L, perm).detach();
  Tensor pout = glsa_forward(pc, pp, plocal, f.w, f.opt);

  for (int64_t i = 0; i < M; ++i) {
    for (int64_t j = 0; j < N; ++j) {
      for (int64_t k = 0; k < n; ++k) {
        const double a = pout.at({i, j, k});
        const double b = out.at({perm[static_cast<size_t>(i)], j, k});
        EXPECT_NEAR(a, b, 1e-12);
      }
    }
  }
}

TEST(Glsa, WithinGroupPermutationEquivariant) {
  const int64_t M = 3, N = 5, n = 16;
  Fixture f(M, N, n, 2, 113);
  Tensor out = glsa_forward(f.content, f.positions, f.local, f.w, f.opt);

  // permute the (query, anchor) pairs of group 1 only
  std::vector<int64_t> perm = {2, 4, 0, 1, 3};
  auto permute_group = [&](const Tensor& t, int64_t group) {
    std::vector<double> v = t.values();
    const int64_t inner = t.shape()[2];
    for (int64_t j = 0; j < N; ++j) {
      for (int64_t k = 0; k < inner; ++k) {
        v[static_cast<size_t>((group * N + j) * inner + k)] =
            t.at({group, perm[static_cast<size_t>(j)], k});
      }
    }
    return Tensor::from_data(t.shape(), std::move(v));
  };
  Tensor pc = permute_group(f.content, 1);
  Tensor pp = permute_group(f.positions, 1);
  Tensor pout = glsa_forward(pc, pp, f.local, f.w, f.opt);

  for (int64_t j = 0; j < N; ++j) {
    for (int64_t k = 0; k < n; ++k) {
      EXPECT_NEAR(pout.at({1, j, k}), out.at({1, perm[static_cast<size_t>(j)], k}), 1e-12);
      EXPECT_NEAR(pout.at({0, j, k}), out.at({0, j, k}), 1e-12);  // other groups untouched
    }
  }
}

TEST(Glsa, AttentionRowsAreStochastic) {
  Fixture f(4, 6, 16, 4, 127);
  AttentionTrace trace;
  glsa_forward(f.content, f.positions, f.local, f.w, f.opt, &trace);
  ASSERT_GT(trace.attention_matrices.size(), 0u);
  for (const auto& e : trace.attention_matrices) {
    const Tensor& a = e.matrix;
    const int64_t L = a.shape().back();
    const int64_t rows = a.numel() / L;
    for (int64_t r = 0; r < rows; ++r) {
      double s = 0;
      for (int64_t i = 0; i < L; ++i) {
        const double v = a.values()[static_cast<size_t>(r * L + i)];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9) << e.label;
    }
  }
}

TEST(Glsa, LocalityWhenStepTwoZeroed) {
  const int64_t M = 4, N = 3, n = 16;
  Fixture f(M, N, n, 2, 131);
  f.opt.zero_step2 = true;
  Tensor out = glsa_forward(f.content, f.positions, f.local, f.w, f.opt);

  // rewrite every other group's inputs; group 0 must not move at all
  Tensor c2 = f.content.detach();
  Tensor p2 = f.positions.detach();
  RandomStream rng(997);
  for (int64_t i = 1; i < M; ++i) {
    for (int64_t j = 0; j < N; ++j) {
      for (int64_t k = 0; k < n; ++k) {
        c2.mutable_values()[static_cast<size_t>((i * N + j) * n + k)] = rng.normal();
      }
      p2.mutable_values()[static_cast<size_t>((i * N + j) * 2)] = rng.uniform01();
      p2.mutable_values()[static_cast<size_t>((i * N + j) * 2 + 1)] = rng.uniform01();
    }
  }
  Tensor out2 = glsa_forward(c2, p2, f.local, f.w, f.opt);
  for (int64_t j = 0; j < N; ++j) {
    for (int64_t k = 0; k < n; ++k) {
      EXPECT_EQ(out2.at({0, j, k}), out.at({0, j, k}));
    }
  }
}

TEST(Glsa, HeadCountMustDivideDim) {
  Fixture f(2, 3, 16, 3, 137);
  EXPECT_THROW(glsa_forward(f.content, f.positions, f.local, f.w, f.opt), ConfigError);
}

TEST(Glsa, GradientsMatchFiniteDifferences) {
  const int64_t M = 2, N = 3, n = 8;
  Fixture f(M, N, n, 2, 139);
  RandomStream rng(139);
  Tensor probe = Tensor::randn({M, N, n}, rng, 1.0);
  Tensor content = Tensor::randn({M, N, n}, rng, 0.5, true);
  std::vector<Tensor> leaves = {content, f.local.L, f.w.k1.w, f.w.lq.w, f.w.van.q.w,
                                f.w.q2.w, f.w.kl.w, f.w.out.w, f.w.out.b};
  auto res = finite_difference_check(
      [&] {
        return sum_all(mul(glsa_forward(content, f.positions, f.local, f.w, f.opt), probe));
      },
      leaves, rng, 6);
  EXPECT_TRUE(res.pass()) << "max rel err " << res.max_rel_err;
}

TEST(Vanilla, SingleTokenDegenerates) {
  RandomStream rng(149);
  ParamStore params;
  VanillaWeights w(params, "van", 8, rng);
  Tensor x = Tensor::randn({1, 8}, rng, 0.5);
  Tensor out = vanilla_self_attention(x, w, 2);
  // softmax over one token is 1, so out = x + out_proj(v_proj(x))
  Tensor expected = add(x, w.out(w.v(x)));
  for (int64_t k = 0; k < 8; ++k) {
    EXPECT_NEAR(out.at({0, k}), expected.at({0, k}), 1e-12);
  }
}

TEST(Vanilla, TokenPermutationEquivariant) {
  RandomStream rng(151);
  ParamStore params;
  VanillaWeights w(params, "van", 16, rng);
  Tensor x = Tensor::randn({6, 16}, rng, 0.7);
  Tensor out = vanilla_self_attention(x, w, 4);
  std::vector<int64_t> perm = {5, 2, 0, 4, 1, 3};
  Tensor pout = vanilla_self_attention(index_rows(x, perm).detach(), w, 4);
  for (int64_t t = 0; t < 6; ++t) {
    for (int64_t k = 0; k < 16; ++k) {
      EXPECT_NEAR(pout.at({t, k}), out.at({perm[static_cast<size_t>(t)], k}), 1e-12);
    }
  }
}

TEST(Vanilla, RowsSumToOne) {
  RandomStream rng(157);
  ParamStore params;
  VanillaWeights w(params, "van", 8, rng);
  Tensor x = Tensor::randn({5, 8}, rng, 1.0);
  AttentionTrace trace;
  vanilla_self_attention(x, w, 1, &trace);
  ASSERT_EQ(trace.attention_matrices.size(), 1u);
  const Tensor& a = trace.attention_matrices[0].matrix;
  for (int64_t r = 0; r < 5; ++r) {
    double s = 0;
    for (int64_t i = 0; i < 5; ++i) s += a.values()[static_cast<size_t>(r * 5 + i)];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Dual, IdenticalInputsGiveIdenticalOutputs) {
  Fixture f(3, 4, 16, 2, 163);
  DualGlsaOutput out = glsa_forward_dual(f.content, f.positions, f.content, f.positions,
                                         f.local, f.w, f.opt);
  EXPECT_EQ(out.central.values(), out.noncentral.values());
}

TEST(Dual, ZeroOffsetsCollapseBranches) {
  Fixture f(3, 4, 16, 2, 167);
  Tensor zero_offset_pos = add(f.positions, Tensor::zeros({3, 4, 2}));
  DualGlsaOutput out = glsa_forward_dual(f.content, f.positions, f.content, zero_offset_pos,
                                         f.local, f.w, f.opt);
  for (size_t i = 0; i < out.central.values().size(); ++i) {
    EXPECT_DOUBLE_EQ(out.central.values()[i], out.noncentral.values()[i]);
  }
}

TEST(Dual, ShapeMismatchRejected) {
  Fixture f(3, 4, 16, 2, 173);
  RandomStream rng(173);
  Tensor other = Tensor::randn({3, 5, 16}, rng);
  Tensor other_pos = Tensor::rand01({3, 5, 2}, rng);
  EXPECT_THROW(
      glsa_forward_dual(f.content, f.positions, other, other_pos, f.local, f.w, f.opt),
      DimError);
}

TEST(Dual, SharedWeightsReceiveBothBranchGradients) {
  const int64_t M = 2, N = 3, n = 8;
  Fixture f(M, N, n, 2, 179);
  RandomStream rng(179);
  Tensor pos_nc = Tensor::rand01({M, N, 2}, rng);
  Tensor probe_c = Tensor::randn({M, N, n}, rng);
  Tensor probe_nc = Tensor::randn({M, N, n}, rng);

  auto run = [&](bool central, bool noncentral) {
    f.params.zero_grad_all();
    DualGlsaOutput out =
        glsa_forward_dual(f.content, f.positions, f.content, pos_nc, f.local, f.w, f.opt);
    Tensor loss = Tensor::scalar(0.0);
    Tensor zero = scalar_mul(add(sum_all(out.central), sum_all(out.noncentral)), 0.0);
    if (central) loss = add(loss, sum_all(mul(out.central, probe_c)));
    if (noncentral) loss = add(loss, sum_all(mul(out.noncentral, probe_nc)));
    add(loss, zero).backward();  // keep both branches in the graph either way
    return f.w.q2.w.grad();
  };
  auto g_c = run(true, false);
  auto g_nc = run(false, true);
  auto g_both = run(true, true);
  double nc_norm = 0;
  for (size_t i = 0; i < g_both.size(); ++i) {
    EXPECT_NEAR(g_both[i], g_c[i] + g_nc[i], 1e-9);
    nc_norm += g_nc[i] * g_nc[i];
  }
  EXPECT_GT(nc_norm, 0.0);  // the replica really contributes
}

TEST(GlsaVariants, PlainLocalQueriesAndMeanToggles) {
  const int64_t M = 3, N = 4, n = 16;
  // plain (not improved) local queries
  {
    RandomStream rng(181);
    ParamStore params;
    GlsaWeights w(params, "glsa", n, /*improved=*/false, rng);
    LocalQueries local = init_local_queries(params, "glsa.local_queries", M, n, false, rng);
    EXPECT_EQ(local.L.shape(), (Shape{M, n}));
    Tensor content = Tensor::randn({M, N, n}, rng, 0.5);
    Tensor pos = Tensor::rand01({M, N, 2}, rng);
    GlsaOptions opt;
    opt.heads = 2;
    EXPECT_TRUE(all_finite(glsa_forward(content, pos, local, w, opt)));
  }
  // no local queries, group mean only; and neither (pure within-group)
  {
    Fixture f(M, N, n, 2, 191);
    f.opt.use_local_queries = false;
    AttentionTrace trace;
    Tensor out = glsa_forward(f.content, f.positions, f.local, f.w, f.opt, &trace);
    EXPECT_TRUE(all_finite(out));
    EXPECT_EQ(trace.tensors.count("psi_q"), 0u);
    f.opt.use_group_mean = false;
    AttentionTrace trace2;
    Tensor out2 = glsa_forward(f.content, f.positions, f.local, f.w, f.opt, &trace2);
    EXPECT_TRUE(all_finite(out2));
    // neither mechanism: step-3 attends over exactly N tokens
    for (const auto& e : trace2.attention_matrices) {
      if (std::string(e.label) == "step3") EXPECT_EQ(e.matrix.shape().back(), N);
    }
  }
}
