#pragma once

// Empirical verification of the attention-cost model: instrumented forward
// passes tally exact MACs, which must reproduce the closed forms
//   o1 = M*(2*N*d + N)        (one local-query branch)
//   o2 = M^2*d                (group-token attention scores)
//   o3 = M*(2*N*(N+1)*d + N)  (within-group attention with the extra token)
// against a vanilla baseline of (M*N)^2*d score MACs, and the scaling factor
// delta = (o1+o2+o3)/o_van ~ 2/M + 1/N^2.

#include <cstdint>
#include <ostream>
#include <vector>

#include "ean/glsa.hpp"
#include "ean/profiler.hpp"

namespace ean {

struct ClosedFormCounts {
  int64_t o1 = 0, o2 = 0, o3 = 0;
  int64_t glsa_total() const { return o1 + o2 + o3; }
};

inline ClosedFormCounts closed_form_glsa(int64_t M, int64_t N, int64_t d) {
  return {M * (2 * N * d + N), M * M * d, M * (2 * N * (N + 1) * d + N)};
}

inline int64_t closed_form_vanilla(int64_t M, int64_t N, int64_t d) {
  return (M * N) * (M * N) * d;
}

// Instrumented GL-SA pass on throwaway random weights. Counts are structural,
// so the values never matter; h=1 reproduces the single-head accounting.
inline OpCounter count_glsa(int64_t M, int64_t N, int64_t d, int64_t heads = 1,
                            AttentionTrace* trace = nullptr) {
  NoGradGuard no_grad;
  RandomStream rng(0);
  ParamStore params;
  GlsaWeights w(params, "probe.glsa", d, /*improved=*/true, rng);
  LocalQueries local = init_local_queries(params, "probe.glsa.local_queries", M, d, true, rng);
  Tensor content = Tensor::randn({M, N, d}, rng, 0.5);
  Tensor positions = Tensor::rand01({M, N, 2}, rng);
  GlsaOptions opt;
  opt.heads = heads;
  OpCounter counter;
  counter.groups = M;
  counter.points = N;
  counter.dim = d;
  counter.heads = heads;
  glsa_forward(content, positions, local, w, opt, trace, &counter);
  return counter;
}

inline OpCounter count_vanilla(int64_t M, int64_t N, int64_t d,
                               AttentionTrace* trace = nullptr) {
  NoGradGuard no_grad;
  RandomStream rng(0);
  ParamStore params;
  VanillaWeights w(params, "probe.van", d, rng);
  Tensor tokens = Tensor::randn({M * N, d}, rng, 0.5);
  OpCounter counter;
  counter.groups = M;
  counter.points = N;
  counter.dim = d;
  vanilla_self_attention(tokens, w, /*heads=*/1, trace, &counter, AttnSite::kVanilla);
  return counter;
}

struct ScalingFactor {
  double measured = 0.0;
  double predicted = 0.0;
  double ratio = 0.0;  // measured / predicted
};

inline ScalingFactor scaling_factor(int64_t M, int64_t N, int64_t d) {
  const OpCounter glsa = count_glsa(M, N, d, 1);
  const OpCounter van = count_vanilla(M, N, d);
  ScalingFactor s;
  s.measured = static_cast<double>(glsa.glsa_total()) /
               static_cast<double>(van.vanilla_score_macs());
  s.predicted = 2.0 / static_cast<double>(M) +
                1.0 / (static_cast<double>(N) * static_cast<double>(N));
  s.ratio = s.measured / s.predicted;
  return s;
}

// Attention-matrix element counts as the desk-scale memory stand-in.
struct MemoryProxy {
  int64_t glsa_elems = 0;
  int64_t vanilla_elems = 0;
};

inline MemoryProxy memory_proxy(int64_t M, int64_t N) {
  return {2 * M * N + M * M + M * N * (N + 1), (M * N) * (M * N)};
}

inline MemoryProxy memory_proxy_instrumented(int64_t M, int64_t N, int64_t d = 16) {
  MemoryProxy p;
  p.glsa_elems = count_glsa(M, N, d, 1).glsa_matrix_elems();
  p.vanilla_elems = count_vanilla(M, N, d).vanilla.matrix_elems;
  return p;
}

struct SweepGrid {
  std::vector<int64_t> groups = {10, 25, 50, 100};
  std::vector<int64_t> points = {5, 10, 20};
  std::vector<int64_t> dims = {64, 256};
};

// CSV columns: M,N,d,O1,O2,O3,O_GL,O_van,measured_delta,predicted_delta
inline void run_sweep(const SweepGrid& grid, std::ostream& csv) {
  csv << "M,N,d,O1,O2,O3,O_GL,O_van,measured_delta,predicted_delta\n";
  for (int64_t M : grid.groups) {
    for (int64_t N : grid.points) {
      for (int64_t d : grid.dims) {
        const OpCounter c = count_glsa(M, N, d, 1);
        const OpCounter v = count_vanilla(M, N, d);
        const double measured = static_cast<double>(c.glsa_total()) /
                                static_cast<double>(v.vanilla_score_macs());
        const double predicted = 2.0 / static_cast<double>(M) +
                                 1.0 / (static_cast<double>(N) * static_cast<double>(N));
        csv << M << "," << N << "," << d << "," << c.o1() << "," << c.o2() << "," << c.o3()
            << "," << c.glsa_total() << "," << v.vanilla_score_macs() << "," << measured << ","
            << predicted << "\n";
      }
    }
  }
}

}  // namespace ean
