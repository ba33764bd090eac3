#pragma once

// Grouped anchor query units. A shared template of N base anchors P and
// content vectors C is offset per group by grouping embeddings (g^p, g^c),
// giving M̂ groups of N central queries. Each unit also carries a non-central
// twin: the same content, position displaced inside a square neighborhood of
// side a. The twin exists only during training.

#include <string>
#include <vector>

#include "ean/errors.hpp"
#include "ean/geometry.hpp"
#include "ean/optim.hpp"
#include "ean/rng.hpp"
#include "ean/tensor.hpp"

namespace ean {

struct QueryUnitBatch {
  Tensor base_anchors;   // P: [N,2], normalized coords, learnable
  Tensor content;        // C: [N,n], learnable
  Tensor group_pos;      // g^p: [M,2], learnable
  Tensor group_content;  // g^c: [M,n], learnable
  Tensor noncentral_offsets;  // [M,N,2] normalized, constant noise; empty until resampled
  int64_t groups = 0;          // M̂
  int64_t points_per_group = 0;  // N
  int64_t embed_dim = 0;         // n

  bool has_offsets() const { return noncentral_offsets.defined(); }
};

inline QueryUnitBatch init_query_units(int64_t groups, int64_t points, int64_t embed_dim,
                                       double a_meters, RandomStream& rng) {
  if (groups < 1 || points < 1) throw ConfigError("init_query_units: need M,N >= 1");
  if (embed_dim % 2 != 0) {
    throw ConfigError("init_query_units: odd embed dim " + std::to_string(embed_dim) +
                      " cannot split for sine encoding");
  }
  if (a_meters <= 0.0) throw ConfigError("init_query_units: neighborhood side must be positive");
  QueryUnitBatch b;
  b.groups = groups;
  b.points_per_group = points;
  b.embed_dim = embed_dim;
  b.base_anchors = Tensor::rand01({points, 2}, rng);
  b.content = Tensor::randn({points, embed_dim}, rng, 0.02);
  b.group_pos = Tensor::zeros({groups, 2});
  b.group_content = Tensor::randn({groups, embed_dim}, rng, 0.02);
  return b;
}

// Registers the four learnable tensors under their archive names.
inline void register_query_params(ParamStore& params, QueryUnitBatch& b) {
  b.base_anchors = params.add("query.P", b.base_anchors);
  b.content = params.add("query.C", b.content);
  b.group_pos = params.add("query.gp", b.group_pos);
  b.group_content = params.add("query.gc", b.group_content);
}

// Draws fresh per-unit offsets; call once per training iteration. Offsets are
// drawn in meters inside the open square (-a/2, a/2)^2 and stored in
// normalized units (per-axis conversion). With `random_over_bev` the twin
// anchors are instead placed uniformly on the BEV plane, so the offset is
// whatever displacement reaches that point from the current central anchor.
inline void resample_noncentral(QueryUnitBatch& b, double a_meters, RandomStream& rng,
                                bool random_over_bev = false) {
  const int64_t M = b.groups, N = b.points_per_group;
  std::vector<double> offs(static_cast<size_t>(M * N * 2));
  if (random_over_bev) {
    const auto& pv = b.base_anchors.values();
    const auto& gv = b.group_pos.values();
    for (int64_t i = 0; i < M; ++i) {
      for (int64_t j = 0; j < N; ++j) {
        const double cx = pv[static_cast<size_t>(2 * j)] + gv[static_cast<size_t>(2 * i)];
        const double cy = pv[static_cast<size_t>(2 * j + 1)] + gv[static_cast<size_t>(2 * i + 1)];
        offs[static_cast<size_t>((i * N + j) * 2)] = rng.uniform01() - cx;
        offs[static_cast<size_t>((i * N + j) * 2 + 1)] = rng.uniform01() - cy;
      }
    }
  } else {
    for (int64_t u = 0; u < M * N; ++u) {
      const Vec2 d = square_neighborhood_offset(a_meters, rng);
      offs[static_cast<size_t>(2 * u)] = d.x / kBevXExtent;
      offs[static_cast<size_t>(2 * u + 1)] = d.y / kBevYExtent;
    }
  }
  b.noncentral_offsets = Tensor::from_data({M, N, 2}, std::move(offs));
}

// Assembled query tensors. Content is one tensor shared by both branches, so
// gradients from either branch accumulate into C and g^c.
struct QueryParts {
  Tensor central_pos;     // [M,N,2]
  Tensor noncentral_pos;  // [M,N,2]; undefined in inference mode
  Tensor content;         // [M,N,n]
};

inline QueryParts assemble_parts(const QueryUnitBatch& b, bool training) {
  if (training && !b.has_offsets()) {
    throw ContractError("assemble_parts: training mode requires resample_noncentral first");
  }
  const int64_t M = b.groups, N = b.points_per_group, n = b.embed_dim;
  QueryParts q;
  q.central_pos = add(expand(reshape(b.base_anchors, {1, N, 2}), {M, N, 2}),
                      expand(reshape(b.group_pos, {M, 1, 2}), {M, N, 2}));
  q.content = add(expand(reshape(b.content, {1, N, n}), {M, N, n}),
                  expand(reshape(b.group_content, {M, 1, n}), {M, N, n}));
  if (training) {
    q.noncentral_pos = add(q.central_pos, b.noncentral_offsets);
  }
  return q;
}

struct AssembledQueries {
  Tensor central;     // [M,N,2+n]
  Tensor noncentral;  // [M,N,2+n]
};

inline AssembledQueries assemble_queries(const QueryUnitBatch& b) {
  QueryParts parts = assemble_parts(b, /*training=*/true);
  return {concat_axis(parts.central_pos, parts.content, 2),
          concat_axis(parts.noncentral_pos, parts.content, 2)};
}

}  // namespace ean
