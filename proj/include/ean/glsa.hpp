#pragma once

// Grouped Local Self-Attention. Queries attend only within their group; a
// learnable per-group local query pools each group (step 1), the pooled
// tokens interact through ordinary self-attention (step 2), and the result is
// re-broadcast into every group as an extra key/value token (step 3). Cost is
// linear in the group count where all-pairs attention is quadratic in the
// total query count.

#include <cmath>
#include <string>
#include <vector>

#include "ean/errors.hpp"
#include "ean/nn.hpp"
#include "ean/profiler.hpp"
#include "ean/rng.hpp"
#include "ean/tensor.hpp"

namespace ean {

// Per-group learnable pooling tokens. The improved form doubles the width and
// splits into two halves (L_q, L_p) that pool the same group independently;
// the plain form is a single n-wide token.
struct LocalQueries {
  Tensor L;  // [M, 2n] improved, [M, n] plain
  bool improved = true;
  int64_t groups = 0;
  int64_t dim = 0;  // n
};

inline LocalQueries init_local_queries(ParamStore& params, const std::string& name,
                                       int64_t groups, int64_t n, bool improved,
                                       RandomStream& rng) {
  LocalQueries lq;
  lq.improved = improved;
  lq.groups = groups;
  lq.dim = n;
  lq.L = params.add(name, Tensor::randn({groups, improved ? 2 * n : n}, rng, 0.02));
  return lq;
}

struct VanillaWeights {
  Linear q, k, v, out;

  VanillaWeights() = default;
  VanillaWeights(ParamStore& params, const std::string& prefix, int64_t n, RandomStream& rng)
      : q(params, prefix + ".q", n, n, rng),
        k(params, prefix + ".k", n, n, rng),
        v(params, prefix + ".v", n, n, rng),
        out(params, prefix + ".out", n, n, rng) {}
};

struct GlsaWeights {
  // step 1: key/value over group entries, one query projection per local half
  Linear k1, v1, lq, lp;
  // step 2: ordinary self-attention over the pooled group tokens
  VanillaWeights van;
  // step 3: within-group attention plus the re-broadcast token's projections
  Linear q2, k2, v2, kl, vl;
  Linear out;  // output projection before the residual
  bool improved = true;

  GlsaWeights() = default;
  GlsaWeights(ParamStore& params, const std::string& prefix, int64_t n, bool improved_lq,
              RandomStream& rng)
      : k1(params, prefix + ".k1", n, n, rng),
        v1(params, prefix + ".v1", n, n, rng),
        lq(params, prefix + ".lq", n, n, rng),
        van(params, prefix + ".van", n, rng),
        q2(params, prefix + ".q2", n, n, rng),
        k2(params, prefix + ".k2", n, n, rng),
        v2(params, prefix + ".v2", n, n, rng),
        kl(params, prefix + ".kl", n, n, rng),
        vl(params, prefix + ".vl", n, n, rng),
        out(params, prefix + ".out", n, n, rng),
        improved(improved_lq) {
    if (improved_lq) lp = Linear(params, prefix + ".lp", n, n, rng);
  }
};

struct GlsaOptions {
  int64_t heads = 4;
  bool use_local_queries = true;   // step-1 pooling tokens
  bool use_group_mean = true;      // q_m term feeding step 2
  bool zero_step2 = false;         // test hook: silence cross-group flow
  double dropout = 0.0;
  RandomStream* dropout_rng = nullptr;
};

namespace detail_attn {

// Scaled dot-product attention over rank-4 inputs:
// q [B,G,Tq,n], k/v [B,G,Tk,n] -> [B,G,Tq,n]. Reports exact counts of its
// score/value products and softmax work into the probe.
inline Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                  int64_t heads, const AttentionProbe& probe) {
  const int64_t n = q.shape().back();
  if (n % heads != 0) {
    throw ConfigError("attention: heads " + std::to_string(heads) + " do not divide dim " +
                      std::to_string(n));
  }
  const int64_t B = q.size(0), G = q.size(1), Tq = q.size(2), Tk = k.size(2);
  const int64_t dh = n / heads;
  auto heads_first = [&](const Tensor& t, int64_t T) {
    return transpose(reshape(t, {B, G, T, heads, dh}), 2, 3);  // [B,G,h,T,dh]
  };
  Tensor qh = heads_first(q, Tq);
  Tensor kh = heads_first(k, Tk);
  Tensor vh = heads_first(v, Tk);
  Tensor scores = scalar_mul(matmul(qh, transpose_last2(kh)),
                             1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = softmax_lastdim(scores);
  if (probe.counter) {
    AttnTally& t = probe.counter->site(probe.attn_site);
    t.score_macs += B * G * heads * Tq * Tk * dh;
    t.value_macs += B * G * heads * Tq * Tk * dh;
    t.softmax_rows += B * G * heads * Tq;
    t.softmax_elems += B * G * heads * Tq * Tk;
    t.matrix_elems += B * G * heads * Tq * Tk;
  }
  if (probe.trace) probe.trace->add_matrix(probe.label, attn);
  Tensor out = matmul(attn, vh);  // [B,G,h,Tq,dh]
  return reshape(transpose(out, 2, 3), {B, G, Tq, n});
}

inline Tensor as_rank4(const Tensor& t, bool& was_rank3) {
  was_rank3 = t.ndim() == 3;
  if (was_rank3) {
    Shape s = t.shape();
    return reshape(t, {1, s[0], s[1], s[2]});
  }
  if (t.ndim() != 4) throw DimError("glsa: expected rank 3 or 4, got " + shape_str(t.shape()));
  return t;
}

}  // namespace detail_attn

// Ordinary all-pairs self-attention with q/k/v/out projections and a residual
// connection. x: [T,n], [B,T,n]; position information must already be baked
// into the tokens.
inline Tensor vanilla_self_attention(const Tensor& x, const VanillaWeights& w, int64_t heads,
                                     AttentionTrace* trace = nullptr,
                                     OpCounter* counter = nullptr,
                                     AttnSite site = AttnSite::kVanilla) {
  const bool rank2 = x.ndim() == 2;
  Tensor x3 = rank2 ? reshape(x, {1, x.size(0), x.size(1)}) : x;
  if (x3.ndim() != 3) throw DimError("vanilla_self_attention: expected [T,n] or [B,T,n]");
  const int64_t B = x3.size(0), T = x3.size(1), n = x3.size(2);
  Tensor x4 = reshape(x3, {B, 1, T, n});
  AttentionProbe probe{counter, site, trace, site == AttnSite::kStep2 ? "step2" : "vanilla"};
  Tensor attn =
      detail_attn::multihead_attention(w.q(x4), w.k(x4), w.v(x4), heads, probe);
  Tensor out = add(x3, w.out(reshape(attn, {B, T, n})));
  return rank2 ? reshape(out, {T, n}) : out;
}

// content: [M,N,n] or [B,M,N,n]; positions: matching [.,M,N,2] in normalized
// coordinates. Returns layer_norm(content + out_proj(attention output)).
inline Tensor glsa_forward(const Tensor& content, const Tensor& positions,
                           const LocalQueries& local, const GlsaWeights& w,
                           const GlsaOptions& opt, AttentionTrace* trace = nullptr,
                           OpCounter* counter = nullptr) {
  bool rank3 = false, rank3_pos = false;
  Tensor c = detail_attn::as_rank4(content, rank3);
  Tensor pos = detail_attn::as_rank4(positions, rank3_pos);
  const int64_t B = c.size(0), M = c.size(1), N = c.size(2), n = c.size(3);
  if (pos.size(0) != B || pos.size(1) != M || pos.size(2) != N || pos.size(3) != 2) {
    throw DimError("glsa: positions " + shape_str(positions.shape()) + " do not match content " +
                   shape_str(content.shape()));
  }
  if (local.groups != M || local.dim != n) {
    throw DimError("glsa: local queries shaped for other dimensions");
  }
  if (w.improved != local.improved) {
    throw ConfigError("glsa: weights and local queries disagree on the improved layout");
  }

  Tensor qk = add(c, sine_pe(pos, n));  // queries and keys carry position
  Tensor value_src = c;

  // step 1: local feature extraction - each group pooled by its local query
  Tensor psi;  // [B,M,n]
  const bool run_interaction = opt.use_local_queries || opt.use_group_mean;
  if (opt.use_local_queries) {
    Tensor k1 = w.k1(qk);
    Tensor v1 = w.v1(value_src);
    auto pooled = [&](const Tensor& half, const Linear& proj, AttnSite site,
                      const char* label) {
      Tensor lq4 = expand(reshape(proj(half), {1, M, 1, n}), {B, M, 1, n});
      AttentionProbe probe{counter, site, trace, label};
      Tensor a = detail_attn::multihead_attention(lq4, k1, v1, opt.heads, probe);
      return reshape(a, {B, M, n});
    };
    if (local.improved) {
      auto halves = split_axis(local.L, 1, 2);
      Tensor psi_q = pooled(halves[0], w.lq, AttnSite::kStep1Q, "step1.q");
      Tensor psi_p = pooled(halves[1], w.lp, AttnSite::kStep1P, "step1.p");
      psi = scalar_mul(add(psi_q, psi_p), 0.5);
      if (trace) {
        trace->add_tensor("psi_q", psi_q);
        trace->add_tensor("psi_p", psi_p);
      }
    } else {
      psi = pooled(local.L, w.lq, AttnSite::kStep1Q, "step1.q");
      if (trace) trace->add_tensor("psi_q", psi);
    }
  }

  // step 2: feature interaction among groups over the pooled tokens
  Tensor psi2_prime;  // [B,M,n]
  if (run_interaction) {
    Tensor psi2;
    if (opt.use_group_mean) {
      Tensor q_m = mean_axis(qk, 2);  // [B,M,n]
      if (trace) trace->add_tensor("q_m", q_m);
      psi2 = opt.use_local_queries ? add(psi, q_m) : q_m;
    } else {
      psi2 = psi;
    }
    if (trace) trace->add_tensor("psi2", psi2);
    psi2_prime = vanilla_self_attention(psi2, w.van, opt.heads, trace, counter, AttnSite::kStep2);
    if (opt.zero_step2) psi2_prime = scalar_mul(psi2_prime, 0.0);
    if (trace) trace->add_tensor("psi2_prime", psi2_prime);
  }

  // step 3: feature interaction within groups; the interaction token joins
  // each group's keys/values
  Tensor q2 = w.q2(qk);
  Tensor k2 = w.k2(qk);
  Tensor v2 = w.v2(value_src);
  Tensor k_cat = k2, v_cat = v2;
  if (run_interaction) {
    Tensor kl = reshape(w.kl(psi2_prime), {B, M, 1, n});
    Tensor vl = reshape(w.vl(psi2_prime), {B, M, 1, n});
    k_cat = concat_axis(kl, k2, 2);  // [B,M,N+1,n]
    v_cat = concat_axis(vl, v2, 2);
  }
  AttentionProbe probe3{counter, AttnSite::kStep3, trace, "step3"};
  Tensor qhat = detail_attn::multihead_attention(q2, k_cat, v_cat, opt.heads, probe3);
  if (trace) trace->add_tensor("q_hat", qhat);
  if (opt.dropout > 0.0 && opt.dropout_rng) {
    qhat = dropout(qhat, opt.dropout, *opt.dropout_rng);
  }

  Tensor out = layer_norm_lastdim(add(c, w.out(qhat)));
  if (rank3) out = reshape(out, {M, N, n});
  return out;
}

struct DualGlsaOutput {
  Tensor central;
  Tensor noncentral;
};

// Runs both branches through the same weights and local queries. The branches
// never attend to each other; the non-central branch is a training-only
// replica whose gradients flow into the shared parameters.
inline DualGlsaOutput glsa_forward_dual(const Tensor& content_central,
                                        const Tensor& pos_central,
                                        const Tensor& content_noncentral,
                                        const Tensor& pos_noncentral, const LocalQueries& local,
                                        const GlsaWeights& w, const GlsaOptions& opt) {
  if (content_central.shape() != content_noncentral.shape() ||
      pos_central.shape() != pos_noncentral.shape()) {
    throw DimError("glsa_forward_dual: branch shapes differ, " +
                   shape_str(content_central.shape()) + " vs " +
                   shape_str(content_noncentral.shape()));
  }
  return {glsa_forward(content_central, pos_central, local, w, opt),
          glsa_forward(content_noncentral, pos_noncentral, local, w, opt)};
}

}  // namespace ean
