#pragma once

// Full detection head: a stack of attention layers over grouped anchor
// queries, each layer refining the anchors against the BEV feature. Per
// layer: self-attention (GL-SA or the vanilla baseline), deformable-style BEV
// sampling, a feed-forward block, then class/point heads with additive anchor
// refinement in inverse-sigmoid space. In training mode the non-central twin
// runs through the same weights; inference never allocates it.

#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ean/errors.hpp"
#include "ean/glsa.hpp"
#include "ean/nn.hpp"
#include "ean/query_units.hpp"

namespace ean {

struct DecoderConfig {
  int64_t layers = 2;
  int64_t embed_dim = 64;  // n
  int64_t heads = 4;
  int64_t sampling_points = 4;  // S
  int64_t num_classes = 3;      // foreground classes; background is index num_classes
  int64_t points_per_element = 10;  // N
  int64_t groups = 25;              // M̂
  int64_t bev_channels = 16;
  double a_meters = 0.5;
  double omega = 0.2;
  bool use_noncentral_branch = true;
  bool use_gt_neighborhood = true;
  bool use_improved_local_queries = true;
  bool use_local_queries = true;
  bool use_group_mean = true;
  bool random_noncentral = false;
  std::string attention = "glsa";  // "glsa" | "vanilla"
  double dropout = 0.0;

  void validate() const {
    if (layers < 1) throw ConfigError("decoder: need at least one layer");
    if (embed_dim % 4 != 0) {
      throw ConfigError("decoder: embed dim must be divisible by 4 for the sine encoding");
    }
    if (embed_dim % heads != 0) throw ConfigError("decoder: heads must divide embed dim");
    if (sampling_points < 1) throw ConfigError("decoder: need at least one sampling point");
    if (groups < 1 || points_per_element < 2) throw ConfigError("decoder: bad group geometry");
    if (num_classes < 1) throw ConfigError("decoder: need at least one class");
    if (attention != "glsa" && attention != "vanilla") {
      throw ConfigError("decoder: unknown attention kind '" + attention + "'");
    }
    if (omega <= 0.0 || omega > 1.0) throw ConfigError("decoder: omega must be in (0,1]");
    if (a_meters <= 0.0) throw ConfigError("decoder: neighborhood side must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("decoder: dropout must be in [0,1)");
  }
};

inline void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = nlohmann::json{{"layers", c.layers},
                     {"embed_dim", c.embed_dim},
                     {"heads", c.heads},
                     {"sampling_points", c.sampling_points},
                     {"num_classes", c.num_classes},
                     {"points_per_element", c.points_per_element},
                     {"groups", c.groups},
                     {"bev_channels", c.bev_channels},
                     {"a_meters", c.a_meters},
                     {"omega", c.omega},
                     {"use_noncentral_branch", c.use_noncentral_branch},
                     {"use_gt_neighborhood", c.use_gt_neighborhood},
                     {"use_improved_local_queries", c.use_improved_local_queries},
                     {"use_local_queries", c.use_local_queries},
                     {"use_group_mean", c.use_group_mean},
                     {"random_noncentral", c.random_noncentral},
                     {"attention", c.attention},
                     {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, DecoderConfig& c) {
  static const std::set<std::string> known = {
      "layers",        "embed_dim",         "heads",
      "sampling_points", "num_classes",     "points_per_element",
      "groups",        "bev_channels",      "a_meters",
      "omega",         "use_noncentral_branch", "use_gt_neighborhood",
      "use_improved_local_queries", "use_local_queries", "use_group_mean",
      "random_noncentral", "attention",     "dropout"};
  for (const auto& [key, v] : j.items()) {
    if (!known.count(key)) throw ConfigError("decoder config: unknown key '" + key + "'");
  }
  DecoderConfig d;
  c.layers = j.value("layers", d.layers);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.heads = j.value("heads", d.heads);
  c.sampling_points = j.value("sampling_points", d.sampling_points);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.points_per_element = j.value("points_per_element", d.points_per_element);
  c.groups = j.value("groups", d.groups);
  c.bev_channels = j.value("bev_channels", d.bev_channels);
  c.a_meters = j.value("a_meters", d.a_meters);
  c.omega = j.value("omega", d.omega);
  c.use_noncentral_branch = j.value("use_noncentral_branch", d.use_noncentral_branch);
  c.use_gt_neighborhood = j.value("use_gt_neighborhood", d.use_gt_neighborhood);
  c.use_improved_local_queries =
      j.value("use_improved_local_queries", d.use_improved_local_queries);
  c.use_local_queries = j.value("use_local_queries", d.use_local_queries);
  c.use_group_mean = j.value("use_group_mean", d.use_group_mean);
  c.random_noncentral = j.value("random_noncentral", d.random_noncentral);
  c.attention = j.value("attention", d.attention);
  c.dropout = j.value("dropout", d.dropout);
}

enum class RunMode { kTrain, kInfer };

struct LayerDetections {
  Tensor class_logits;  // [B,M,K+1]
  Tensor points;        // [B,M,N,2], sigmoid-bounded normalized coords
};

struct DetectionSet {
  std::vector<LayerDetections> central;
  std::vector<LayerDetections> noncentral;  // empty in inference mode
  int64_t batch = 1;
};

struct ParameterBreakdown {
  int64_t total = 0;
  int64_t attention_projection_weights = 0;  // glsa/vanilla projection matrices only
  int64_t attention_biases = 0;
  int64_t local_query_embeddings = 0;
  int64_t query_embeddings = 0;
  int64_t bev_sampler = 0;
  int64_t ffn = 0;
  int64_t heads = 0;
};

class DetectionModel {
 public:
  DetectionModel(const DecoderConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    RandomStream rng(splitmix64(seed ^ 0x6d6f64656cull));
    const int64_t n = cfg_.embed_dim;
    queries_ = init_query_units(cfg_.groups, cfg_.points_per_element, n, cfg_.a_meters, rng);
    register_query_params(params_, queries_);
    layers_.resize(static_cast<size_t>(cfg_.layers));
    for (int64_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "layer" + std::to_string(l);
      Layer& lay = layers_[static_cast<size_t>(l)];
      if (cfg_.attention == "glsa") {
        lay.glsa = GlsaWeights(params_, p + ".glsa", n, cfg_.use_improved_local_queries, rng);
        lay.local = init_local_queries(params_, p + ".glsa.local_queries", cfg_.groups, n,
                                       cfg_.use_improved_local_queries, rng);
      } else {
        lay.vanilla = VanillaWeights(params_, p + ".vanilla", n, rng);
      }
      lay.bev_offsets =
          Linear(params_, p + ".bev.offsets", n, cfg_.sampling_points * 2, rng, true);
      // initial sampling pattern: a spiral of growing radius, so each query
      // also feels the feature map well beyond its own anchor cell
      auto& ob = lay.bev_offsets.b.mutable_values();
      for (int64_t s = 0; s < cfg_.sampling_points; ++s) {
        const double ang = 2.0 * std::numbers::pi * static_cast<double>(s) /
                           static_cast<double>(cfg_.sampling_points);
        const double radius =
            cfg_.sampling_points > 1
                ? 0.02 + 0.14 * static_cast<double>(s) /
                             static_cast<double>(cfg_.sampling_points - 1)
                : 0.02;
        ob[static_cast<size_t>(2 * s)] = radius * std::cos(ang);
        ob[static_cast<size_t>(2 * s + 1)] = radius * std::sin(ang);
      }
      lay.bev_weights = Linear(params_, p + ".bev.weights", n, cfg_.sampling_points, rng);
      lay.bev_proj = Linear(params_, p + ".bev.proj", cfg_.bev_channels, n, rng);
      lay.ffn1 = Linear(params_, p + ".ffn.fc1", n, 4 * n, rng);
      lay.ffn2 = Linear(params_, p + ".ffn.fc2", 4 * n, n, rng);
    }
    cls_head_ = Linear(params_, "head.cls", n, cfg_.num_classes + 1, rng);
    pts_head_ = Mlp(params_, "head.pts", n, n, 2, rng, /*zero_init_last=*/true);
  }

  const DecoderConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  QueryUnitBatch& queries() { return queries_; }

  // Fresh non-central offsets; call once per training iteration.
  void resample_offsets(RandomStream& rng) {
    resample_noncentral(queries_, cfg_.a_meters, rng, cfg_.random_noncentral);
  }

  DetectionSet forward(std::span<const Tensor> bev_grids, RunMode mode,
                       AttentionTrace* trace = nullptr, RandomStream* dropout_rng = nullptr) {
    const int64_t B = static_cast<int64_t>(bev_grids.size());
    if (B < 1) throw ContractError("decoder: empty batch");
    for (const Tensor& g : bev_grids) {
      if (g.ndim() != 3 || g.size(0) != cfg_.bev_channels) {
        throw ConfigError("decoder: BEV grid " + shape_str(g.shape()) +
                          " does not match configured channels");
      }
    }
    const bool train = mode == RunMode::kTrain;
    const bool twin = train && cfg_.use_noncentral_branch;

    QueryParts parts = assemble_parts(queries_, twin);
    auto batched = [B](const Tensor& t) {
      Shape s = t.shape();
      Shape unsq = s;
      unsq.insert(unsq.begin(), 1);
      Shape tgt = s;
      tgt.insert(tgt.begin(), B);
      return expand(reshape(t, unsq), tgt);
    };
    Tensor feat_c = batched(parts.content);
    Tensor anchors_c = batched(parts.central_pos);
    Tensor feat_nc, anchors_nc;
    if (twin) {
      feat_nc = feat_c;  // the identical tensor: content parts are shared
      anchors_nc = batched(parts.noncentral_pos);
    }

    DetectionSet out;
    out.batch = B;
    for (int64_t l = 0; l < cfg_.layers; ++l) {
      Layer& lay = layers_[static_cast<size_t>(l)];
      run_layer(lay, feat_c, anchors_c, bev_grids, trace, dropout_rng);
      out.central.push_back(head_outputs(feat_c, anchors_c));
      if (!all_finite(out.central.back().points) || !all_finite(feat_c)) {
        throw NumericFault("decoder layer " + std::to_string(l) + " produced non-finite values");
      }
      anchors_c = out.central.back().points;
      if (twin) {
        run_layer(lay, feat_nc, anchors_nc, bev_grids, nullptr, dropout_rng);
        out.noncentral.push_back(head_outputs(feat_nc, anchors_nc));
        if (!all_finite(out.noncentral.back().points) || !all_finite(feat_nc)) {
          throw NumericFault("decoder layer " + std::to_string(l) +
                             " produced non-finite values (auxiliary branch)");
        }
        anchors_nc = out.noncentral.back().points;
      }
    }
    return out;
  }

  DetectionSet forward_scene(const Tensor& bev, RunMode mode, AttentionTrace* trace = nullptr) {
    return forward(std::span<const Tensor>(&bev, 1), mode, trace);
  }

  ParameterBreakdown count_parameters() const {
    ParameterBreakdown b;
    for (const auto& [name, t] : params_.all()) {
      const int64_t k = t.numel();
      b.total += k;
      const bool is_attn = name.find(".glsa.") != std::string::npos ||
                           name.find(".vanilla.") != std::string::npos;
      if (name.find("local_queries") != std::string::npos) {
        b.local_query_embeddings += k;
      } else if (is_attn && name.ends_with(".w")) {
        b.attention_projection_weights += k;
      } else if (is_attn && name.ends_with(".b")) {
        b.attention_biases += k;
      } else if (name.rfind("query.", 0) == 0) {
        b.query_embeddings += k;
      } else if (name.find(".bev.") != std::string::npos) {
        b.bev_sampler += k;
      } else if (name.find(".ffn.") != std::string::npos) {
        b.ffn += k;
      } else if (name.rfind("head.", 0) == 0) {
        b.heads += k;
      }
    }
    return b;
  }

  void save_checkpoint(TensorArchive& ar) const {
    for (const auto& [name, t] : params_.all()) ar.put(name, t);
  }

  void load_checkpoint(const TensorArchive& ar) {
    for (const auto& [name, t] : params_.all()) {
      Tensor stored = ar.get(name);
      if (stored.shape() != t.shape()) {
        throw ConfigError("checkpoint tensor '" + name + "' has shape " +
                          shape_str(stored.shape()) + ", model expects " + shape_str(t.shape()));
      }
      Tensor handle = t;  // shares the parameter buffer
      handle.mutable_values() = stored.values();
    }
  }

  // Test hook: freezes anchor refinement so every layer reports its input
  // anchors unchanged.
  void set_refinement_enabled(bool v) { refine_ = v; }

 private:
  struct Layer {
    GlsaWeights glsa;
    LocalQueries local;
    VanillaWeights vanilla;
    Linear bev_offsets, bev_weights, bev_proj;
    Linear ffn1, ffn2;
  };

  void run_layer(Layer& lay, Tensor& feat, const Tensor& anchors,
                 std::span<const Tensor> bev_grids, AttentionTrace* trace,
                 RandomStream* dropout_rng) {
    const int64_t B = feat.size(0), M = feat.size(1), N = feat.size(2), n = feat.size(3);
    const int64_t S = cfg_.sampling_points, C = cfg_.bev_channels;

    // (1) self-attention over queries
    if (cfg_.attention == "glsa") {
      GlsaOptions opt;
      opt.heads = cfg_.heads;
      opt.use_local_queries = cfg_.use_local_queries;
      opt.use_group_mean = cfg_.use_group_mean;
      opt.dropout = cfg_.dropout;
      opt.dropout_rng = dropout_rng;
      feat = glsa_forward(feat, anchors, lay.local, lay.glsa, opt, trace);
    } else {
      Tensor tokens = add(feat, sine_pe(anchors, n));
      Tensor flat = reshape(tokens, {B, M * N, n});
      Tensor van = vanilla_self_attention(flat, lay.vanilla, cfg_.heads, trace);
      // keep the residual on the content stream only
      Tensor delta = reshape(sub(van, flat), {B, M, N, n});
      feat = layer_norm_lastdim(add(feat, delta));
    }

    // (2) BEV cross-attention: learned sampling offsets around each anchor
    Tensor offsets = reshape(lay.bev_offsets(feat), {B, M, N, S, 2});
    Tensor sample_pts =
        add(expand(reshape(anchors, {B, M, N, 1, 2}), {B, M, N, S, 2}), offsets);
    std::vector<Tensor> per_scene = split_axis(sample_pts, 0, B);
    std::vector<Tensor> sampled_parts;
    sampled_parts.reserve(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
      Tensor pts = reshape(per_scene[static_cast<size_t>(b)], {M * N * S, 2});
      Tensor sampled = bilinear_sample(bev_grids[static_cast<size_t>(b)], pts);
      sampled_parts.push_back(reshape(sampled, {1, M, N, S, C}));
    }
    Tensor sampled = B == 1 ? sampled_parts[0] : concat_axis(sampled_parts, 0);
    Tensor wts = softmax_lastdim(lay.bev_weights(feat));  // [B,M,N,S]
    Tensor pooled = sum_axis(
        mul(sampled, expand(reshape(wts, {B, M, N, S, 1}), {B, M, N, S, C})), 3);
    feat = layer_norm_lastdim(add(feat, lay.bev_proj(pooled)));

    // (3) feed-forward
    feat = layer_norm_lastdim(add(feat, lay.ffn2(gelu(lay.ffn1(feat)))));
  }

  LayerDetections head_outputs(const Tensor& feat, const Tensor& anchors) {
    LayerDetections det;
    det.class_logits = cls_head_(mean_axis(feat, 2));
    if (refine_) {
      Tensor delta = pts_head_(feat);
      det.points = sigmoid(add(inverse_sigmoid(anchors), delta));
    } else {
      det.points = anchors;
    }
    return det;
  }

  DecoderConfig cfg_;
  ParamStore params_;
  QueryUnitBatch queries_;
  std::vector<Layer> layers_;
  Linear cls_head_;
  Mlp pts_head_;
  bool refine_ = true;
};

}  // namespace ean
