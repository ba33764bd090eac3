#pragma once

// Attention-cost accounting. The attention core reports every score product,
// value product and softmax it executes into an OpCounter, bucketed by
// pipeline step; the closed-form complexity model is checked against those
// instrumented tallies with integer equality.
//
// Bucket conventions for the step terms (the "paper buckets" o1/o2/o3):
//   o1: score + value MACs plus softmax elements of ONE local-query branch
//       (the second branch is symmetric and tallied separately),
//   o2: score MACs of the group-token attention only,
//   o3: score + value MACs plus one softmax normalization per query row.
// A full tally that counts everything on both branches is reported alongside.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ean/checkpoint.hpp"
#include "ean/tensor.hpp"

namespace ean {

enum class AttnSite { kStep1Q, kStep1P, kStep2, kStep3, kVanilla };

struct AttnTally {
  int64_t score_macs = 0;
  int64_t value_macs = 0;
  int64_t softmax_rows = 0;
  int64_t softmax_elems = 0;
  int64_t matrix_elems = 0;
};

struct OpCounter {
  int64_t groups = 0, points = 0, dim = 0, heads = 1;
  AttnTally step1_q, step1_p, step2, step3, vanilla;

  AttnTally& site(AttnSite s) {
    switch (s) {
      case AttnSite::kStep1Q: return step1_q;
      case AttnSite::kStep1P: return step1_p;
      case AttnSite::kStep2: return step2;
      case AttnSite::kStep3: return step3;
      default: return vanilla;
    }
  }

  int64_t o1() const { return step1_q.score_macs + step1_q.value_macs + step1_q.softmax_elems; }
  int64_t o2() const { return step2.score_macs; }
  int64_t o3() const { return step3.score_macs + step3.value_macs + step3.softmax_rows; }
  int64_t glsa_total() const { return o1() + o2() + o3(); }
  int64_t vanilla_score_macs() const { return vanilla.score_macs; }

  // Everything, both branches, scores + values + softmax elements.
  int64_t full_total() const {
    int64_t acc = 0;
    for (const AttnTally* t : {&step1_q, &step1_p, &step2, &step3, &vanilla}) {
      acc += t->score_macs + t->value_macs + t->softmax_elems;
    }
    return acc;
  }

  int64_t glsa_matrix_elems() const {
    return step1_q.matrix_elems + step1_p.matrix_elems + step2.matrix_elems +
           step3.matrix_elems;
  }
};

// Optional capture of attention matrices and intermediates; rides the same
// archive format as checkpoints.
struct AttentionTrace {
  struct Entry {
    std::string label;
    Tensor matrix;  // detached
  };
  std::vector<Entry> attention_matrices;
  std::map<std::string, Tensor> tensors;

  void add_matrix(const std::string& label, const Tensor& a) {
    attention_matrices.push_back({label, a.detach()});
  }
  void add_tensor(const std::string& label, const Tensor& t) { tensors[label] = t.detach(); }

  int64_t total_matrix_elems() const {
    int64_t acc = 0;
    for (const Entry& e : attention_matrices) acc += e.matrix.numel();
    return acc;
  }

  void save(const std::filesystem::path& path) const {
    TensorArchive ar;
    int idx = 0;
    for (const Entry& e : attention_matrices) {
      ar.put("attn." + std::to_string(idx++) + "." + e.label, e.matrix);
    }
    for (const auto& [label, t] : tensors) ar.put(label, t);
    ar.save(path);
  }
};

struct AttentionProbe {
  OpCounter* counter = nullptr;
  AttnSite attn_site = AttnSite::kVanilla;
  AttentionTrace* trace = nullptr;
  const char* label = "attn";
};

}  // namespace ean
