#pragma once

#include <cmath>
#include <string>

#include "ean/optim.hpp"
#include "ean/rng.hpp"
#include "ean/tensor.hpp"

namespace ean {

// Affine map on the last axis: x[..., in] -> x @ W^T + b with W stored
// [out, in]. Weight and bias register under <name>.w / <name>.b.
struct Linear {
  Tensor w;
  Tensor b;
  int64_t in = 0, out = 0;

  Linear() = default;

  Linear(ParamStore& params, const std::string& name, int64_t in_dim, int64_t out_dim,
         RandomStream& rng, bool zero_init = false)
      : in(in_dim), out(out_dim) {
    std::vector<double> wv(static_cast<size_t>(in_dim * out_dim), 0.0);
    std::vector<double> bv(static_cast<size_t>(out_dim), 0.0);
    if (!zero_init) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
      for (double& v : wv) v = rng.uniform(-bound, bound);
      for (double& v : bv) v = rng.uniform(-bound, bound);
    }
    w = params.add(name + ".w", Tensor::from_data({out_dim, in_dim}, std::move(wv)));
    b = params.add(name + ".b", Tensor::from_data({out_dim}, std::move(bv)));
  }

  Tensor operator()(const Tensor& x) const {
    Shape bs = x.shape();
    bs.back() = out;
    return add(matmul(x, transpose_last2(w)), expand(b, bs));
  }
};

// Two-layer perceptron head (hidden = in, activation between).
struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore& params, const std::string& name, int64_t in_dim, int64_t hidden,
      int64_t out_dim, RandomStream& rng, bool zero_init_last = false)
      : fc1(params, name + ".fc1", in_dim, hidden, rng),
        fc2(params, name + ".fc2", hidden, out_dim, rng, zero_init_last) {}

  Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }
};

}  // namespace ean
