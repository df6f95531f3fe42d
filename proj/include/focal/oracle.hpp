#pragma once

#include <cstdint>

#include "focal/model.hpp"

namespace focal {
namespace oracle {

// Tallies one count per multiply inside a dot-product accumulation.
struct MacCounter {
  long long macs = 0;
};

// Reference focal attention: explicit per-window, per-query, per-key scalar
// loops with the region arithmetic rederived inline; no gather plan, no
// batching. Shares the tensor kernels (linear, masked_softmax) so any
// disagreement with the fast path points at indexing or gathering.
Tensor naive_focal_forward(const Tensor& x, const FocalLayerParams& params,
                           MacCounter* counter = nullptr);

// Plain multi-head attention over a flat token list with the same projection
// weights, per-head scaling and output projection, zero bias.
Tensor full_attention_reference(const Tensor& tokens,
                                const FocalLayerParams& params);

// Whole-model reference forward with a MAC count of every projection,
// pooling, attention and MLP multiply. Only meant for toy configurations.
Tensor naive_model_forward(const Model& model, const Tensor& image,
                           MacCounter* counter = nullptr);

// Randomized layer instances for equivalence and gradient checking: maps up
// to 16 x 16 x 8, window size 2 or 4, up to three levels.
struct LayerCase {
  Tensor x;
  FocalLayerParams params;
};

LayerCase random_layer_case(std::uint64_t seed);
LayerCase random_small_case(std::uint64_t seed);  // gradcheck-sized

// Max |fast - naive| over the output map for one randomized case.
double equivalence_max_delta(std::uint64_t seed);

// Max scale-guarded relative error between analytic gradients and central
// finite differences (h = 1e-5) for one randomized small case.
double gradcheck_max_rel_error(std::uint64_t seed);

}  // namespace oracle
}  // namespace focal
