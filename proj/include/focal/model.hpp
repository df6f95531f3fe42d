#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "focal/attention.hpp"

namespace focal {

// One pyramid stage: `patch` is the spatial reduction entering the stage.
struct StageConfig {
  int depth = 1;
  int dim = 0;
  int patch = 2;
  int n_heads = 1;
  int s_p = 7;
  std::vector<FocalLevel> levels;
};

struct ModelConfig {
  int input_rows = 224;
  int input_cols = 224;
  int in_channels = 3;
  int num_classes = 1000;
  std::vector<StageConfig> stages;

  void validate() const;
};

// Named presets: tiny/small/base (224x224 inputs, window size 7, fine level
// region 13/13/13/7, coarse level {7, 7/5/3/1} across the four stages).
ModelConfig tiny_config();
ModelConfig small_config();
ModelConfig base_config();
ModelConfig preset_config(const std::string& name);

// Non-overlapping patch flattening followed by a linear map; equivalent to a
// stride-p convolution with a p x p kernel.
struct PatchEmbedParams {
  int patch = 1;
  Tensor weight;  // [c_out, patch * patch * c_in]
  Tensor bias;    // [c_out]
};

struct StageParams {
  PatchEmbedParams embed;
  std::vector<FocalLayerParams> layers;
};

struct Model {
  ModelConfig config;
  std::vector<StageParams> stages;
  Tensor final_ln_gamma, final_ln_beta;
  Tensor head_weight, head_bias;
};

Tensor patch_embed(const Tensor& x, const PatchEmbedParams& params);

// Deterministic build: one seeded stream fills tensors in module-path order.
Model build_model(const ModelConfig& config, std::uint64_t seed);

// Spatial extents of every stage map for a given input, by pure arithmetic.
std::vector<std::pair<int, int>> stage_output_sizes(const ModelConfig& config,
                                                    int input_rows,
                                                    int input_cols);

struct LayerStats {
  int stage = 0;
  int layer = 0;
  AttentionBreakdown breakdown;
};

struct ForwardResult {
  std::vector<Tensor> stage_maps;
  Tensor logits;
};

// Runs the backbone and classification head: all stage maps are returned;
// logits = head(LN(spatial mean of the last map)).
ForwardResult forward_features(const Model& model, const Tensor& image,
                               std::vector<LayerStats>* stats = nullptr);

// Visits every parameter tensor in the deterministic module-path order used
// by the serializer and the initializer.
void for_each_tensor(Model& model,
                     const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_tensor(
    const Model& model,
    const std::function<void(const std::string&, const Tensor&)>& fn);

long long count_params(const Model& model);

struct ModelFlops {
  std::vector<long long> stage_macs;  // patch embed + layers, per stage
  long long head_macs = 0;
  long long total = 0;
};

// MAC counts (1 MAC = 1 reported FLOP) over patch embeds, QKV/output
// projections, pooling, attention and MLPs; normalization, softmax and
// elementwise work are not counted.
ModelFlops count_flops(const Model& model, int input_rows, int input_cols);

// New fine-level region sizes per stage; bias tables follow by align-corners
// bilinear interpolation. Resizing to the current size is bit-exact.
Model resize_focal_regions(const Model& model,
                           const std::vector<int>& new_level0_sizes);

}  // namespace focal
