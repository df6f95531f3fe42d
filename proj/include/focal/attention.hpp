#pragma once

#include <vector>

#include "focal/geometry.hpp"
#include "focal/random.hpp"
#include "focal/tensor.hpp"

namespace focal {

inline constexpr double kLayerNormEps = 1e-5;

// Learned sub-window pooling: one weight per window position, one scalar
// bias, shared across channels and spatial positions. Empty when s_w == 1.
struct PoolParams {
  Tensor weight;  // [s_w * s_w]
  Tensor bias;    // [1]
  bool present() const { return !weight.empty(); }
};

// All learnable state and geometry of one focal transformer layer.
struct FocalLayerParams {
  int s_p = 0;
  std::vector<FocalLevel> levels;  // levels[0].s_w == 1 (finest grain)
  int d_model = 0;
  int n_heads = 0;

  std::vector<PoolParams> pool;  // aligned with levels

  Tensor q_weight, q_bias;
  Tensor k_weight, k_bias;
  Tensor v_weight, v_bias;
  Tensor out_weight, out_bias;

  // Finest level: indexed by query/key token offset, extent s_p + s_r - 1
  // per axis so every offset the expanded region can produce is addressable.
  Tensor bias_level1;               // [n_heads, ext, ext]
  std::vector<Tensor> bias_coarse;  // [n_heads, s_r, s_r]; empty at level 0

  Tensor mlp_w1, mlp_b1;  // hidden = 4 * d_model
  Tensor mlp_w2, mlp_b2;
  Tensor ln1_gamma, ln1_beta;
  Tensor ln2_gamma, ln2_beta;

  int head_dim() const { return d_model / n_heads; }
  int level1_bias_extent() const { return s_p + levels.at(0).s_r - 1; }
  void validate() const;
};

// Zero-filled parameter tensors with the right shapes for the geometry.
FocalLayerParams make_focal_layer_shapes(int s_p, std::vector<FocalLevel> levels,
                                         int d_model, int n_heads);

// Standard init: truncated-normal weights, zero biases and bias tables,
// layer-norm gamma 1 / beta 0, mean pooling (1 / s_w^2).
void init_focal_layer(FocalLayerParams& params, TruncNormal& rng);

// Input map pooled at every level; level 0 is the identity.
struct PooledLevels {
  std::vector<Tensor> maps;  // per level: [rows_l, cols_l, d]
  std::vector<Mask> valid;   // per level: rows_l * cols_l flags
};

// One pooled map: out[i,j,c] = sum_{u,v} w[u*s_w+v] * x[i*s_w+u, j*s_w+v, c]
// + b, reading zero outside the map. Identity when s_w == 1.
Tensor subwindow_pool(const Tensor& x, FocalLevel level,
                      const PoolParams& pool);

PooledLevels pool_all_levels(const Tensor& x, const FocalLayerParams& params);

struct ProjectedQKV {
  Tensor q;               // level-0 map only
  std::vector<Tensor> k;  // shared f_k over every level
  std::vector<Tensor> v;  // shared f_v over every level
};

ProjectedQKV project_qkv(const PooledLevels& pooled,
                         const FocalLayerParams& params);

// Per-window gathered keys/values: s rows ordered level-major then row-major
// within the level's region; invalid slots are zero rows with false flags.
struct WindowKV {
  Tensor k;    // [s, d]
  Tensor v;    // [s, d]
  Mask valid;  // s flags
};

WindowKV gather_window_kv(const std::vector<Tensor>& k,
                          const std::vector<Tensor>& v, const GatherPlan& plan,
                          int window);

// Additive logit bias per (head, query slot, key slot). Finest-level entries
// are indexed by the query/key token offset; coarse entries depend only on
// the key's region cell and are identical for every query in the window.
Tensor bias_rows(const FocalLayerParams& params, const GatherPlan& plan,
                 int window);

struct AttentionOutput {
  Tensor y;      // [M, N, d]
  Tensor probs;  // [windows, heads, s_p^2, s]; zero rows for padded queries
  GatherPlan plan;
};

// softmax(Q K^T / sqrt(d_head) + B) V per window and head, heads
// concatenated, then the output projection. Windows are independent and run
// in parallel under the configured thread count.
AttentionOutput focal_attention_forward(const Tensor& x,
                                        const FocalLayerParams& params);

struct FocalAttentionGrads {
  Tensor x;
  Tensor q_weight, q_bias;
  Tensor k_weight, k_bias;
  Tensor v_weight, v_bias;
  Tensor out_weight, out_bias;
  std::vector<Tensor> pool_weight;  // aligned with levels; empty at level 0
  std::vector<Tensor> pool_bias;
  Tensor bias_level1;
  std::vector<Tensor> bias_coarse;
};

// Analytic reverse-mode gradients of focal_attention_forward with respect to
// the input map and every parameter tensor. Single-threaded.
FocalAttentionGrads focal_attention_backward(const Tensor& x,
                                             const FocalLayerParams& params,
                                             const Tensor& upstream);

// Attention mass split by key type, averaged over windows, heads and real
// queries. The three components sum to 1.
struct AttentionBreakdown {
  double inside_window = 0.0;
  double surround_local = 0.0;
  double global_pooled = 0.0;
};

AttentionBreakdown attention_breakdown(const Tensor& probs,
                                       const GatherPlan& plan);

// Pre-norm residual block: x + attn(LN(x)), then + MLP(LN(.)) with GELU and
// hidden width 4 * d_model.
Tensor focal_layer_forward(const Tensor& x, const FocalLayerParams& params,
                           AttentionBreakdown* breakdown = nullptr);

}  // namespace focal
