#include "focal/model.hpp"

#include <cmath>
#include <stdexcept>

namespace focal {

void ModelConfig::validate() const {
  if (input_rows < 1 || input_cols < 1 || in_channels < 1 || num_classes < 1) {
    throw std::invalid_argument("model config: extents must be >= 1");
  }
  if (stages.empty()) throw std::invalid_argument("model config: no stages");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageConfig& s = stages[i];
    const std::string where = "stage " + std::to_string(i);
    if (s.depth < 0) throw std::invalid_argument(where + ": negative depth");
    if (s.dim < 1) throw std::invalid_argument(where + ": dim must be >= 1");
    if (s.patch < 1) throw std::invalid_argument(where + ": patch must be >= 1");
    if (s.n_heads < 1 || s.dim % s.n_heads != 0) {
      throw std::invalid_argument(where + ": dim must divide by n_heads");
    }
    if (s.s_p < 1) throw std::invalid_argument(where + ": s_p must be >= 1");
    if (s.levels.empty() || s.levels[0].s_w != 1) {
      throw std::invalid_argument(where + ": levels[0].s_w must be 1");
    }
    for (const FocalLevel& l : s.levels) {
      if (l.s_w < 1 || l.s_r < 1) {
        throw std::invalid_argument(where + ": level sizes must be >= 1");
      }
    }
  }
}

namespace {

ModelConfig preset(int base_dim, std::vector<int> depths) {
  // Fine level s_r: 13 everywhere except the 7x7 last stage; coarse level
  // pools whole windows (s_w = 7) with region sizes 7/5/3/1.
  const int fine_r[4] = {13, 13, 13, 7};
  const int coarse_r[4] = {7, 5, 3, 1};
  ModelConfig cfg;
  cfg.stages.resize(4);
  for (int i = 0; i < 4; ++i) {
    StageConfig& s = cfg.stages[i];
    s.depth = depths[i];
    s.dim = base_dim << i;
    s.patch = i == 0 ? 4 : 2;
    s.n_heads = s.dim / 32;
    s.s_p = 7;
    s.levels = {{1, fine_r[i]}, {7, coarse_r[i]}};
  }
  return cfg;
}

}  // namespace

ModelConfig tiny_config() { return preset(96, {2, 2, 6, 2}); }
ModelConfig small_config() { return preset(96, {2, 2, 18, 2}); }
ModelConfig base_config() { return preset(128, {2, 2, 18, 2}); }

ModelConfig preset_config(const std::string& name) {
  if (name == "tiny") return tiny_config();
  if (name == "small") return small_config();
  if (name == "base") return base_config();
  throw std::invalid_argument("unknown preset '" + name +
                              "' (expected tiny, small or base)");
}

Tensor patch_embed(const Tensor& x, const PatchEmbedParams& params) {
  if (x.rank() != 3) {
    throw std::invalid_argument("patch_embed: expected rank-3 input, got " +
                                x.shape_str());
  }
  const int p = params.patch;
  const int h = static_cast<int>(x.extent(0));
  const int w = static_cast<int>(x.extent(1));
  const int c_in = static_cast<int>(x.extent(2));
  if (params.weight.rank() != 2 ||
      static_cast<int>(params.weight.extent(1)) != p * p * c_in) {
    throw std::invalid_argument("patch_embed: weight " +
                                params.weight.shape_str() +
                                " does not match patch " + std::to_string(p) +
                                " over " + x.shape_str());
  }
  const int oh = ceil_div(h, p);
  const int ow = ceil_div(w, p);

  Tensor patches({static_cast<std::size_t>(oh) * ow,
                  static_cast<std::size_t>(p) * p * c_in});
  for (int i = 0; i < oh; ++i) {
    for (int j = 0; j < ow; ++j) {
      double* row = patches.data() +
                    (static_cast<std::size_t>(i) * ow + j) * (p * p * c_in);
      for (int u = 0; u < p; ++u) {
        for (int v = 0; v < p; ++v) {
          for (int c = 0; c < c_in; ++c) {
            const int rr = i * p + u;
            const int cc = j * p + v;
            row[(static_cast<std::size_t>(u) * p + v) * c_in + c] =
                (rr < h && cc < w) ? x(rr, cc, c) : 0.0;
          }
        }
      }
    }
  }
  Tensor flat = linear(patches, params.weight, &params.bias);
  const std::size_t c_out = params.weight.extent(0);
  return Tensor({static_cast<std::size_t>(oh), static_cast<std::size_t>(ow),
                 c_out},
                std::vector<double>(flat.data(), flat.data() + flat.size()));
}

Model build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  TruncNormal rng(seed);

  int c_prev = config.in_channels;
  for (const StageConfig& sc : config.stages) {
    StageParams sp;
    sp.embed.patch = sc.patch;
    sp.embed.weight =
        Tensor({static_cast<std::size_t>(sc.dim),
                static_cast<std::size_t>(sc.patch) * sc.patch * c_prev});
    sp.embed.bias = Tensor({static_cast<std::size_t>(sc.dim)});
    rng.fill(sp.embed.weight);
    for (int layer = 0; layer < sc.depth; ++layer) {
      FocalLayerParams lp =
          make_focal_layer_shapes(sc.s_p, sc.levels, sc.dim, sc.n_heads);
      init_focal_layer(lp, rng);
      sp.layers.push_back(std::move(lp));
    }
    m.stages.push_back(std::move(sp));
    c_prev = sc.dim;
  }
  const std::size_t d_last = static_cast<std::size_t>(c_prev);
  m.final_ln_gamma = Tensor::full({d_last}, 1.0);
  m.final_ln_beta = Tensor({d_last});
  m.head_weight =
      Tensor({static_cast<std::size_t>(config.num_classes), d_last});
  m.head_bias = Tensor({static_cast<std::size_t>(config.num_classes)});
  rng.fill(m.head_weight);
  return m;
}

std::vector<std::pair<int, int>> stage_output_sizes(const ModelConfig& config,
                                                    int input_rows,
                                                    int input_cols) {
  config.validate();
  std::vector<std::pair<int, int>> out;
  int r = input_rows, c = input_cols;
  for (const StageConfig& s : config.stages) {
    r = ceil_div(r, s.patch);
    c = ceil_div(c, s.patch);
    out.emplace_back(r, c);
  }
  return out;
}

ForwardResult forward_features(const Model& model, const Tensor& image,
                               std::vector<LayerStats>* stats) {
  model.config.validate();
  if (image.rank() != 3 ||
      static_cast<int>(image.extent(2)) != model.config.in_channels) {
    throw std::invalid_argument("forward_features: expected [H, W, " +
                                std::to_string(model.config.in_channels) +
                                "] image, got " + image.shape_str());
  }
  ForwardResult result;
  Tensor x = image;
  for (std::size_t si = 0; si < model.stages.size(); ++si) {
    x = patch_embed(x, model.stages[si].embed);
    for (std::size_t li = 0; li < model.stages[si].layers.size(); ++li) {
      if (stats) {
        AttentionBreakdown bd;
        x = focal_layer_forward(x, model.stages[si].layers[li], &bd);
        stats->push_back({static_cast<int>(si), static_cast<int>(li), bd});
      } else {
        x = focal_layer_forward(x, model.stages[si].layers[li]);
      }
    }
    result.stage_maps.push_back(x);
  }

  // Classification head: spatial mean, then LN, then the classifier.
  const Tensor& last = result.stage_maps.back();
  const std::size_t cells = last.extent(0) * last.extent(1);
  const std::size_t d = last.extent(2);
  Tensor mean({d});
  for (std::size_t cell = 0; cell < cells; ++cell) {
    const double* row = last.data() + cell * d;
    for (std::size_t c = 0; c < d; ++c) mean[c] += row[c];
  }
  for (std::size_t c = 0; c < d; ++c) mean[c] /= static_cast<double>(cells);
  const Tensor normed =
      layer_norm(mean, model.final_ln_gamma, model.final_ln_beta, kLayerNormEps);
  result.logits = linear(normed, model.head_weight, &model.head_bias);
  return result;
}

namespace {

template <typename ModelT, typename Fn>
void walk_tensors(ModelT& model, const Fn& fn) {
  for (std::size_t si = 0; si < model.stages.size(); ++si) {
    const std::string sp = "stage" + std::to_string(si);
    auto& stage = model.stages[si];
    fn(sp + ".embed.weight", stage.embed.weight);
    fn(sp + ".embed.bias", stage.embed.bias);
    for (std::size_t li = 0; li < stage.layers.size(); ++li) {
      const std::string lp = sp + ".layer" + std::to_string(li);
      auto& layer = stage.layers[li];
      fn(lp + ".ln1.gamma", layer.ln1_gamma);
      fn(lp + ".ln1.beta", layer.ln1_beta);
      fn(lp + ".q.weight", layer.q_weight);
      fn(lp + ".q.bias", layer.q_bias);
      fn(lp + ".k.weight", layer.k_weight);
      fn(lp + ".k.bias", layer.k_bias);
      fn(lp + ".v.weight", layer.v_weight);
      fn(lp + ".v.bias", layer.v_bias);
      fn(lp + ".out.weight", layer.out_weight);
      fn(lp + ".out.bias", layer.out_bias);
      for (std::size_t lv = 0; lv < layer.levels.size(); ++lv) {
        if (layer.pool[lv].present()) {
          const std::string pp = lp + ".pool" + std::to_string(lv);
          fn(pp + ".weight", layer.pool[lv].weight);
          fn(pp + ".bias", layer.pool[lv].bias);
        }
      }
      fn(lp + ".bias.level0", layer.bias_level1);
      for (std::size_t lv = 1; lv < layer.levels.size(); ++lv) {
        fn(lp + ".bias.coarse" + std::to_string(lv), layer.bias_coarse[lv]);
      }
      fn(lp + ".ln2.gamma", layer.ln2_gamma);
      fn(lp + ".ln2.beta", layer.ln2_beta);
      fn(lp + ".mlp.w1", layer.mlp_w1);
      fn(lp + ".mlp.b1", layer.mlp_b1);
      fn(lp + ".mlp.w2", layer.mlp_w2);
      fn(lp + ".mlp.b2", layer.mlp_b2);
    }
  }
  fn("final_norm.gamma", model.final_ln_gamma);
  fn("final_norm.beta", model.final_ln_beta);
  fn("head.weight", model.head_weight);
  fn("head.bias", model.head_bias);
}

}  // namespace

void for_each_tensor(
    Model& model,
    const std::function<void(const std::string&, Tensor&)>& fn) {
  walk_tensors(model, fn);
}

void for_each_tensor(
    const Model& model,
    const std::function<void(const std::string&, const Tensor&)>& fn) {
  walk_tensors(model, fn);
}

long long count_params(const Model& model) {
  long long total = 0;
  for_each_tensor(model, [&](const std::string&, const Tensor& t) {
    total += static_cast<long long>(t.size());
  });
  return total;
}

ModelFlops count_flops(const Model& model, int input_rows, int input_cols) {
  model.config.validate();
  ModelFlops flops;
  int r = input_rows, c = input_cols;
  int c_prev = model.config.in_channels;
  for (const StageConfig& s : model.config.stages) {
    r = ceil_div(r, s.patch);
    c = ceil_div(c, s.patch);
    const long long tokens = static_cast<long long>(r) * c;
    const long long d = s.dim;
    long long macs = tokens * d * (static_cast<long long>(s.patch) * s.patch *
                                   c_prev);  // patch embedding

    // Pooled-grid token counts feed the shared K/V projections per level.
    long long kv_tokens = 0;
    for (const FocalLevel& l : s.levels) {
      kv_tokens += static_cast<long long>(pooled_extent(r, l.s_w)) *
                   pooled_extent(c, l.s_w);
    }
    const AttentionCost cost = attention_cost(r, c, s.dim, s.s_p, s.levels);
    const long long per_layer = cost.pool_macs +
                                tokens * d * d        // f_q
                                + 2 * kv_tokens * d * d  // f_k, f_v
                                + cost.attn_macs + tokens * d * d  // output proj
                                + 8 * tokens * d * d;              // MLP
    macs += static_cast<long long>(s.depth) * per_layer;
    flops.stage_macs.push_back(macs);
    flops.total += macs;
    c_prev = s.dim;
  }
  flops.head_macs = static_cast<long long>(c_prev) * model.config.num_classes;
  flops.total += flops.head_macs;
  return flops;
}

Model resize_focal_regions(const Model& model,
                           const std::vector<int>& new_level0_sizes) {
  if (new_level0_sizes.size() != model.stages.size()) {
    throw std::invalid_argument(
        "resize_focal_regions: need one size per stage");
  }
  Model out = model;
  for (std::size_t si = 0; si < out.stages.size(); ++si) {
    const int new_r = new_level0_sizes[si];
    if (new_r < 1) {
      throw std::invalid_argument("resize_focal_regions: sizes must be >= 1");
    }
    out.config.stages[si].levels[0].s_r = new_r;
    for (FocalLayerParams& layer : out.stages[si].layers) {
      layer.levels[0].s_r = new_r;
      const std::size_t heads = layer.bias_level1.extent(0);
      const std::size_t ext =
          static_cast<std::size_t>(layer.s_p + new_r - 1);
      Tensor resized({heads, ext, ext});
      const Tensor& src = layer.bias_level1;
      for (std::size_t h = 0; h < heads; ++h) {
        Tensor head_table({src.extent(1), src.extent(2)});
        for (std::size_t i = 0; i < src.extent(1); ++i) {
          for (std::size_t j = 0; j < src.extent(2); ++j) {
            head_table(i, j) = src(h, i, j);
          }
        }
        const Tensor new_table = bilinear_resize(head_table, ext, ext);
        for (std::size_t i = 0; i < ext; ++i) {
          for (std::size_t j = 0; j < ext; ++j) {
            resized(h, i, j) = new_table(i, j);
          }
        }
      }
      layer.bias_level1 = std::move(resized);

      // Coarse-level geometry is unchanged; the identity resize keeps the
      // tables bit-exact.
      for (std::size_t lv = 1; lv < layer.levels.size(); ++lv) {
        const std::size_t s_r = static_cast<std::size_t>(layer.levels[lv].s_r);
        Tensor& table = layer.bias_coarse[lv];
        Tensor next({heads, s_r, s_r});
        for (std::size_t h = 0; h < heads; ++h) {
          Tensor head_table({table.extent(1), table.extent(2)});
          for (std::size_t i = 0; i < table.extent(1); ++i) {
            for (std::size_t j = 0; j < table.extent(2); ++j) {
              head_table(i, j) = table(h, i, j);
            }
          }
          const Tensor new_table = bilinear_resize(head_table, s_r, s_r);
          for (std::size_t i = 0; i < s_r; ++i) {
            for (std::size_t j = 0; j < s_r; ++j) {
              next(h, i, j) = new_table(i, j);
            }
          }
        }
        table = std::move(next);
      }
      layer.validate();
    }
  }
  return out;
}

}  // namespace focal
