#include "focal/oracle.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace focal {
namespace oracle {

namespace {

// Local integer helpers so the reference rederives its geometry without the
// geometry module.
int floordiv(int a, int b) {
  int q = a / b;
  if (a % b != 0 && ((a < 0) != (b < 0))) --q;
  return q;
}

int ceildiv(int a, int b) { return (a + b - 1) / b; }  // a >= 0, b > 0

Tensor counted_linear(const Tensor& x, const Tensor& w, const Tensor* b,
                      MacCounter* counter) {
  if (counter) {
    const long long rows =
        static_cast<long long>(x.size() / w.extent(1));
    counter->macs += rows * static_cast<long long>(w.extent(0)) *
                     static_cast<long long>(w.extent(1));
  }
  return linear(x, w, b);
}

}  // namespace

Tensor naive_focal_forward(const Tensor& x, const FocalLayerParams& params,
                           MacCounter* counter) {
  params.validate();
  if (x.rank() != 3 || static_cast<int>(x.extent(2)) != params.d_model) {
    throw std::invalid_argument("naive_focal_forward: bad input map " +
                                x.shape_str());
  }
  const int m = static_cast<int>(x.extent(0));
  const int n = static_cast<int>(x.extent(1));
  const int d = params.d_model;
  const int heads = params.n_heads;
  const int dh = d / heads;
  const int s_p = params.s_p;
  const int levels = static_cast<int>(params.levels.size());
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Pool every level with plain nested loops.
  std::vector<Tensor> pooled;
  for (int l = 0; l < levels; ++l) {
    const int s_w = params.levels[l].s_w;
    if (s_w == 1) {
      pooled.push_back(x);
      continue;
    }
    const int pr = ceildiv(m, s_w);
    const int pc = ceildiv(n, s_w);
    Tensor map({static_cast<std::size_t>(pr), static_cast<std::size_t>(pc),
                static_cast<std::size_t>(d)});
    for (int i = 0; i < pr; ++i) {
      for (int j = 0; j < pc; ++j) {
        for (int c = 0; c < d; ++c) {
          double acc = 0.0;
          for (int u = 0; u < s_w; ++u) {
            for (int v = 0; v < s_w; ++v) {
              const int rr = i * s_w + u;
              const int cc = j * s_w + v;
              const double xv = (rr < m && cc < n) ? x(rr, cc, c) : 0.0;
              acc += params.pool[l].weight[static_cast<std::size_t>(u) * s_w + v] * xv;
              if (counter) ++counter->macs;
            }
          }
          map(i, j, c) = acc + params.pool[l].bias[0];
        }
      }
    }
    pooled.push_back(std::move(map));
  }

  // Shared projections: query on the finest map, keys/values on every level.
  const Tensor q_map = counted_linear(x, params.q_weight, &params.q_bias, counter);
  std::vector<Tensor> k_maps, v_maps;
  for (int l = 0; l < levels; ++l) {
    k_maps.push_back(counted_linear(pooled[l], params.k_weight, &params.k_bias, counter));
    v_maps.push_back(counted_linear(pooled[l], params.v_weight, &params.v_bias, counter));
  }

  int total_keys = 0;
  for (int l = 0; l < levels; ++l) {
    total_keys += params.levels[l].s_r * params.levels[l].s_r;
  }
  const int s_r0 = params.levels[0].s_r;
  const int bias_ext = s_p + s_r0 - 1;

  Tensor y(x.shape());
  const int w_rows = ceildiv(m, s_p);
  const int w_cols = ceildiv(n, s_p);
  for (int wr = 0; wr < w_rows; ++wr) {
    for (int wc = 0; wc < w_cols; ++wc) {
      const int r0 = wr * s_p;
      const int c0 = wc * s_p;

      // Assemble the window's key/value rows level by level.
      Tensor keys({static_cast<std::size_t>(total_keys),
                   static_cast<std::size_t>(d)});
      Tensor values(keys.shape());
      Mask valid(static_cast<std::size_t>(total_keys), 0);
      std::vector<int> key_row(total_keys), key_col(total_keys), key_level(total_keys);
      int g = 0;
      for (int l = 0; l < levels; ++l) {
        const int s_w = params.levels[l].s_w;
        const int s_r = params.levels[l].s_r;
        const int pr = ceildiv(m, s_w);
        const int pc = ceildiv(n, s_w);
        const int f0r = floordiv(r0, s_w);
        const int f1r = ceildiv(r0 + s_p, s_w);
        const int f0c = floordiv(c0, s_w);
        const int f1c = ceildiv(c0 + s_p, s_w);
        const int start_r = f0r - floordiv(s_r - (f1r - f0r), 2);
        const int start_c = f0c - floordiv(s_r - (f1c - f0c), 2);
        for (int i = 0; i < s_r; ++i) {
          for (int j = 0; j < s_r; ++j, ++g) {
            const int kr = start_r + i;
            const int kc = start_c + j;
            key_row[g] = kr;
            key_col[g] = kc;
            key_level[g] = l;
            if (kr >= 0 && kr < pr && kc >= 0 && kc < pc) {
              valid[static_cast<std::size_t>(g)] = 1;
              for (int c = 0; c < d; ++c) {
                keys(static_cast<std::size_t>(g), static_cast<std::size_t>(c)) =
                    k_maps[l](kr, kc, c);
                values(static_cast<std::size_t>(g), static_cast<std::size_t>(c)) =
                    v_maps[l](kr, kc, c);
              }
            }
          }
        }
      }

      // Every query token of the window, one at a time.
      for (int qr = 0; qr < s_p; ++qr) {
        for (int qc = 0; qc < s_p; ++qc) {
          const int r = r0 + qr;
          const int c = c0 + qc;
          if (r >= m || c >= n) continue;
          Tensor ctx({static_cast<std::size_t>(d)});
          for (int h = 0; h < heads; ++h) {
            const int base = h * dh;
            Tensor logits({static_cast<std::size_t>(total_keys)});
            for (int key = 0; key < total_keys; ++key) {
              double acc = 0.0;
              for (int j = 0; j < dh; ++j) {
                acc += q_map(r, c, base + j) *
                       keys(static_cast<std::size_t>(key),
                            static_cast<std::size_t>(base + j));
                if (counter) ++counter->macs;
              }
              double bias = 0.0;
              if (valid[static_cast<std::size_t>(key)]) {
                if (key_level[key] == 0) {
                  const int ir = (key_row[key] - r) + (s_p - 1) +
                                 floordiv(s_r0 - s_p, 2);
                  const int ic = (key_col[key] - c) + (s_p - 1) +
                                 floordiv(s_r0 - s_p, 2);
                  if (ir < 0 || ir >= bias_ext || ic < 0 || ic >= bias_ext) {
                    throw std::logic_error("reference: offset outside bias table");
                  }
                  bias = params.bias_level1(h, ir, ic);
                } else {
                  const int l = key_level[key];
                  const int s_r = params.levels[l].s_r;
                  int within = key;
                  for (int pl = 0; pl < l; ++pl) {
                    within -= params.levels[pl].s_r * params.levels[pl].s_r;
                  }
                  bias = params.bias_coarse[l](h, within / s_r, within % s_r);
                }
              }
              logits[static_cast<std::size_t>(key)] = acc * inv_scale + bias;
            }
            const Tensor probs = masked_softmax(logits, &valid);
            for (int j = 0; j < dh; ++j) {
              double acc = 0.0;
              for (int key = 0; key < total_keys; ++key) {
                acc += probs[static_cast<std::size_t>(key)] *
                       values(static_cast<std::size_t>(key),
                              static_cast<std::size_t>(base + j));
                if (counter) ++counter->macs;
              }
              ctx[static_cast<std::size_t>(base + j)] = acc;
            }
          }
          const Tensor out_row =
              counted_linear(ctx, params.out_weight, &params.out_bias, counter);
          for (int ch = 0; ch < d; ++ch) {
            y(r, c, ch) = out_row[static_cast<std::size_t>(ch)];
          }
        }
      }
    }
  }
  return y;
}

Tensor full_attention_reference(const Tensor& tokens,
                                const FocalLayerParams& params) {
  if (tokens.rank() != 2 ||
      static_cast<int>(tokens.extent(1)) != params.d_model) {
    throw std::invalid_argument("full_attention_reference: bad token matrix " +
                                tokens.shape_str());
  }
  const int n = static_cast<int>(tokens.extent(0));
  const int d = params.d_model;
  const int heads = params.n_heads;
  const int dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const Tensor q = linear(tokens, params.q_weight, &params.q_bias);
  const Tensor k = linear(tokens, params.k_weight, &params.k_bias);
  const Tensor v = linear(tokens, params.v_weight, &params.v_bias);

  Tensor ctx({static_cast<std::size_t>(n), static_cast<std::size_t>(d)});
  for (int i = 0; i < n; ++i) {
    for (int h = 0; h < heads; ++h) {
      const int base = h * dh;
      Tensor logits({static_cast<std::size_t>(n)});
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int t = 0; t < dh; ++t) {
          acc += q(i, base + t) * k(j, base + t);
        }
        logits[static_cast<std::size_t>(j)] = acc * inv_scale;
      }
      const Tensor probs = masked_softmax(logits);
      for (int t = 0; t < dh; ++t) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) {
          acc += probs[static_cast<std::size_t>(j)] * v(j, base + t);
        }
        ctx(i, base + t) = acc;
      }
    }
  }
  return linear(ctx, params.out_weight, &params.out_bias);
}

Tensor naive_model_forward(const Model& model, const Tensor& image,
                           MacCounter* counter) {
  Tensor x = image;
  for (const StageParams& stage : model.stages) {
    if (counter) {
      const int p = stage.embed.patch;
      const long long oh = ceildiv(static_cast<int>(x.extent(0)), p);
      const long long ow = ceildiv(static_cast<int>(x.extent(1)), p);
      counter->macs += oh * ow * static_cast<long long>(stage.embed.weight.extent(0)) *
                       static_cast<long long>(stage.embed.weight.extent(1));
    }
    x = patch_embed(x, stage.embed);
    for (const FocalLayerParams& layer : stage.layers) {
      const Tensor normed =
          layer_norm(x, layer.ln1_gamma, layer.ln1_beta, kLayerNormEps);
      const Tensor attn = naive_focal_forward(normed, layer, counter);
      Tensor mid(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) mid[i] = x[i] + attn[i];
      const Tensor normed2 =
          layer_norm(mid, layer.ln2_gamma, layer.ln2_beta, kLayerNormEps);
      Tensor hidden = counted_linear(normed2, layer.mlp_w1, &layer.mlp_b1, counter);
      hidden = gelu(hidden);
      const Tensor mlp_out =
          counted_linear(hidden, layer.mlp_w2, &layer.mlp_b2, counter);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = mid[i] + mlp_out[i];
    }
  }
  const std::size_t cells = x.extent(0) * x.extent(1);
  const std::size_t d = x.extent(2);
  Tensor mean({d});
  for (std::size_t cell = 0; cell < cells; ++cell) {
    for (std::size_t c = 0; c < d; ++c) mean[c] += x[cell * d + c];
  }
  for (std::size_t c = 0; c < d; ++c) mean[c] /= static_cast<double>(cells);
  const Tensor normed =
      layer_norm(mean, model.final_ln_gamma, model.final_ln_beta, kLayerNormEps);
  return counted_linear(normed, model.head_weight, &model.head_bias, counter);
}

namespace {

LayerCase build_case(std::uint64_t seed, int max_extent, int max_levels,
                     bool small) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 0x2545F4914F6CDD1DULL);
  auto pick = [&rng](int lo, int hi) {
    return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
  };

  LayerCase out;
  const int s_p = small ? 2 : (pick(0, 1) ? 2 : 4);
  const int m = pick(small ? 2 : 3, max_extent);
  const int n = pick(small ? 2 : 3, max_extent);
  const int d = small ? (pick(0, 1) ? 2 : 4) : 2 << pick(0, 2);
  int heads = pick(0, 1) ? 1 : 2;
  if (d % heads != 0) heads = 1;

  // The fine region always covers the window, as in every configuration the
  // architecture uses; smaller regions could leave a clipped edge window
  // with no valid keys at all.
  std::vector<FocalLevel> levels;
  levels.push_back({1, s_p + pick(0, small ? 2 : 4)});
  const int extra = pick(0, max_levels - 1);
  for (int l = 0; l < extra; ++l) {
    levels.push_back({pick(2, small ? 3 : 4), pick(1, small ? 3 : 5)});
  }

  out.params = make_focal_layer_shapes(s_p, levels, d, heads);
  TruncNormal weight_rng(rng(), 0.5);
  auto randomize = [&weight_rng](Tensor& t) { weight_rng.fill(t); };
  randomize(out.params.q_weight);
  randomize(out.params.q_bias);
  randomize(out.params.k_weight);
  randomize(out.params.k_bias);
  randomize(out.params.v_weight);
  randomize(out.params.v_bias);
  randomize(out.params.out_weight);
  randomize(out.params.out_bias);
  randomize(out.params.bias_level1);
  for (std::size_t l = 1; l < out.params.levels.size(); ++l) {
    randomize(out.params.bias_coarse[l]);
    if (out.params.pool[l].present()) {
      randomize(out.params.pool[l].weight);
      randomize(out.params.pool[l].bias);
    }
  }
  randomize(out.params.mlp_w1);
  randomize(out.params.mlp_b1);
  randomize(out.params.mlp_w2);
  randomize(out.params.mlp_b2);
  randomize(out.params.ln1_beta);
  randomize(out.params.ln2_beta);
  for (std::size_t i = 0; i < out.params.ln1_gamma.size(); ++i) {
    out.params.ln1_gamma[i] = 1.0 + out.params.ln1_beta[i] * 0.1;
    out.params.ln2_gamma[i] = 1.0 + out.params.ln2_beta[i] * 0.1;
  }

  out.x = Tensor({static_cast<std::size_t>(m), static_cast<std::size_t>(n),
                  static_cast<std::size_t>(d)});
  TruncNormal input_rng(rng(), 1.0);
  input_rng.fill(out.x);
  return out;
}

}  // namespace

LayerCase random_layer_case(std::uint64_t seed) {
  return build_case(seed, 16, 3, false);
}

LayerCase random_small_case(std::uint64_t seed) {
  return build_case(seed, 6, 2, true);
}

double equivalence_max_delta(std::uint64_t seed) {
  const LayerCase c = random_layer_case(seed);
  const AttentionOutput fast = focal_attention_forward(c.x, c.params);
  const Tensor slow = naive_focal_forward(c.x, c.params);
  double max_delta = 0.0;
  for (std::size_t i = 0; i < slow.size(); ++i) {
    max_delta = std::max(max_delta, std::abs(fast.y[i] - slow[i]));
  }
  return max_delta;
}

double gradcheck_max_rel_error(std::uint64_t seed) {
  LayerCase c = random_small_case(seed);
  Tensor upstream(c.x.shape());
  TruncNormal up_rng(seed ^ 0xABCDEF1234567890ULL, 1.0);
  up_rng.fill(upstream);

  const FocalAttentionGrads grads =
      focal_attention_backward(c.x, c.params, upstream);

  auto loss = [&]() {
    const AttentionOutput out = focal_attention_forward(c.x, c.params);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.y.size(); ++i) acc += upstream[i] * out.y[i];
    return acc;
  };

  std::vector<std::pair<Tensor*, const Tensor*>> pairs = {
      {&c.x, &grads.x},
      {&c.params.q_weight, &grads.q_weight},
      {&c.params.q_bias, &grads.q_bias},
      {&c.params.k_weight, &grads.k_weight},
      {&c.params.k_bias, &grads.k_bias},
      {&c.params.v_weight, &grads.v_weight},
      {&c.params.v_bias, &grads.v_bias},
      {&c.params.out_weight, &grads.out_weight},
      {&c.params.out_bias, &grads.out_bias},
      {&c.params.bias_level1, &grads.bias_level1},
  };
  for (std::size_t l = 1; l < c.params.levels.size(); ++l) {
    pairs.emplace_back(&c.params.bias_coarse[l], &grads.bias_coarse[l]);
    if (c.params.pool[l].present()) {
      pairs.emplace_back(&c.params.pool[l].weight, &grads.pool_weight[l]);
      pairs.emplace_back(&c.params.pool[l].bias, &grads.pool_bias[l]);
    }
  }

  const double h = 1e-5;
  double worst = 0.0;
  for (auto& [param, grad] : pairs) {
    for (std::size_t i = 0; i < param->size(); ++i) {
      const double saved = (*param)[i];
      (*param)[i] = saved + h;
      const double up = loss();
      (*param)[i] = saved - h;
      const double down = loss();
      (*param)[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double analytic = (*grad)[i];
      const double scale = std::max({1.0, std::abs(fd), std::abs(analytic)});
      worst = std::max(worst, std::abs(fd - analytic) / scale);
    }
  }
  return worst;
}

}  // namespace oracle
}  // namespace focal
