#include "focal/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace focal {

namespace {

void check_feature_map(const Tensor& x, int d_model, const char* who) {
  if (x.rank() != 3 || static_cast<int>(x.extent(2)) != d_model) {
    throw std::invalid_argument(std::string(who) + ": expected [M, N, " +
                                std::to_string(d_model) + "] map, got " +
                                x.shape_str());
  }
}

// Index of token offset `delta` in the finest-level bias table.
inline int level1_bias_index(int delta, int s_p, int s_r0) {
  return delta + (s_p - 1) + floor_div(s_r0 - s_p, 2);
}

struct RealQuery {
  int slot;  // qr * s_p + qc
  int row, col;
};

std::vector<RealQuery> real_queries(const WindowGrid& grid, int window) {
  const int wr = window / grid.cols;
  const int wc = window % grid.cols;
  const int r0 = wr * grid.s_p;
  const int c0 = wc * grid.s_p;
  std::vector<RealQuery> out;
  out.reserve(static_cast<std::size_t>(grid.s_p) * grid.s_p);
  for (int qr = 0; qr < grid.s_p; ++qr) {
    for (int qc = 0; qc < grid.s_p; ++qc) {
      const int r = r0 + qr;
      const int c = c0 + qc;
      if (r < grid.map_rows && c < grid.map_cols) {
        out.push_back({qr * grid.s_p + qc, r, c});
      }
    }
  }
  return out;
}

}  // namespace

void FocalLayerParams::validate() const {
  if (s_p < 1) throw std::invalid_argument("focal layer: s_p must be >= 1");
  if (levels.empty()) throw std::invalid_argument("focal layer: no levels");
  if (levels[0].s_w != 1) {
    throw std::invalid_argument("focal layer: levels[0].s_w must be 1");
  }
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
    throw std::invalid_argument(
        "focal layer: d_model must be a positive multiple of n_heads");
  }
  if (pool.size() != levels.size()) {
    throw std::invalid_argument("focal layer: pool params misaligned with levels");
  }
  if (bias_coarse.size() != levels.size()) {
    throw std::invalid_argument("focal layer: bias tables misaligned with levels");
  }
  const int ext = level1_bias_extent();
  if (bias_level1.rank() != 3 ||
      static_cast<int>(bias_level1.extent(0)) != n_heads ||
      static_cast<int>(bias_level1.extent(1)) != ext ||
      static_cast<int>(bias_level1.extent(2)) != ext) {
    throw std::invalid_argument("focal layer: finest bias table has shape " +
                                bias_level1.shape_str() + ", expected [" +
                                std::to_string(n_heads) + ", " +
                                std::to_string(ext) + ", " +
                                std::to_string(ext) + "]");
  }
  for (std::size_t l = 1; l < levels.size(); ++l) {
    const auto& t = bias_coarse[l];
    if (t.rank() != 3 || static_cast<int>(t.extent(0)) != n_heads ||
        static_cast<int>(t.extent(1)) != levels[l].s_r ||
        static_cast<int>(t.extent(2)) != levels[l].s_r) {
      throw std::invalid_argument("focal layer: coarse bias table " +
                                  std::to_string(l) + " has shape " +
                                  t.shape_str());
    }
    if (levels[l].s_w > 1 && !pool[l].present()) {
      throw std::invalid_argument("focal layer: level " + std::to_string(l) +
                                  " needs pooling weights for s_w > 1");
    }
  }
}

FocalLayerParams make_focal_layer_shapes(int s_p,
                                         std::vector<FocalLevel> levels,
                                         int d_model, int n_heads) {
  FocalLayerParams p;
  p.s_p = s_p;
  p.levels = std::move(levels);
  p.d_model = d_model;
  p.n_heads = n_heads;

  const std::size_t d = static_cast<std::size_t>(d_model);
  const std::size_t h = static_cast<std::size_t>(n_heads);
  p.q_weight = Tensor({d, d});
  p.q_bias = Tensor({d});
  p.k_weight = Tensor({d, d});
  p.k_bias = Tensor({d});
  p.v_weight = Tensor({d, d});
  p.v_bias = Tensor({d});
  p.out_weight = Tensor({d, d});
  p.out_bias = Tensor({d});

  p.pool.resize(p.levels.size());
  p.bias_coarse.resize(p.levels.size());
  for (std::size_t l = 0; l < p.levels.size(); ++l) {
    const int s_w = p.levels[l].s_w;
    if (l > 0) {
      if (s_w > 1) {
        p.pool[l].weight = Tensor({static_cast<std::size_t>(s_w) * s_w});
        p.pool[l].bias = Tensor({1});
      }
      const std::size_t s_r = static_cast<std::size_t>(p.levels[l].s_r);
      p.bias_coarse[l] = Tensor({h, s_r, s_r});
    }
  }
  const std::size_t ext =
      static_cast<std::size_t>(s_p + p.levels.at(0).s_r - 1);
  p.bias_level1 = Tensor({h, ext, ext});

  p.mlp_w1 = Tensor({4 * d, d});
  p.mlp_b1 = Tensor({4 * d});
  p.mlp_w2 = Tensor({d, 4 * d});
  p.mlp_b2 = Tensor({d});
  p.ln1_gamma = Tensor({d});
  p.ln1_beta = Tensor({d});
  p.ln2_gamma = Tensor({d});
  p.ln2_beta = Tensor({d});
  p.validate();
  return p;
}

void init_focal_layer(FocalLayerParams& params, TruncNormal& rng) {
  rng.fill(params.q_weight);
  rng.fill(params.k_weight);
  rng.fill(params.v_weight);
  rng.fill(params.out_weight);
  rng.fill(params.mlp_w1);
  rng.fill(params.mlp_w2);
  for (std::size_t l = 0; l < params.levels.size(); ++l) {
    if (params.pool[l].present()) {
      const int s_w = params.levels[l].s_w;
      const double mean_w = 1.0 / (static_cast<double>(s_w) * s_w);
      for (std::size_t i = 0; i < params.pool[l].weight.size(); ++i) {
        params.pool[l].weight[i] = mean_w;
      }
    }
  }
  for (std::size_t i = 0; i < params.ln1_gamma.size(); ++i) {
    params.ln1_gamma[i] = 1.0;
    params.ln2_gamma[i] = 1.0;
  }
  // Biases and position-bias tables stay zero.
}

Tensor subwindow_pool(const Tensor& x, FocalLevel level,
                      const PoolParams& pool) {
  if (x.rank() != 3) {
    throw std::invalid_argument("subwindow_pool: expected rank-3 map, got " +
                                x.shape_str());
  }
  if (level.s_w == 1) return x;
  const int s_w = level.s_w;
  if (!pool.present() ||
      pool.weight.size() != static_cast<std::size_t>(s_w) * s_w) {
    throw std::invalid_argument(
        "subwindow_pool: missing or mis-sized pooling weights for s_w=" +
        std::to_string(s_w));
  }
  const int m = static_cast<int>(x.extent(0));
  const int n = static_cast<int>(x.extent(1));
  const int d = static_cast<int>(x.extent(2));
  const int pr = pooled_extent(m, s_w);
  const int pc = pooled_extent(n, s_w);
  Tensor out({static_cast<std::size_t>(pr), static_cast<std::size_t>(pc),
              static_cast<std::size_t>(d)});
  const double b = pool.bias[0];
  for (int i = 0; i < pr; ++i) {
    for (int j = 0; j < pc; ++j) {
      for (int c = 0; c < d; ++c) {
        double acc = 0.0;
        for (int u = 0; u < s_w; ++u) {
          for (int v = 0; v < s_w; ++v) {
            const int rr = i * s_w + u;
            const int cc = j * s_w + v;
            const double xv = (rr < m && cc < n) ? x(rr, cc, c) : 0.0;
            acc += pool.weight[static_cast<std::size_t>(u) * s_w + v] * xv;
          }
        }
        out(i, j, c) = acc + b;
      }
    }
  }
  return out;
}

PooledLevels pool_all_levels(const Tensor& x, const FocalLayerParams& params) {
  check_feature_map(x, params.d_model, "pool_all_levels");
  PooledLevels out;
  out.maps.reserve(params.levels.size());
  out.valid.reserve(params.levels.size());
  for (std::size_t l = 0; l < params.levels.size(); ++l) {
    Tensor map = subwindow_pool(x, params.levels[l], params.pool[l]);
    out.valid.emplace_back(map.extent(0) * map.extent(1), 1);
    out.maps.push_back(std::move(map));
  }
  return out;
}

ProjectedQKV project_qkv(const PooledLevels& pooled,
                         const FocalLayerParams& params) {
  if (pooled.maps.size() != params.levels.size()) {
    throw std::invalid_argument("project_qkv: pooled level count mismatch");
  }
  ProjectedQKV out;
  out.q = linear(pooled.maps[0], params.q_weight, &params.q_bias);
  out.k.reserve(pooled.maps.size());
  out.v.reserve(pooled.maps.size());
  for (const Tensor& map : pooled.maps) {
    out.k.push_back(linear(map, params.k_weight, &params.k_bias));
    out.v.push_back(linear(map, params.v_weight, &params.v_bias));
  }
  return out;
}

WindowKV gather_window_kv(const std::vector<Tensor>& k,
                          const std::vector<Tensor>& v, const GatherPlan& plan,
                          int window) {
  if (window < 0 || window >= plan.grid.window_count()) {
    throw std::out_of_range("gather_window_kv: window index out of range");
  }
  if (k.size() != plan.levels.size() || v.size() != plan.levels.size()) {
    throw std::invalid_argument("gather_window_kv: level count mismatch");
  }
  const std::size_t d = k[0].extent(2);
  const std::size_t s = static_cast<std::size_t>(plan.keys_per_window);
  WindowKV out{Tensor({s, d}), Tensor({s, d}), Mask(s, 0)};
  const RegionSlot* slots = plan.window_slots(window);
  for (std::size_t l = 0; l < plan.levels.size(); ++l) {
    const int begin = plan.level_offset[l];
    const int end = plan.level_offset[l + 1];
    for (int g = begin; g < end; ++g) {
      const RegionSlot& slot = slots[g];
      if (!slot.valid) continue;  // zero rows, false flag
      out.valid[g] = 1;
      for (std::size_t c = 0; c < d; ++c) {
        out.k(static_cast<std::size_t>(g), c) = k[l](slot.row, slot.col, c);
        out.v(static_cast<std::size_t>(g), c) = v[l](slot.row, slot.col, c);
      }
    }
  }
  return out;
}

Tensor bias_rows(const FocalLayerParams& params, const GatherPlan& plan,
                 int window) {
  params.validate();
  if (window < 0 || window >= plan.grid.window_count()) {
    throw std::out_of_range("bias_rows: window index out of range");
  }
  const int s_p = params.s_p;
  const int sp2 = s_p * s_p;
  const int s = plan.keys_per_window;
  const int ext = params.level1_bias_extent();
  Tensor out({static_cast<std::size_t>(params.n_heads),
              static_cast<std::size_t>(sp2), static_cast<std::size_t>(s)});
  const RegionSlot* slots = plan.window_slots(window);
  const int wr = window / plan.grid.cols;
  const int wc = window % plan.grid.cols;
  const int r0 = wr * s_p;
  const int c0 = wc * s_p;
  const int s_r0 = params.levels[0].s_r;

  for (std::size_t l = 0; l < params.levels.size(); ++l) {
    const int begin = plan.level_offset[l];
    const int s_r = params.levels[l].s_r;
    for (int i = 0; i < s_r; ++i) {
      for (int j = 0; j < s_r; ++j) {
        const int g = begin + i * s_r + j;
        if (!slots[g].valid) continue;  // masked anyway, keep 0
        for (int h = 0; h < params.n_heads; ++h) {
          if (l == 0) {
            for (int qr = 0; qr < s_p; ++qr) {
              for (int qc = 0; qc < s_p; ++qc) {
                const int ir = level1_bias_index(slots[g].row - (r0 + qr), s_p, s_r0);
                const int ic = level1_bias_index(slots[g].col - (c0 + qc), s_p, s_r0);
                if (ir < 0 || ir >= ext || ic < 0 || ic >= ext) {
                  throw std::logic_error("bias_rows: offset outside table");
                }
                out(h, qr * s_p + qc, g) = params.bias_level1(h, ir, ic);
              }
            }
          } else {
            const double b = params.bias_coarse[l](h, i, j);
            for (int q = 0; q < sp2; ++q) out(h, q, g) = b;
          }
        }
      }
    }
  }
  return out;
}

AttentionOutput focal_attention_forward(const Tensor& x,
                                        const FocalLayerParams& params) {
  params.validate();
  check_feature_map(x, params.d_model, "focal_attention_forward");
  const int m = static_cast<int>(x.extent(0));
  const int n = static_cast<int>(x.extent(1));
  const int d = params.d_model;
  const int dh = params.head_dim();
  const int heads = params.n_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  AttentionOutput out;
  out.plan = build_gather_plan(m, n, params.s_p, params.levels);
  const GatherPlan& plan = out.plan;
  const int s = plan.keys_per_window;
  const int sp2 = params.s_p * params.s_p;
  const int windows = plan.grid.window_count();

  const PooledLevels pooled = pool_all_levels(x, params);
  const ProjectedQKV qkv = project_qkv(pooled, params);

  out.y = Tensor(x.shape());
  out.probs = Tensor({static_cast<std::size_t>(windows),
                      static_cast<std::size_t>(heads),
                      static_cast<std::size_t>(sp2),
                      static_cast<std::size_t>(s)});

  parallel_for(static_cast<std::size_t>(windows), [&](std::size_t begin,
                                                      std::size_t end) {
    Tensor logits({static_cast<std::size_t>(s)});
    for (std::size_t w = begin; w < end; ++w) {
      const WindowKV wkv =
          gather_window_kv(qkv.k, qkv.v, plan, static_cast<int>(w));
      const Tensor bias = bias_rows(params, plan, static_cast<int>(w));
      const auto queries = real_queries(plan.grid, static_cast<int>(w));
      Tensor ctx({queries.size(), static_cast<std::size_t>(d)});
      for (std::size_t ri = 0; ri < queries.size(); ++ri) {
        const RealQuery& rq = queries[ri];
        for (int h = 0; h < heads; ++h) {
          const int base = h * dh;
          for (int key = 0; key < s; ++key) {
            double acc = 0.0;
            for (int j = 0; j < dh; ++j) {
              acc += qkv.q(rq.row, rq.col, base + j) * wkv.k(key, base + j);
            }
            logits[key] = acc * inv_scale + bias(h, rq.slot, key);
          }
          const Tensor row = masked_softmax(logits, &wkv.valid);
          for (int key = 0; key < s; ++key) {
            out.probs(w, h, rq.slot, key) = row[key];
          }
          for (int j = 0; j < dh; ++j) {
            double acc = 0.0;
            for (int key = 0; key < s; ++key) {
              acc += row[key] * wkv.v(key, base + j);
            }
            ctx(ri, static_cast<std::size_t>(base + j)) = acc;
          }
        }
      }
      const Tensor rows = linear(ctx, params.out_weight, &params.out_bias);
      for (std::size_t ri = 0; ri < queries.size(); ++ri) {
        for (int c = 0; c < d; ++c) {
          out.y(queries[ri].row, queries[ri].col, c) = rows(ri, static_cast<std::size_t>(c));
        }
      }
    }
  });
  return out;
}

FocalAttentionGrads focal_attention_backward(const Tensor& x,
                                             const FocalLayerParams& params,
                                             const Tensor& upstream) {
  params.validate();
  check_feature_map(x, params.d_model, "focal_attention_backward");
  if (!upstream.same_shape(x)) {
    throw std::invalid_argument("focal_attention_backward: upstream " +
                                upstream.shape_str() + " does not match " +
                                x.shape_str());
  }
  const int m = static_cast<int>(x.extent(0));
  const int n = static_cast<int>(x.extent(1));
  const int d = params.d_model;
  const int dh = params.head_dim();
  const int heads = params.n_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t levels = params.levels.size();

  const GatherPlan plan = build_gather_plan(m, n, params.s_p, params.levels);
  const int s = plan.keys_per_window;
  const PooledLevels pooled = pool_all_levels(x, params);
  const ProjectedQKV qkv = project_qkv(pooled, params);
  const AttentionOutput fwd = focal_attention_forward(x, params);

  FocalAttentionGrads g;
  g.x = Tensor(x.shape());
  g.q_weight = Tensor(params.q_weight.shape());
  g.q_bias = Tensor(params.q_bias.shape());
  g.k_weight = Tensor(params.k_weight.shape());
  g.k_bias = Tensor(params.k_bias.shape());
  g.v_weight = Tensor(params.v_weight.shape());
  g.v_bias = Tensor(params.v_bias.shape());
  g.out_weight = Tensor(params.out_weight.shape());
  g.out_bias = Tensor(params.out_bias.shape());
  g.bias_level1 = Tensor(params.bias_level1.shape());
  g.pool_weight.resize(levels);
  g.pool_bias.resize(levels);
  g.bias_coarse.resize(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    if (params.pool[l].present()) {
      g.pool_weight[l] = Tensor(params.pool[l].weight.shape());
      g.pool_bias[l] = Tensor(params.pool[l].bias.shape());
    }
    if (l > 0) g.bias_coarse[l] = Tensor(params.bias_coarse[l].shape());
  }

  Tensor d_qmap(qkv.q.shape());
  std::vector<Tensor> d_k, d_v;
  for (std::size_t l = 0; l < levels; ++l) {
    d_k.emplace_back(qkv.k[l].shape());
    d_v.emplace_back(qkv.v[l].shape());
  }

  const int s_r0 = params.levels[0].s_r;
  const int ext = params.level1_bias_extent();

  for (int w = 0; w < plan.grid.window_count(); ++w) {
    const RegionSlot* slots = plan.window_slots(w);
    const WindowKV wkv = gather_window_kv(qkv.k, qkv.v, plan, w);
    const auto queries = real_queries(plan.grid, w);
    const std::size_t nreal = queries.size();

    // Recompute ctx from the stored probabilities.
    Tensor ctx({nreal, static_cast<std::size_t>(d)});
    for (std::size_t ri = 0; ri < nreal; ++ri) {
      for (int h = 0; h < heads; ++h) {
        const int base = h * dh;
        for (int j = 0; j < dh; ++j) {
          double acc = 0.0;
          for (int key = 0; key < s; ++key) {
            acc += fwd.probs(w, h, queries[ri].slot, key) *
                   wkv.v(key, base + j);
          }
          ctx(ri, static_cast<std::size_t>(base + j)) = acc;
        }
      }
    }

    // Output projection backward.
    Tensor dctx({nreal, static_cast<std::size_t>(d)});
    for (std::size_t ri = 0; ri < nreal; ++ri) {
      for (int o = 0; o < d; ++o) {
        const double up = upstream(queries[ri].row, queries[ri].col, o);
        g.out_bias[static_cast<std::size_t>(o)] += up;
        for (int i = 0; i < d; ++i) {
          g.out_weight(o, i) += up * ctx(ri, static_cast<std::size_t>(i));
          dctx(ri, static_cast<std::size_t>(i)) +=
              up * params.out_weight(o, i);
        }
      }
    }

    Tensor d_kw({static_cast<std::size_t>(s), static_cast<std::size_t>(d)});
    Tensor d_vw({static_cast<std::size_t>(s), static_cast<std::size_t>(d)});
    std::vector<double> d_probs(static_cast<std::size_t>(s));
    std::vector<double> d_logits(static_cast<std::size_t>(s));

    for (std::size_t ri = 0; ri < nreal; ++ri) {
      const RealQuery& rq = queries[ri];
      for (int h = 0; h < heads; ++h) {
        const int base = h * dh;
        double dot = 0.0;
        for (int key = 0; key < s; ++key) {
          double acc = 0.0;
          for (int j = 0; j < dh; ++j) {
            acc += dctx(ri, static_cast<std::size_t>(base + j)) *
                   wkv.v(key, base + j);
          }
          d_probs[key] = acc;
          const double p = fwd.probs(w, h, rq.slot, key);
          dot += p * acc;
          for (int j = 0; j < dh; ++j) {
            d_vw(key, base + j) +=
                p * dctx(ri, static_cast<std::size_t>(base + j));
          }
        }
        for (int key = 0; key < s; ++key) {
          const double p = fwd.probs(w, h, rq.slot, key);
          d_logits[key] = p * (d_probs[key] - dot);
        }
        // Bias tables and Q/K through the scaled dot product.
        for (std::size_t l = 0; l < levels; ++l) {
          const int begin = plan.level_offset[l];
          const int s_r = params.levels[l].s_r;
          for (int i = 0; i < s_r; ++i) {
            for (int j = 0; j < s_r; ++j) {
              const int key = begin + i * s_r + j;
              const double dl = d_logits[key];
              if (dl == 0.0) continue;
              if (l == 0) {
                const int ir =
                    level1_bias_index(slots[key].row - rq.row, params.s_p, s_r0);
                const int ic =
                    level1_bias_index(slots[key].col - rq.col, params.s_p, s_r0);
                if (ir < 0 || ir >= ext || ic < 0 || ic >= ext) {
                  throw std::logic_error("backward: offset outside bias table");
                }
                g.bias_level1(h, ir, ic) += dl;
              } else {
                g.bias_coarse[l](h, i, j) += dl;
              }
            }
          }
        }
        for (int j = 0; j < dh; ++j) {
          double acc = 0.0;
          for (int key = 0; key < s; ++key) {
            acc += d_logits[key] * wkv.k(key, base + j);
          }
          d_qmap(rq.row, rq.col, base + j) += acc * inv_scale;
        }
        for (int key = 0; key < s; ++key) {
          const double dl = d_logits[key] * inv_scale;
          if (dl == 0.0) continue;
          for (int j = 0; j < dh; ++j) {
            d_kw(key, base + j) += dl * qkv.q(rq.row, rq.col, base + j);
          }
        }
      }
    }

    // Scatter per-window key/value gradients into per-level maps; pooled
    // cells shared by several windows accumulate.
    for (std::size_t l = 0; l < levels; ++l) {
      const int begin = plan.level_offset[l];
      const int end = plan.level_offset[l + 1];
      for (int key = begin; key < end; ++key) {
        if (!slots[key].valid) continue;
        for (int c = 0; c < d; ++c) {
          d_k[l](slots[key].row, slots[key].col, c) += d_kw(key, c);
          d_v[l](slots[key].row, slots[key].col, c) += d_vw(key, c);
        }
      }
    }
  }

  // Projection backward. Q acts on the level-0 map (the input itself).
  std::vector<Tensor> d_pooled;
  for (std::size_t l = 0; l < levels; ++l) d_pooled.emplace_back(pooled.maps[l].shape());

  const std::size_t cells0 = static_cast<std::size_t>(m) * n;
  for (std::size_t cell = 0; cell < cells0; ++cell) {
    const double* dq = d_qmap.data() + cell * d;
    const double* xr = x.data() + cell * d;
    double* dp0 = d_pooled[0].data() + cell * d;
    for (int o = 0; o < d; ++o) {
      const double gq = dq[o];
      if (gq == 0.0) continue;
      g.q_bias[static_cast<std::size_t>(o)] += gq;
      for (int i = 0; i < d; ++i) {
        g.q_weight(o, i) += gq * xr[i];
        dp0[i] += gq * params.q_weight(o, i);
      }
    }
  }
  for (std::size_t l = 0; l < levels; ++l) {
    const std::size_t cells = pooled.maps[l].extent(0) * pooled.maps[l].extent(1);
    for (std::size_t cell = 0; cell < cells; ++cell) {
      const double* dk = d_k[l].data() + cell * d;
      const double* dv = d_v[l].data() + cell * d;
      const double* pm = pooled.maps[l].data() + cell * d;
      double* dp = d_pooled[l].data() + cell * d;
      for (int o = 0; o < d; ++o) {
        const double gk = dk[o];
        if (gk != 0.0) {
          g.k_bias[static_cast<std::size_t>(o)] += gk;
          for (int i = 0; i < d; ++i) {
            g.k_weight(o, i) += gk * pm[i];
            dp[i] += gk * params.k_weight(o, i);
          }
        }
        const double gv = dv[o];
        if (gv != 0.0) {
          g.v_bias[static_cast<std::size_t>(o)] += gv;
          for (int i = 0; i < d; ++i) {
            g.v_weight(o, i) += gv * pm[i];
            dp[i] += gv * params.v_weight(o, i);
          }
        }
      }
    }
  }

  // Pooling backward; level 0 is the identity.
  for (std::size_t i = 0; i < g.x.size(); ++i) g.x[i] = d_pooled[0][i];
  for (std::size_t l = 1; l < levels; ++l) {
    const int s_w = params.levels[l].s_w;
    if (s_w == 1) {
      for (std::size_t i = 0; i < g.x.size(); ++i) g.x[i] += d_pooled[l][i];
      continue;
    }
    const int pr = static_cast<int>(pooled.maps[l].extent(0));
    const int pc = static_cast<int>(pooled.maps[l].extent(1));
    for (int i = 0; i < pr; ++i) {
      for (int j = 0; j < pc; ++j) {
        for (int c = 0; c < d; ++c) {
          const double gp = d_pooled[l](i, j, c);
          if (gp == 0.0) continue;
          g.pool_bias[l][0] += gp;
          for (int u = 0; u < s_w; ++u) {
            for (int v = 0; v < s_w; ++v) {
              const int rr = i * s_w + u;
              const int cc = j * s_w + v;
              if (rr >= m || cc >= n) continue;  // padding reads zero
              const std::size_t widx = static_cast<std::size_t>(u) * s_w + v;
              g.pool_weight[l][widx] += x(rr, cc, c) * gp;
              g.x(rr, cc, c) += params.pool[l].weight[widx] * gp;
            }
          }
        }
      }
    }
  }
  return g;
}

AttentionBreakdown attention_breakdown(const Tensor& probs,
                                       const GatherPlan& plan) {
  if (probs.rank() != 4) {
    throw std::invalid_argument("attention_breakdown: expected rank-4 probs");
  }
  const int windows = static_cast<int>(probs.extent(0));
  const int heads = static_cast<int>(probs.extent(1));
  const int s = static_cast<int>(probs.extent(3));
  if (windows != plan.grid.window_count() || s != plan.keys_per_window) {
    throw std::invalid_argument("attention_breakdown: probs do not match plan");
  }
  const int s_p = plan.grid.s_p;
  double inside = 0.0, surround = 0.0, global = 0.0;
  long long rows = 0;
  for (int w = 0; w < windows; ++w) {
    const RegionSlot* slots = plan.window_slots(w);
    const int r0 = (w / plan.grid.cols) * s_p;
    const int c0 = (w % plan.grid.cols) * s_p;
    const auto queries = real_queries(plan.grid, w);
    for (int h = 0; h < heads; ++h) {
      for (const RealQuery& rq : queries) {
        ++rows;
        for (int key = 0; key < s; ++key) {
          const double p = probs(w, h, rq.slot, key);
          if (key >= plan.level_offset[1]) {
            global += p;
          } else if (slots[key].row >= r0 && slots[key].row < r0 + s_p &&
                     slots[key].col >= c0 && slots[key].col < c0 + s_p) {
            inside += p;
          } else {
            surround += p;
          }
        }
      }
    }
  }
  AttentionBreakdown out;
  if (rows > 0) {
    out.inside_window = inside / static_cast<double>(rows);
    out.surround_local = surround / static_cast<double>(rows);
    out.global_pooled = global / static_cast<double>(rows);
  }
  return out;
}

Tensor focal_layer_forward(const Tensor& x, const FocalLayerParams& params,
                           AttentionBreakdown* breakdown) {
  check_feature_map(x, params.d_model, "focal_layer_forward");
  const Tensor normed =
      layer_norm(x, params.ln1_gamma, params.ln1_beta, kLayerNormEps);
  AttentionOutput attn = focal_attention_forward(normed, params);
  if (breakdown) *breakdown = attention_breakdown(attn.probs, attn.plan);

  Tensor mid(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) mid[i] = x[i] + attn.y[i];

  const Tensor normed2 =
      layer_norm(mid, params.ln2_gamma, params.ln2_beta, kLayerNormEps);
  Tensor hidden = linear(normed2, params.mlp_w1, &params.mlp_b1);
  hidden = gelu(hidden);
  const Tensor mlp_out = linear(hidden, params.mlp_w2, &params.mlp_b2);

  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = mid[i] + mlp_out[i];
  return out;
}

}  // namespace focal
