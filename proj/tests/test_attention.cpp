#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "focal/attention.hpp"
#include "focal/oracle.hpp"

using namespace focal;

namespace {

FocalLayerParams randomized_layer(int s_p, std::vector<FocalLevel> levels,
                                  int d, int heads, std::uint64_t seed) {
  FocalLayerParams p = make_focal_layer_shapes(s_p, std::move(levels), d, heads);
  TruncNormal rng(seed, 0.4);
  rng.fill(p.q_weight);
  rng.fill(p.q_bias);
  rng.fill(p.k_weight);
  rng.fill(p.k_bias);
  rng.fill(p.v_weight);
  rng.fill(p.v_bias);
  rng.fill(p.out_weight);
  rng.fill(p.out_bias);
  rng.fill(p.bias_level1);
  for (std::size_t l = 1; l < p.levels.size(); ++l) {
    rng.fill(p.bias_coarse[l]);
    if (p.pool[l].present()) {
      rng.fill(p.pool[l].weight);
      rng.fill(p.pool[l].bias);
    }
  }
  rng.fill(p.mlp_w1);
  rng.fill(p.mlp_b1);
  rng.fill(p.mlp_w2);
  rng.fill(p.mlp_b2);
  for (std::size_t i = 0; i < p.ln1_gamma.size(); ++i) {
    p.ln1_gamma[i] = 1.0;
    p.ln2_gamma[i] = 1.0;
  }
  return p;
}

Tensor random_map(int m, int n, int d, std::uint64_t seed) {
  Tensor x({static_cast<std::size_t>(m), static_cast<std::size_t>(n),
            static_cast<std::size_t>(d)});
  TruncNormal rng(seed, 1.0);
  rng.fill(x);
  return x;
}

}  // namespace

TEST_CASE("sub-window pooling") {
  SUBCASE("s_w = 1 is the identity with no parameters") {
    const Tensor x = random_map(3, 4, 2, 1);
    const Tensor y = subwindow_pool(x, {1, 3}, PoolParams{});
    REQUIRE(y.same_shape(x));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
  }

  SUBCASE("uniform weights average the sub-window") {
    PoolParams pool;
    pool.weight = Tensor({4}, {0.25, 0.25, 0.25, 0.25});
    pool.bias = Tensor({1}, {0.0});
    const Tensor x({2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
    const Tensor y = subwindow_pool(x, {2, 1}, pool);
    REQUIRE(y.shape() == std::vector<std::size_t>{1, 1, 1});
    CHECK(y[0] == doctest::Approx(2.5).epsilon(1e-15));
  }

  SUBCASE("missing weights for s_w > 1 is a configuration error") {
    const Tensor x = random_map(4, 4, 1, 2);
    CHECK_THROWS_AS(subwindow_pool(x, {2, 1}, PoolParams{}), std::invalid_argument);
  }

  SUBCASE("matches a nested-loop reference on a padded map") {
    const int m = 6, n = 4, d = 3, s_w = 2;
    const Tensor x = random_map(m, n, d, 3);
    PoolParams pool;
    pool.weight = Tensor({4});
    pool.bias = Tensor({1});
    TruncNormal rng(4, 0.5);
    rng.fill(pool.weight);
    rng.fill(pool.bias);

    const Tensor y = subwindow_pool(x, {s_w, 2}, pool);
    REQUIRE(y.shape() == std::vector<std::size_t>{3, 2, 3});
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 2; ++j) {
        for (int c = 0; c < d; ++c) {
          double acc = pool.bias[0];
          for (int u = 0; u < s_w; ++u) {
            for (int v = 0; v < s_w; ++v) {
              const int rr = i * s_w + u, cc = j * s_w + v;
              if (rr < m && cc < n) {
                acc += pool.weight[u * s_w + v] * x(rr, cc, c);
              }
            }
          }
          CHECK(std::abs(y(i, j, c) - acc) < 1e-12);
        }
      }
    }
  }
}

TEST_CASE("qkv projection") {
  SUBCASE("identity weights pass the maps through") {
    FocalLayerParams p = make_focal_layer_shapes(2, {{1, 2}, {2, 2}}, 2, 1);
    for (std::size_t i = 0; i < p.pool[1].weight.size(); ++i) {
      p.pool[1].weight[i] = 0.25;
    }
    for (int i = 0; i < 2; ++i) {
      p.q_weight(i, i) = 1.0;
      p.k_weight(i, i) = 1.0;
      p.v_weight(i, i) = 1.0;
    }
    const Tensor x = random_map(4, 4, 2, 6);
    const PooledLevels pooled = pool_all_levels(x, p);
    const ProjectedQKV qkv = project_qkv(pooled, p);
    REQUIRE(qkv.k.size() == 2);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(qkv.q[i] == x[i]);
      CHECK(qkv.k[0][i] == x[i]);
      CHECK(qkv.v[0][i] == x[i]);
    }
    for (std::size_t i = 0; i < pooled.maps[1].size(); ++i) {
      CHECK(qkv.k[1][i] == pooled.maps[1][i]);
    }
  }

  SUBCASE("level-0 keys equal a direct linear map of the input") {
    const FocalLayerParams p = randomized_layer(2, {{1, 3}, {2, 2}}, 4, 2, 7);
    const Tensor x = random_map(5, 6, 4, 8);
    const ProjectedQKV qkv = project_qkv(pool_all_levels(x, p), p);
    const Tensor direct = linear(x, p.k_weight, &p.k_bias);
    for (std::size_t i = 0; i < direct.size(); ++i) {
      CHECK(qkv.k[0][i] == direct[i]);
    }
    const Tensor direct_v = linear(x, p.v_weight, &p.v_bias);
    for (std::size_t i = 0; i < direct_v.size(); ++i) {
      CHECK(qkv.v[0][i] == direct_v[i]);
    }
  }

  SUBCASE("pooled level shapes follow the stage geometry") {
    const FocalLayerParams p = randomized_layer(7, {{1, 13}, {7, 7}}, 8, 2, 9);
    const Tensor x = random_map(56, 56, 8, 10);
    const ProjectedQKV qkv = project_qkv(pool_all_levels(x, p), p);
    REQUIRE(qkv.k.size() == 2);
    CHECK(qkv.k[0].shape() == std::vector<std::size_t>{56, 56, 8});
    CHECK(qkv.k[1].shape() == std::vector<std::size_t>{8, 8, 8});
  }
}

TEST_CASE("per-window gathering") {
  SUBCASE("key budget equals the sum of squared region sizes") {
    const GatherPlan plan =
        build_gather_plan(20, 20, 4, {{1, 8}, {2, 6}, {4, 5}});
    CHECK(plan.keys_per_window == 125);

    const GatherPlan tiny_stage1 = build_gather_plan(56, 56, 7, {{1, 13}, {7, 7}});
    CHECK(tiny_stage1.keys_per_window == 218);
  }

  SUBCASE("degenerate single window gathers the whole map") {
    const int s_p = 4;
    const FocalLayerParams p = randomized_layer(s_p, {{1, s_p}}, 2, 1, 11);
    const Tensor x = random_map(s_p, s_p, 2, 12);
    const GatherPlan plan = build_gather_plan(s_p, s_p, s_p, p.levels);
    const ProjectedQKV qkv = project_qkv(pool_all_levels(x, p), p);
    const WindowKV wkv = gather_window_kv(qkv.k, qkv.v, plan, 0);
    REQUIRE(wkv.k.shape() == std::vector<std::size_t>{16, 2});
    for (int g = 0; g < 16; ++g) {
      CHECK(wkv.valid[g] == 1);
      for (int c = 0; c < 2; ++c) {
        CHECK(wkv.k(g, c) == qkv.k[0](g / s_p, g % s_p, c));
      }
    }
  }

  SUBCASE("invalid slots carry zero rows and false flags") {
    const FocalLayerParams p = randomized_layer(4, {{1, 8}}, 2, 1, 13);
    const Tensor x = random_map(20, 20, 2, 14);
    const GatherPlan plan = build_gather_plan(20, 20, 4, p.levels);
    const ProjectedQKV qkv = project_qkv(pool_all_levels(x, p), p);
    const WindowKV wkv = gather_window_kv(qkv.k, qkv.v, plan, 0);
    int invalid = 0;
    for (int g = 0; g < plan.keys_per_window; ++g) {
      if (!wkv.valid[g]) {
        ++invalid;
        for (int c = 0; c < 2; ++c) {
          CHECK(wkv.k(g, c) == 0.0);
          CHECK(wkv.v(g, c) == 0.0);
        }
      }
    }
    CHECK(invalid == 28);
  }
}

TEST_CASE("relative position bias rows") {
  SUBCASE("single offset table") {
    FocalLayerParams p = make_focal_layer_shapes(1, {{1, 1}}, 2, 2);
    TruncNormal rng(15, 0.3);
    init_focal_layer(p, rng);
    p.bias_level1(0, 0, 0) = 0.5;
    p.bias_level1(1, 0, 0) = -0.25;
    const GatherPlan plan = build_gather_plan(1, 1, 1, p.levels);
    const Tensor rows = bias_rows(p, plan, 0);
    CHECK(rows(0, 0, 0) == 0.5);
    CHECK(rows(1, 0, 0) == -0.25);
  }

  SUBCASE("coarse-level bias is constant across the window's queries") {
    const FocalLayerParams p = randomized_layer(4, {{1, 4}, {2, 3}}, 2, 2, 16);
    const GatherPlan plan = build_gather_plan(8, 8, 4, p.levels);
    for (int w = 0; w < plan.grid.window_count(); ++w) {
      const Tensor rows = bias_rows(p, plan, w);
      const RegionSlot* slots = plan.window_slots(w);
      for (int h = 0; h < 2; ++h) {
        for (int g = plan.level_offset[1]; g < plan.level_offset[2]; ++g) {
          if (!slots[g].valid) continue;
          const double first = rows(h, 0, g);
          for (int q = 1; q < 16; ++q) {
            CHECK(rows(h, q, g) == first);
          }
        }
      }
    }
  }

  SUBCASE("expanded fine region uses the full table extent") {
    FocalLayerParams p = make_focal_layer_shapes(7, {{1, 13}}, 2, 1);
    CHECK(p.level1_bias_extent() == 19);
    TruncNormal rng(17, 0.3);
    init_focal_layer(p, rng);
    rng.fill(p.bias_level1);

    // Offsets between any key of the 13x13 region and any query of the 7x7
    // window span [-9, 9] on each axis.
    const GatherPlan plan = build_gather_plan(28, 28, 7, p.levels);
    const RegionSlot* slots = plan.window_slots(plan.grid.window_index(1, 1));
    int min_off = 100, max_off = -100;
    for (int g = 0; g < plan.keys_per_window; ++g) {
      for (int qr = 0; qr < 7; ++qr) {
        min_off = std::min(min_off, slots[g].row - (7 + qr));
        max_off = std::max(max_off, slots[g].row - (7 + qr));
      }
    }
    CHECK(min_off == -9);
    CHECK(max_off == 9);
    CHECK_NOTHROW(bias_rows(p, plan, plan.grid.window_index(1, 1)));
  }
}

TEST_CASE("focal attention forward") {
  SUBCASE("a single valid key passes its value through the projection") {
    FocalLayerParams p = randomized_layer(1, {{1, 1}}, 3, 1, 18);
    const Tensor x = random_map(1, 1, 3, 19);
    const AttentionOutput out = focal_attention_forward(x, p);
    const Tensor v = linear(x, p.v_weight, &p.v_bias);
    const Tensor expect = linear(v, p.out_weight, &p.out_bias);
    for (std::size_t i = 0; i < expect.size(); ++i) {
      CHECK(out.y[i] == doctest::Approx(expect[i]).epsilon(1e-14));
    }
    CHECK(out.probs(0, 0, 0, 0) == 1.0);
  }

  SUBCASE("identical values collapse any attention pattern") {
    FocalLayerParams p = randomized_layer(2, {{1, 2}, {2, 2}}, 4, 2, 20);
    // Mean pooling keeps a constant map constant across levels.
    for (std::size_t l = 1; l < p.levels.size(); ++l) {
      if (p.pool[l].present()) {
        const int s_w = p.levels[l].s_w;
        for (std::size_t i = 0; i < p.pool[l].weight.size(); ++i) {
          p.pool[l].weight[i] = 1.0 / (s_w * s_w);
        }
        p.pool[l].bias[0] = 0.0;
      }
    }
    for (std::size_t i = 0; i < p.bias_level1.size(); ++i) p.bias_level1[i] = 0.0;
    for (std::size_t l = 1; l < p.levels.size(); ++l) {
      for (std::size_t i = 0; i < p.bias_coarse[l].size(); ++i) {
        p.bias_coarse[l][i] = 0.0;
      }
    }
    Tensor x({4, 4, 4});
    for (std::size_t cell = 0; cell < 16; ++cell) {
      for (std::size_t c = 0; c < 4; ++c) x[cell * 4 + c] = 0.3 * (c + 1.0);
    }
    const AttentionOutput out = focal_attention_forward(x, p);
    Tensor token({4});
    for (std::size_t c = 0; c < 4; ++c) token[c] = 0.3 * (c + 1.0);
    const Tensor v = linear(token, p.v_weight, &p.v_bias);
    const Tensor expect = linear(v, p.out_weight, &p.out_bias);
    for (std::size_t cell = 0; cell < 16; ++cell) {
      for (std::size_t c = 0; c < 4; ++c) {
        CHECK(out.y[cell * 4 + c] == doctest::Approx(expect[c]).epsilon(1e-12));
      }
    }
  }

  SUBCASE("matches the scalar-loop reference on randomized instances") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
      worst = std::max(worst, oracle::equivalence_max_delta(seed));
    }
    CHECK(worst < 1e-12);
  }

  SUBCASE("probabilities over valid keys sum to one per query row") {
    const FocalLayerParams p = randomized_layer(4, {{1, 6}, {3, 3}}, 4, 2, 21);
    const Tensor x = random_map(10, 7, 4, 22);  // padded grid
    const AttentionOutput out = focal_attention_forward(x, p);
    const GatherPlan& plan = out.plan;
    for (int w = 0; w < plan.grid.window_count(); ++w) {
      const RegionSlot* slots = plan.window_slots(w);
      const int r0 = (w / plan.grid.cols) * 4;
      const int c0 = (w % plan.grid.cols) * 4;
      for (int h = 0; h < 2; ++h) {
        for (int q = 0; q < 16; ++q) {
          const int r = r0 + q / 4, c = c0 + q % 4;
          double sum = 0.0;
          for (int g = 0; g < plan.keys_per_window; ++g) {
            const double pv = out.probs(w, h, q, g);
            if (!slots[g].valid) CHECK(pv == 0.0);
            sum += pv;
          }
          if (r < 10 && c < 7) {
            CHECK(std::abs(sum - 1.0) < 1e-12);
          } else {
            CHECK(sum == 0.0);  // padded query slots stay empty
          }
        }
      }
    }
  }

  SUBCASE("windows are independent of tokens outside their gathered region") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 10; ++trial) {
      const oracle::LayerCase c = oracle::random_layer_case(900 + trial);
      const int m = static_cast<int>(c.x.extent(0));
      const int n = static_cast<int>(c.x.extent(1));
      const int d = static_cast<int>(c.x.extent(2));
      const AttentionOutput base = focal_attention_forward(c.x, c.params);
      const GatherPlan& plan = base.plan;

      const int w = static_cast<int>(rng() % plan.grid.window_count());
      // Tokens covered by any gathered cell of window w, at any level.
      std::vector<std::uint8_t> covered(static_cast<std::size_t>(m) * n, 0);
      const RegionSlot* slots = plan.window_slots(w);
      for (std::size_t l = 0; l < plan.levels.size(); ++l) {
        const int s_w = plan.levels[l].s_w;
        for (int g = plan.level_offset[l]; g < plan.level_offset[l + 1]; ++g) {
          if (!slots[g].valid) continue;
          for (int u = 0; u < s_w; ++u) {
            for (int v = 0; v < s_w; ++v) {
              const int rr = slots[g].row * s_w + u;
              const int cc = slots[g].col * s_w + v;
              if (rr < m && cc < n) covered[rr * n + cc] = 1;
            }
          }
        }
      }
      // The window's own queries must stay untouched as well.
      const int r0 = (w / plan.grid.cols) * plan.grid.s_p;
      const int c0 = (w % plan.grid.cols) * plan.grid.s_p;
      for (int qr = 0; qr < plan.grid.s_p; ++qr) {
        for (int qc = 0; qc < plan.grid.s_p; ++qc) {
          const int rr = r0 + qr, cc = c0 + qc;
          if (rr < m && cc < n) covered[rr * n + cc] = 1;
        }
      }

      int perturbed = -1;
      for (int probe = 0; probe < 64; ++probe) {
        const int cand = static_cast<int>(rng() % (m * n));
        if (!covered[cand]) {
          perturbed = cand;
          break;
        }
      }
      if (perturbed < 0) continue;  // window sees everything; nothing to test

      Tensor poked = c.x;
      for (int ch = 0; ch < d; ++ch) {
        poked[static_cast<std::size_t>(perturbed) * d + ch] += 0.731 + ch;
      }
      const AttentionOutput after = focal_attention_forward(poked, c.params);
      for (int qr = 0; qr < plan.grid.s_p; ++qr) {
        for (int qc = 0; qc < plan.grid.s_p; ++qc) {
          const int rr = r0 + qr, cc = c0 + qc;
          if (rr >= m || cc >= n) continue;
          for (int ch = 0; ch < d; ++ch) {
            CHECK(base.y(rr, cc, ch) == after.y(rr, cc, ch));
          }
        }
      }
    }
  }
}

TEST_CASE("focal attention backward") {
  SUBCASE("zero upstream gives exactly zero gradients") {
    const oracle::LayerCase c = oracle::random_small_case(31);
    const Tensor upstream(c.x.shape());
    const FocalAttentionGrads g =
        focal_attention_backward(c.x, c.params, upstream);
    for (std::size_t i = 0; i < g.x.size(); ++i) CHECK(g.x[i] == 0.0);
    for (std::size_t i = 0; i < g.q_weight.size(); ++i) {
      CHECK(g.q_weight[i] == 0.0);
    }
    for (std::size_t i = 0; i < g.bias_level1.size(); ++i) {
      CHECK(g.bias_level1[i] == 0.0);
    }
  }

  SUBCASE("value-path gradient is probs^T times the projected upstream") {
    // Single window; f_v is the identity and f_q, f_k are constant, so the
    // input gradient flows through the value path alone.
    FocalLayerParams p = randomized_layer(2, {{1, 2}}, 2, 1, 32);
    for (int o = 0; o < 2; ++o) {
      for (int i = 0; i < 2; ++i) {
        p.q_weight(o, i) = 0.0;
        p.k_weight(o, i) = 0.0;
        p.v_weight(o, i) = o == i ? 1.0 : 0.0;
      }
      p.v_bias[o] = 0.0;
    }
    const Tensor x = random_map(2, 2, 2, 33);
    Tensor upstream(x.shape());
    TruncNormal rng(34, 1.0);
    rng.fill(upstream);

    const AttentionOutput fwd = focal_attention_forward(x, p);
    const FocalAttentionGrads g = focal_attention_backward(x, p, upstream);

    // dL/dV[key] = sum_q probs[q, key] * (upstream_q . W_out column block)
    for (int key = 0; key < 4; ++key) {
      for (int ch = 0; ch < 2; ++ch) {
        double expect = 0.0;
        for (int q = 0; q < 4; ++q) {
          double dctx = 0.0;
          for (int o = 0; o < 2; ++o) {
            dctx += upstream(q / 2, q % 2, o) * p.out_weight(o, ch);
          }
          expect += fwd.probs(0, 0, q, key) * dctx;
        }
        const int kr = key / 2, kc = key % 2;
        CHECK(g.x(kr, kc, ch) == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }

  SUBCASE("matches central finite differences") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      worst = std::max(worst, oracle::gradcheck_max_rel_error(seed));
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("transformer layer forward") {
  SUBCASE("zero output projections make the block an identity") {
    FocalLayerParams p = randomized_layer(2, {{1, 2}, {2, 2}}, 4, 2, 41);
    for (std::size_t i = 0; i < p.out_weight.size(); ++i) p.out_weight[i] = 0.0;
    for (std::size_t i = 0; i < p.out_bias.size(); ++i) p.out_bias[i] = 0.0;
    for (std::size_t i = 0; i < p.mlp_w2.size(); ++i) p.mlp_w2[i] = 0.0;
    for (std::size_t i = 0; i < p.mlp_b2.size(); ++i) p.mlp_b2[i] = 0.0;
    const Tensor x = random_map(4, 6, 4, 42);
    const Tensor y = focal_layer_forward(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
  }

  SUBCASE("output shape equals input shape on the first-stage geometry") {
    const FocalLayerParams p = randomized_layer(7, {{1, 13}, {7, 7}}, 8, 2, 43);
    const Tensor x = random_map(56, 56, 8, 44);
    const Tensor y = focal_layer_forward(x, p);
    CHECK(y.same_shape(x));
  }

  SUBCASE("equals the manual composition of its sub-operations") {
    const FocalLayerParams p = randomized_layer(2, {{1, 3}, {2, 2}}, 4, 2, 45);
    const Tensor x = random_map(5, 4, 4, 46);

    const Tensor n1 = layer_norm(x, p.ln1_gamma, p.ln1_beta, kLayerNormEps);
    const AttentionOutput attn = focal_attention_forward(n1, p);
    Tensor mid(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) mid[i] = x[i] + attn.y[i];
    const Tensor n2 = layer_norm(mid, p.ln2_gamma, p.ln2_beta, kLayerNormEps);
    Tensor hidden = linear(n2, p.mlp_w1, &p.mlp_b1);
    hidden = gelu(hidden);
    const Tensor mlp = linear(hidden, p.mlp_w2, &p.mlp_b2);
    Tensor expect(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) expect[i] = mid[i] + mlp[i];

    const Tensor y = focal_layer_forward(x, p);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == expect[i]);
  }
}

TEST_CASE("attention mass breakdown") {
  SUBCASE("components always total one") {
    for (std::uint64_t seed = 100; seed < 106; ++seed) {
      const oracle::LayerCase c = oracle::random_layer_case(seed);
      const AttentionOutput out = focal_attention_forward(c.x, c.params);
      const AttentionBreakdown bd = attention_breakdown(out.probs, out.plan);
      CHECK(std::abs(bd.inside_window + bd.surround_local + bd.global_pooled -
                     1.0) < 1e-9);
    }
  }

  SUBCASE("window-only attention puts all mass inside") {
    const FocalLayerParams p = randomized_layer(4, {{1, 4}}, 2, 1, 51);
    const Tensor x = random_map(8, 8, 2, 52);
    const AttentionOutput out = focal_attention_forward(x, p);
    const AttentionBreakdown bd = attention_breakdown(out.probs, out.plan);
    CHECK(bd.inside_window == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bd.surround_local == 0.0);
    CHECK(bd.global_pooled == 0.0);
  }

  SUBCASE("matches a manual per-slot classification") {
    const oracle::LayerCase c = oracle::random_layer_case(333);
    const AttentionOutput out = focal_attention_forward(c.x, c.params);
    const GatherPlan& plan = out.plan;
    const int s_p = plan.grid.s_p;
    const int m = static_cast<int>(c.x.extent(0));
    const int n = static_cast<int>(c.x.extent(1));

    double inside = 0.0, surround = 0.0, global = 0.0;
    long long rows = 0;
    for (int w = 0; w < plan.grid.window_count(); ++w) {
      const RegionSlot* slots = plan.window_slots(w);
      const int r0 = (w / plan.grid.cols) * s_p;
      const int c0 = (w % plan.grid.cols) * s_p;
      for (int h = 0; h < c.params.n_heads; ++h) {
        for (int q = 0; q < s_p * s_p; ++q) {
          if (r0 + q / s_p >= m || c0 + q % s_p >= n) continue;
          ++rows;
          for (int g = 0; g < plan.keys_per_window; ++g) {
            const double pv = out.probs(w, h, q, g);
            if (plan.level_of_slot(g) > 0) {
              global += pv;
            } else if (slots[g].row >= r0 && slots[g].row < r0 + s_p &&
                       slots[g].col >= c0 && slots[g].col < c0 + s_p) {
              inside += pv;
            } else {
              surround += pv;
            }
          }
        }
      }
    }
    const AttentionBreakdown bd = attention_breakdown(out.probs, out.plan);
    CHECK(std::abs(bd.inside_window - inside / rows) < 1e-12);
    CHECK(std::abs(bd.surround_local - surround / rows) < 1e-12);
    CHECK(std::abs(bd.global_pooled - global / rows) < 1e-12);
  }
}

TEST_CASE("full-attention reference basics") {
  SUBCASE("a single token reproduces its projected value") {
    const FocalLayerParams p = randomized_layer(1, {{1, 1}}, 4, 2, 61);
    Tensor token({1, 4});
    TruncNormal rng(62, 1.0);
    rng.fill(token);
    const Tensor out = oracle::full_attention_reference(token, p);
    const Tensor v = linear(token, p.v_weight, &p.v_bias);
    const Tensor expect = linear(v, p.out_weight, &p.out_bias);
    for (std::size_t i = 0; i < expect.size(); ++i) {
      CHECK(out[i] == doctest::Approx(expect[i]).epsilon(1e-14));
    }
  }

  SUBCASE("identical tokens give identical outputs") {
    const FocalLayerParams p = randomized_layer(1, {{1, 1}}, 4, 2, 63);
    Tensor tokens({6, 4});
    for (std::size_t t = 0; t < 6; ++t) {
      for (std::size_t c = 0; c < 4; ++c) tokens(t, c) = 0.1 * (c + 1.0);
    }
    const Tensor out = oracle::full_attention_reference(tokens, p);
    for (std::size_t t = 1; t < 6; ++t) {
      for (std::size_t c = 0; c < 4; ++c) {
        CHECK(out(t, c) == doctest::Approx(out(0, c)).epsilon(1e-13));
      }
    }
  }
}

TEST_CASE("full-attention degeneracy") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed + 77);
    const int m = 2 + static_cast<int>(rng() % 6);
    const int n = 2 + static_cast<int>(rng() % 6);
    const int d = 4;
    const int s_p = std::max(m, n);
    FocalLayerParams p =
        randomized_layer(s_p, {{1, 2 * std::max(m, n)}}, d, 2, seed + 78);
    for (std::size_t i = 0; i < p.bias_level1.size(); ++i) p.bias_level1[i] = 0.0;

    const Tensor x = random_map(m, n, d, seed + 79);
    const AttentionOutput focal = focal_attention_forward(x, p);

    Tensor tokens({static_cast<std::size_t>(m) * n, static_cast<std::size_t>(d)});
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = x[i];
    const Tensor full = oracle::full_attention_reference(tokens, p);

    for (std::size_t i = 0; i < full.size(); ++i) {
      CHECK(std::abs(focal.y[i] - full[i]) < 1e-10);
    }
  }
}
