#include "focal/geometry.hpp"

#include <set>
#include <stdexcept>
#include <string>
#include <utility>

namespace focal {

namespace {

void check_levels(const std::vector<FocalLevel>& levels) {
  if (levels.empty()) throw std::invalid_argument("levels must be non-empty");
  for (const FocalLevel& l : levels) {
    if (l.s_w < 1 || l.s_r < 1) {
      throw std::invalid_argument("focal level sizes must be >= 1");
    }
  }
}

}  // namespace

WindowGrid partition_windows(int map_rows, int map_cols, int s_p) {
  if (map_rows < 1 || map_cols < 1 || s_p < 1) {
    throw std::invalid_argument("partition_windows: extents and s_p must be >= 1");
  }
  WindowGrid g;
  g.s_p = s_p;
  g.map_rows = map_rows;
  g.map_cols = map_cols;
  g.rows = ceil_div(map_rows, s_p);
  g.cols = ceil_div(map_cols, s_p);
  g.padded_rows = g.rows * s_p;
  g.padded_cols = g.cols * s_p;
  return g;
}

std::vector<RegionSlot> focal_region_coords(const WindowGrid& grid,
                                            int window_row, int window_col,
                                            FocalLevel level) {
  if (window_row < 0 || window_row >= grid.rows || window_col < 0 ||
      window_col >= grid.cols) {
    throw std::out_of_range("focal_region_coords: window (" +
                            std::to_string(window_row) + ", " +
                            std::to_string(window_col) + ") outside " +
                            std::to_string(grid.rows) + "x" +
                            std::to_string(grid.cols) + " grid");
  }
  if (level.s_w < 1 || level.s_r < 1) {
    throw std::invalid_argument("focal level sizes must be >= 1");
  }
  const int pooled_r = pooled_extent(grid.map_rows, level.s_w);
  const int pooled_c = pooled_extent(grid.map_cols, level.s_w);

  // Pooled footprint of the window, then center the s_r region on it.
  auto region_start = [&](int first_token) {
    const int f0 = floor_div(first_token, level.s_w);
    const int f1 = ceil_div(first_token + grid.s_p, level.s_w);
    const int spare = level.s_r - (f1 - f0);
    return f0 - floor_div(spare, 2);
  };
  const int r_start = region_start(window_row * grid.s_p);
  const int c_start = region_start(window_col * grid.s_p);

  std::vector<RegionSlot> out(static_cast<std::size_t>(level.s_r) * level.s_r);
  std::size_t k = 0;
  for (int i = 0; i < level.s_r; ++i) {
    for (int j = 0; j < level.s_r; ++j, ++k) {
      const int r = r_start + i;
      const int c = c_start + j;
      out[k].row = r;
      out[k].col = c;
      out[k].valid = r >= 0 && r < pooled_r && c >= 0 && c < pooled_c;
    }
  }
  return out;
}

int GatherPlan::level_of_slot(int slot) const {
  for (std::size_t l = 0; l + 1 < level_offset.size(); ++l) {
    if (slot < level_offset[l + 1]) return static_cast<int>(l);
  }
  throw std::out_of_range("slot index outside gather plan");
}

GatherPlan build_gather_plan(int map_rows, int map_cols, int s_p,
                             const std::vector<FocalLevel>& levels) {
  check_levels(levels);
  GatherPlan plan;
  plan.grid = partition_windows(map_rows, map_cols, s_p);
  plan.levels = levels;
  plan.level_offset.push_back(0);
  for (const FocalLevel& l : levels) {
    plan.pooled_rows.push_back(pooled_extent(map_rows, l.s_w));
    plan.pooled_cols.push_back(pooled_extent(map_cols, l.s_w));
    plan.level_offset.push_back(plan.level_offset.back() + l.s_r * l.s_r);
  }
  plan.keys_per_window = plan.level_offset.back();
  plan.slots.resize(static_cast<std::size_t>(plan.grid.window_count()) *
                    plan.keys_per_window);

  for (int wr = 0; wr < plan.grid.rows; ++wr) {
    for (int wc = 0; wc < plan.grid.cols; ++wc) {
      RegionSlot* dst =
          plan.slots.data() + static_cast<std::size_t>(plan.grid.window_index(
                                  wr, wc)) *
                                  plan.keys_per_window;
      for (std::size_t l = 0; l < levels.size(); ++l) {
        auto coords = focal_region_coords(plan.grid, wr, wc, levels[l]);
        std::copy(coords.begin(), coords.end(), dst + plan.level_offset[l]);
      }
    }
  }
  return plan;
}

ReceptiveField receptive_field(const std::vector<FocalLevel>& levels) {
  check_levels(levels);
  ReceptiveField rf;
  std::set<std::pair<int, int>> covered;
  for (const FocalLevel& level : levels) {
    rf.tokens += static_cast<long long>(level.s_r) * level.s_r;
    // Single centered query token at the origin; its footprint is one cell.
    const int start = -floor_div(level.s_r - 1, 2);
    for (int i = 0; i < level.s_r; ++i) {
      for (int j = 0; j < level.s_r; ++j) {
        const int cell_r = start + i;
        const int cell_c = start + j;
        for (int u = 0; u < level.s_w; ++u) {
          for (int v = 0; v < level.s_w; ++v) {
            covered.emplace(cell_r * level.s_w + u, cell_c * level.s_w + v);
          }
        }
      }
    }
  }
  rf.area = static_cast<long long>(covered.size());
  return rf;
}

AttentionCost attention_cost(int map_rows, int map_cols, int dim, int s_p,
                             const std::vector<FocalLevel>& levels) {
  if (map_rows < 1 || map_cols < 1 || dim < 1 || s_p < 1) {
    throw std::invalid_argument("attention_cost: arguments must be >= 1");
  }
  check_levels(levels);
  AttentionCost cost;
  long long keys = 0;
  for (const FocalLevel& l : levels) {
    keys += static_cast<long long>(l.s_r) * l.s_r;
    if (l.s_w > 1) {
      cost.pool_macs += static_cast<long long>(pooled_extent(map_rows, l.s_w)) *
                        pooled_extent(map_cols, l.s_w) * l.s_w * l.s_w * dim;
    }
  }
  cost.attn_macs =
      2LL * map_rows * map_cols * dim * keys;  // QK^T plus probs*V
  return cost;
}

}  // namespace focal
