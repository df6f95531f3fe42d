#pragma once

#include <cstdint>
#include <vector>

namespace focal {

// One granularity tier: tokens are pooled over s_w x s_w sub-windows and a
// square region of s_r x s_r pooled cells is attended.
struct FocalLevel {
  int s_w = 1;  // sub-window size in tokens
  int s_r = 1;  // region size in sub-windows
};

inline int floor_div(int a, int b) {
  int q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

inline int ceil_div(int a, int b) { return -floor_div(-a, b); }

// Pooled-grid extent of a map axis at sub-window size s_w.
inline int pooled_extent(int map_extent, int s_w) {
  return ceil_div(map_extent, s_w);
}

// Query-side tiling of a map into s_p x s_p windows. Maps whose extents are
// not multiples of s_p are zero-padded up to the next multiple.
struct WindowGrid {
  int s_p = 0;
  int rows = 0, cols = 0;              // window counts
  int map_rows = 0, map_cols = 0;      // original extents
  int padded_rows = 0, padded_cols = 0;

  int window_count() const { return rows * cols; }
  int window_index(int wr, int wc) const { return wr * cols + wc; }
};

WindowGrid partition_windows(int map_rows, int map_cols, int s_p);

// A pooled-grid coordinate attended by a window; invalid slots lie outside
// the pooled grid and are masked downstream.
struct RegionSlot {
  int row = 0;
  int col = 0;
  bool valid = false;
};

// The s_r^2 pooled cells window (window_row, window_col) attends at `level`,
// row-major over the region. The region is centered on the window's pooled
// footprint; when the spare extent is odd the extra cell goes bottom/right.
std::vector<RegionSlot> focal_region_coords(const WindowGrid& grid,
                                            int window_row, int window_col,
                                            FocalLevel level);

// Precomputed per-window key/value index map. Slots are ordered level-major,
// then row-major within each level's region.
struct GatherPlan {
  WindowGrid grid;
  std::vector<FocalLevel> levels;
  std::vector<int> pooled_rows, pooled_cols;  // per level
  std::vector<int> level_offset;              // per level, plus total at back
  int keys_per_window = 0;                    // s = sum_l (s_r^l)^2
  std::vector<RegionSlot> slots;              // window_count * keys_per_window

  const RegionSlot* window_slots(int window) const {
    return slots.data() +
           static_cast<std::size_t>(window) * keys_per_window;
  }
  int level_of_slot(int slot) const;
};

GatherPlan build_gather_plan(int map_rows, int map_cols, int s_p,
                             const std::vector<FocalLevel>& levels);

struct ReceptiveField {
  long long area = 0;    // distinct fine tokens reachable by a centered query
  long long tokens = 0;  // attended entries, sum_l (s_r^l)^2
};

ReceptiveField receptive_field(const std::vector<FocalLevel>& levels);

// Exact MAC counts for one focal attention layer on an M x N x d map:
// pooling over the padded sub-window grids, and QK^T plus probs*V over the
// full gathered slot set for every real query token.
struct AttentionCost {
  long long pool_macs = 0;
  long long attn_macs = 0;
};

AttentionCost attention_cost(int map_rows, int map_cols, int dim, int s_p,
                             const std::vector<FocalLevel>& levels);

}  // namespace focal
