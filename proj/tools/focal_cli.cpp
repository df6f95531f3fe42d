// Command-line front end: model inspection, geometry dumps, verification
// runs and bias-table workflows, reporting JSON on stdout (CSV for tabular
// data). Exit codes: 0 success, 1 verification failure, 2 usage error.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "focal/model.hpp"
#include "focal/oracle.hpp"
#include "focal/serialize.hpp"

using nlohmann::ordered_json;

namespace {

using Clock = std::chrono::steady_clock;

struct Timer {
  Clock::time_point start = Clock::now();
  long long ms() const {
    return std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() -
                                                                 start)
        .count();
  }
};

std::uint64_t default_seed() {
  if (const char* env = std::getenv("FOCAL_SEED")) {
    return std::strtoull(env, nullptr, 10);
  }
  return 0;
}

std::vector<int> parse_int_list(const std::string& text, char sep = ',') {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

// "1:8,2:6,4:5" -> levels {s_w:s_r, ...}
std::vector<focal::FocalLevel> parse_levels(const std::string& text) {
  std::vector<focal::FocalLevel> levels;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw CLI::ValidationError("--levels", "expected s_w:s_r pairs");
    }
    levels.push_back({std::stoi(item.substr(0, colon)),
                      std::stoi(item.substr(colon + 1))});
  }
  if (levels.empty()) {
    throw CLI::ValidationError("--levels", "no levels given");
  }
  return levels;
}

struct ModelSelection {
  std::string preset;
  std::string config_path;
  std::string weights_path;

  focal::ModelConfig resolve_config() const {
    if (!config_path.empty()) return focal::load_config_file(config_path);
    if (!preset.empty()) return focal::preset_config(preset);
    throw CLI::ValidationError("--model", "need --model, --config or --weights");
  }
};

void add_model_flags(CLI::App* cmd, ModelSelection& sel, bool with_weights = false) {
  cmd->add_option("--model", sel.preset, "preset name: tiny, small or base");
  cmd->add_option("--config", sel.config_path, "path to a JSON model config");
  if (with_weights) {
    cmd->add_option("--weights", sel.weights_path,
                    "load a saved weight container instead of building");
  }
}

void emit_report(const std::string& command, const std::string& digest,
                 std::uint64_t seed, const Timer& timer, ordered_json result) {
  ordered_json report;
  report["command"] = command;
  report["config_digest"] = digest;
  report["seed"] = seed;
  report["wall_ms"] = timer.ms();
  report["result"] = std::move(result);
  std::cout << report.dump(2) << "\n";
}

std::string hash_digest_of(const std::string& text) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(focal::fnv1a64(text)));
  return buf;
}

std::uint64_t logits_digest(const focal::Tensor& logits) {
  std::uint64_t hash = 0xCBF29CE484222325ULL;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double v = logits[i];
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(&v);
    for (std::size_t b = 0; b < sizeof(double); ++b) {
      hash ^= bytes[b];
      hash *= 0x100000001B3ULL;
    }
  }
  return hash;
}

// Tabular outputs go to --out when given (JSON envelope on stdout), or to
// stdout prefixed with "# " metadata lines.
void emit_csv(const std::string& command, const std::string& digest,
              std::uint64_t seed, const Timer& timer, const std::string& csv,
              const std::string& out_path, ordered_json result) {
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot open " + out_path);
    out << csv;
    result["csv_path"] = out_path;
    emit_report(command, digest, seed, timer, std::move(result));
  } else {
    std::cout << "# command=" << command << " seed=" << seed
              << " config_digest=" << digest << "\n"
              << csv;
  }
}

int run_paramcount(const ModelSelection& sel, std::uint64_t seed) {
  Timer timer;
  const focal::ModelConfig cfg = sel.resolve_config();
  const focal::Model model = focal::build_model(cfg, seed);
  ordered_json breakdown = ordered_json::object();
  long long total = 0;
  focal::for_each_tensor(model, [&](const std::string& name, const focal::Tensor& t) {
    const std::string module = name.substr(0, name.find('.'));
    breakdown[module] = breakdown.value(module, 0LL) + static_cast<long long>(t.size());
    total += static_cast<long long>(t.size());
  });
  ordered_json result;
  result["total"] = total;
  result["per_module"] = std::move(breakdown);
  emit_report("paramcount", focal::config_digest(cfg), seed, timer,
              std::move(result));
  return 0;
}

int run_flops(const ModelSelection& sel, std::uint64_t seed, int input) {
  Timer timer;
  const focal::ModelConfig cfg = sel.resolve_config();
  const focal::Model model = focal::build_model(cfg, seed);
  const focal::ModelFlops flops = focal::count_flops(model, input, input);
  ordered_json result;
  result["input"] = input;
  result["total_macs"] = flops.total;
  result["per_stage"] = flops.stage_macs;
  result["head_macs"] = flops.head_macs;
  emit_report("flops", focal::config_digest(cfg), seed, timer, std::move(result));
  return 0;
}

int run_geometry(const ModelSelection& sel, std::uint64_t seed,
                 const std::string& map_spec, int s_p,
                 const std::string& levels_spec, const std::string& window_spec,
                 int stage, int input, const std::string& out_path) {
  Timer timer;
  int rows = 0, cols = 0;
  std::vector<focal::FocalLevel> levels;
  std::string digest;
  if (!map_spec.empty()) {
    const auto map = parse_int_list(map_spec);
    if (map.size() != 2) throw CLI::ValidationError("--map", "expected M,N");
    rows = map[0];
    cols = map[1];
    if (levels_spec.empty()) {
      throw CLI::ValidationError("--levels", "required with --map");
    }
    levels = parse_levels(levels_spec);
    digest = hash_digest_of("geometry:" + map_spec + ":" + std::to_string(s_p) +
                            ":" + levels_spec);
  } else {
    const focal::ModelConfig cfg = sel.resolve_config();
    const auto sizes = focal::stage_output_sizes(cfg, input, input);
    if (stage < 0 || stage >= static_cast<int>(sizes.size())) {
      throw CLI::ValidationError("--stage", "stage index out of range");
    }
    rows = sizes[stage].first;
    cols = sizes[stage].second;
    s_p = cfg.stages[stage].s_p;
    levels = cfg.stages[stage].levels;
    digest = focal::config_digest(cfg);
  }

  const focal::GatherPlan plan = focal::build_gather_plan(rows, cols, s_p, levels);
  std::optional<std::pair<int, int>> only_window;
  if (!window_spec.empty()) {
    const auto w = parse_int_list(window_spec);
    if (w.size() != 2) throw CLI::ValidationError("--window", "expected R,C");
    only_window = {w[0], w[1]};
  }

  std::ostringstream csv;
  csv << "window_row,window_col,level,slot,pooled_row,pooled_col,valid\n";
  long long data_rows = 0;
  for (int wr = 0; wr < plan.grid.rows; ++wr) {
    for (int wc = 0; wc < plan.grid.cols; ++wc) {
      if (only_window && (wr != only_window->first || wc != only_window->second)) {
        continue;
      }
      const focal::RegionSlot* slots =
          plan.window_slots(plan.grid.window_index(wr, wc));
      for (std::size_t l = 0; l < plan.levels.size(); ++l) {
        for (int g = plan.level_offset[l]; g < plan.level_offset[l + 1]; ++g) {
          csv << wr << "," << wc << "," << l << "," << g - plan.level_offset[l]
              << "," << slots[g].row << "," << slots[g].col << ","
              << (slots[g].valid ? 1 : 0) << "\n";
          ++data_rows;
        }
      }
    }
  }
  ordered_json result;
  result["map"] = {rows, cols};
  result["s_p"] = s_p;
  result["keys_per_window"] = plan.keys_per_window;
  result["rows_emitted"] = data_rows;
  emit_csv("geometry", digest, seed, timer, csv.str(), out_path,
           std::move(result));
  return 0;
}

int run_receptive_field(std::uint64_t seed, const std::string& levels_spec,
                        const std::string& out_path) {
  Timer timer;
  const auto levels = parse_levels(levels_spec);
  std::ostringstream csv;
  csv << "levels,tokens,focal_area,standard_area\n";
  std::vector<focal::FocalLevel> prefix;
  for (const focal::FocalLevel& level : levels) {
    prefix.push_back(level);
    const focal::ReceptiveField rf = focal::receptive_field(prefix);
    // Standard attention spends the same token budget at the finest grain.
    csv << prefix.size() << "," << rf.tokens << "," << rf.area << ","
        << rf.tokens << "\n";
  }
  ordered_json result;
  result["levels"] = levels_spec;
  result["rows_emitted"] = levels.size();
  emit_csv("receptive-field", hash_digest_of("receptive:" + levels_spec), seed,
           timer, csv.str(), out_path, std::move(result));
  return 0;
}

int run_forward(const ModelSelection& sel, std::uint64_t seed, int input,
                int threads) {
  Timer timer;
  focal::Model model = sel.weights_path.empty()
                           ? focal::build_model(sel.resolve_config(), seed)
                           : focal::load_model(sel.weights_path);
  focal::set_thread_count(threads);
  focal::Tensor image({static_cast<std::size_t>(input),
                       static_cast<std::size_t>(input),
                       static_cast<std::size_t>(model.config.in_channels)});
  focal::TruncNormal rng(seed ^ 0x5DEECE66DULL, 1.0);
  rng.fill(image);

  const Timer fwd_timer;
  const focal::ForwardResult out = focal::forward_features(model, image);
  const long long fwd_ms = fwd_timer.ms();
  focal::set_thread_count(1);

  ordered_json result;
  char digest[17];
  std::snprintf(digest, sizeof(digest), "%016llx",
                static_cast<unsigned long long>(logits_digest(out.logits)));
  result["logits_digest"] = digest;
  double sum = 0.0;
  for (std::size_t i = 0; i < out.logits.size(); ++i) sum += out.logits[i];
  result["logits_sum"] = sum;
  result["logits_head"] = std::vector<double>(
      out.logits.data(),
      out.logits.data() + std::min<std::size_t>(4, out.logits.size()));
  ordered_json shapes = ordered_json::array();
  for (const focal::Tensor& map : out.stage_maps) {
    shapes.push_back({map.extent(0), map.extent(1), map.extent(2)});
  }
  result["stage_shapes"] = std::move(shapes);
  result["threads"] = threads;
  result["forward_ms"] = fwd_ms;
  emit_report("forward", focal::config_digest(model.config), seed, timer,
              std::move(result));
  return 0;
}

int run_equivalence(std::uint64_t seed, int cases) {
  Timer timer;
  double worst = 0.0;
  ordered_json deltas = ordered_json::array();
  for (int i = 0; i < cases; ++i) {
    const double delta = focal::oracle::equivalence_max_delta(seed + i);
    deltas.push_back(delta);
    worst = std::max(worst, delta);
  }
  const bool ok = worst < 1e-12;
  ordered_json result;
  result["cases"] = cases;
  result["max_delta"] = worst;
  result["tolerance"] = 1e-12;
  result["per_case"] = std::move(deltas);
  result["status"] = ok ? "pass" : "fail";
  emit_report("equivalence", hash_digest_of("equivalence"), seed, timer,
              std::move(result));
  return ok ? 0 : 1;
}

int run_gradcheck(std::uint64_t seed, int cases) {
  Timer timer;
  double worst = 0.0;
  for (int i = 0; i < cases; ++i) {
    worst = std::max(worst,
                     focal::oracle::gradcheck_max_rel_error(seed + i));
  }
  const bool ok = worst < 1e-5;
  ordered_json result;
  result["cases"] = cases;
  result["max_rel_error"] = worst;
  result["tolerance"] = 1e-5;
  result["status"] = ok ? "pass" : "fail";
  emit_report("gradcheck", hash_digest_of("gradcheck"), seed, timer,
              std::move(result));
  return ok ? 0 : 1;
}

int run_attn_stats(const ModelSelection& sel, std::uint64_t seed, int input,
                   const std::string& out_path) {
  Timer timer;
  const focal::ModelConfig cfg = sel.resolve_config();
  const focal::Model model = focal::build_model(cfg, seed);
  focal::Tensor image({static_cast<std::size_t>(input),
                       static_cast<std::size_t>(input),
                       static_cast<std::size_t>(cfg.in_channels)});
  focal::TruncNormal rng(seed ^ 0xA5A5A5A5ULL, 1.0);
  rng.fill(image);

  std::vector<focal::LayerStats> stats;
  focal::forward_features(model, image, &stats);

  std::ostringstream csv;
  csv << "stage,layer,inside_window,surround_local,global_pooled\n";
  for (const focal::LayerStats& row : stats) {
    csv << row.stage << "," << row.layer << "," << row.breakdown.inside_window
        << "," << row.breakdown.surround_local << ","
        << row.breakdown.global_pooled << "\n";
  }
  ordered_json result;
  result["layers"] = stats.size();
  result["input"] = input;
  emit_csv("attn-stats", focal::config_digest(cfg), seed, timer, csv.str(),
           out_path, std::move(result));
  return 0;
}

int run_bias_dump(const ModelSelection& sel, std::uint64_t seed,
                  const std::string& out_dir) {
  Timer timer;
  const focal::ModelConfig cfg = sel.resolve_config();
  focal::Model model = sel.weights_path.empty()
                           ? focal::build_model(cfg, seed)
                           : focal::load_model(sel.weights_path);
  std::filesystem::create_directories(out_dir);

  auto dump_table = [&](const std::string& name, const focal::Tensor& table) {
    std::ofstream out(out_dir + "/" + name + ".csv");
    out << "head,row,col,value\n";
    for (std::size_t h = 0; h < table.extent(0); ++h) {
      for (std::size_t r = 0; r < table.extent(1); ++r) {
        for (std::size_t c = 0; c < table.extent(2); ++c) {
          out << h << "," << r << "," << c << "," << table(h, r, c) << "\n";
        }
      }
    }
  };

  ordered_json files = ordered_json::array();
  for (std::size_t s = 0; s < model.stages.size(); ++s) {
    for (std::size_t l = 0; l < model.stages[s].layers.size(); ++l) {
      const focal::FocalLayerParams& layer = model.stages[s].layers[l];
      const std::string stem =
          "stage" + std::to_string(s) + "_layer" + std::to_string(l);
      dump_table(stem + "_level0", layer.bias_level1);
      files.push_back(stem + "_level0.csv");
      for (std::size_t lv = 1; lv < layer.levels.size(); ++lv) {
        dump_table(stem + "_coarse" + std::to_string(lv),
                   layer.bias_coarse[lv]);
        files.push_back(stem + "_coarse" + std::to_string(lv) + ".csv");
      }
    }
  }
  ordered_json result;
  result["directory"] = out_dir;
  result["files"] = std::move(files);
  emit_report("bias-dump", focal::config_digest(model.config), seed, timer,
              std::move(result));
  return 0;
}

int run_resize_bias(const ModelSelection& sel, std::uint64_t seed,
                    const std::string& sizes_spec, const std::string& out_path) {
  Timer timer;
  const focal::ModelConfig cfg = sel.resolve_config();
  const focal::Model model = focal::build_model(cfg, seed);
  const std::vector<int> sizes = parse_int_list(sizes_spec);
  const focal::Model resized = focal::resize_focal_regions(model, sizes);
  focal::save_model(resized, out_path);

  ordered_json result;
  result["sizes"] = sizes;
  result["output"] = out_path;
  ordered_json extents = ordered_json::array();
  for (const focal::StageParams& stage : resized.stages) {
    if (!stage.layers.empty()) {
      extents.push_back(stage.layers[0].bias_level1.extent(1));
    }
  }
  result["level0_table_extents"] = std::move(extents);
  emit_report("resize-bias", focal::config_digest(resized.config), seed, timer,
              std::move(result));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"focal attention reference toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // app-level flags like --seed may follow the subcommand

  std::uint64_t seed = default_seed();
  app.add_option("--seed", seed, "seed for weight init and case generation")
      ->capture_default_str();

  ModelSelection param_sel, flops_sel, geo_sel, fwd_sel, stats_sel, dump_sel,
      resize_sel;

  auto* paramcount = app.add_subcommand("paramcount", "parameter totals");
  add_model_flags(paramcount, param_sel);

  auto* flops = app.add_subcommand("flops", "MAC totals per stage");
  add_model_flags(flops, flops_sel);
  int flops_input = 224;
  flops->add_option("--input", flops_input, "square input extent")
      ->capture_default_str();

  auto* geometry = app.add_subcommand("geometry", "gathered-slot plan as CSV");
  add_model_flags(geometry, geo_sel);
  std::string geo_map, geo_levels, geo_window, geo_out;
  int geo_sp = 7, geo_stage = 0, geo_input = 224;
  geometry->add_option("--map", geo_map, "map extents M,N");
  geometry->add_option("--sp", geo_sp, "window partition size (with --map)");
  geometry->add_option("--levels", geo_levels, "levels as s_w:s_r,...");
  geometry->add_option("--window", geo_window, "restrict to window R,C");
  geometry->add_option("--stage", geo_stage, "stage index (with --config/--model)");
  geometry->add_option("--input", geo_input, "input extent (with --config/--model)");
  geometry->add_option("--out", geo_out, "write CSV to a file");

  auto* receptive = app.add_subcommand("receptive-field",
                                       "token budget vs receptive area");
  std::string rf_levels = "1:3,2:3,4:3,8:3";
  std::string rf_out;
  receptive->add_option("--levels", rf_levels, "schedule as s_w:s_r,...")
      ->capture_default_str();
  receptive->add_option("--out", rf_out, "write CSV to a file");

  auto* forward = app.add_subcommand("forward", "run the model forward");
  add_model_flags(forward, fwd_sel, true);
  int fwd_input = 224, fwd_threads = 1;
  forward->add_option("--input", fwd_input, "square input extent")
      ->capture_default_str();
  forward->add_option("--threads", fwd_threads, "worker threads")
      ->capture_default_str();

  auto* equivalence =
      app.add_subcommand("equivalence", "fast path vs scalar reference");
  int eq_cases = 50;
  equivalence->add_option("--cases", eq_cases, "number of randomized cases")
      ->capture_default_str();

  auto* gradcheck =
      app.add_subcommand("gradcheck", "analytic backward vs finite differences");
  int gc_cases = 5;
  gradcheck->add_option("--cases", gc_cases, "number of randomized cases")
      ->capture_default_str();

  auto* attn_stats =
      app.add_subcommand("attn-stats", "attention mass by token type, per layer");
  add_model_flags(attn_stats, stats_sel);
  int stats_input = 224;
  std::string stats_out;
  attn_stats->add_option("--input", stats_input, "square input extent")
      ->capture_default_str();
  attn_stats->add_option("--out", stats_out, "write CSV to a file");

  auto* bias_dump = app.add_subcommand("bias-dump", "bias tables as CSV files");
  add_model_flags(bias_dump, dump_sel, true);
  std::string dump_dir = "bias_tables";
  bias_dump->add_option("--out", dump_dir, "output directory")
      ->capture_default_str();

  auto* resize_bias =
      app.add_subcommand("resize-bias", "resize fine regions and save");
  add_model_flags(resize_bias, resize_sel);
  std::string resize_sizes = "15,13,9,7";
  std::string resize_out = "resized.focal";
  resize_bias->add_option("--sizes", resize_sizes, "per-stage fine region sizes")
      ->capture_default_str();
  resize_bias->add_option("--out", resize_out, "output container path")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (paramcount->parsed()) return run_paramcount(param_sel, seed);
    if (flops->parsed()) return run_flops(flops_sel, seed, flops_input);
    if (geometry->parsed()) {
      return run_geometry(geo_sel, seed, geo_map, geo_sp, geo_levels,
                          geo_window, geo_stage, geo_input, geo_out);
    }
    if (receptive->parsed()) return run_receptive_field(seed, rf_levels, rf_out);
    if (forward->parsed()) return run_forward(fwd_sel, seed, fwd_input, fwd_threads);
    if (equivalence->parsed()) return run_equivalence(seed, eq_cases);
    if (gradcheck->parsed()) return run_gradcheck(seed, gc_cases);
    if (attn_stats->parsed()) {
      return run_attn_stats(stats_sel, seed, stats_input, stats_out);
    }
    if (bias_dump->parsed()) return run_bias_dump(dump_sel, seed, dump_dir);
    if (resize_bias->parsed()) {
      return run_resize_bias(resize_sel, seed, resize_sizes, resize_out);
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    // Bad option values (unknown preset, malformed level specs, ...).
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
