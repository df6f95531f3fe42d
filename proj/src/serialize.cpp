#include "focal/serialize.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace focal {

static_assert(std::endian::native == std::endian::little,
              "weight container assumes a little-endian host");

namespace {

using nlohmann::ordered_json;

ordered_json config_json(const ModelConfig& config) {
  ordered_json doc;
  doc["input_size"] = {config.input_rows, config.input_cols};
  doc["in_channels"] = config.in_channels;
  doc["num_classes"] = config.num_classes;
  doc["stages"] = ordered_json::array();
  for (const StageConfig& s : config.stages) {
    ordered_json stage;
    stage["depth"] = s.depth;
    stage["dim"] = s.dim;
    stage["patch"] = s.patch;
    stage["n_heads"] = s.n_heads;
    stage["s_p"] = s.s_p;
    stage["levels"] = ordered_json::array();
    for (const FocalLevel& l : s.levels) {
      stage["levels"].push_back({{"s_w", l.s_w}, {"s_r", l.s_r}});
    }
    doc["stages"].push_back(std::move(stage));
  }
  return doc;
}

ModelConfig parse_config(const ordered_json& doc) {
  ModelConfig config;
  if (doc.contains("preset")) {
    config = preset_config(doc.at("preset").get<std::string>());
  }
  if (doc.contains("input_size")) {
    const auto& sz = doc.at("input_size");
    config.input_rows = sz.at(0).get<int>();
    config.input_cols = sz.at(1).get<int>();
  }
  if (doc.contains("in_channels")) config.in_channels = doc.at("in_channels").get<int>();
  if (doc.contains("num_classes")) config.num_classes = doc.at("num_classes").get<int>();
  if (doc.contains("stages")) {
    config.stages.clear();
    for (const auto& js : doc.at("stages")) {
      StageConfig s;
      s.depth = js.at("depth").get<int>();
      s.dim = js.at("dim").get<int>();
      s.patch = js.at("patch").get<int>();
      s.n_heads = js.at("n_heads").get<int>();
      s.s_p = js.at("s_p").get<int>();
      for (const auto& jl : js.at("levels")) {
        s.levels.push_back({jl.at("s_w").get<int>(), jl.at("s_r").get<int>()});
      }
      config.stages.push_back(std::move(s));
    }
  }
  config.validate();
  return config;
}

}  // namespace

std::string config_to_json(const ModelConfig& config) {
  return config_json(config).dump();
}

ModelConfig config_from_json(const std::string& text) {
  return parse_config(ordered_json::parse(text));
}

ModelConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return config_from_json(buf.str());
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t hash = 0xCBF29CE484222325ULL;
  for (const char ch : text) {
    hash ^= static_cast<std::uint8_t>(ch);
    hash *= 0x100000001B3ULL;
  }
  return hash;
}

std::string config_digest(const ModelConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(config_to_json(config))));
  return buf;
}

void save_model(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open output file: " + path);

  std::ostringstream manifest;
  std::size_t total = 0;
  std::size_t tensors = 0;
  for_each_tensor(model, [&](const std::string& name, const Tensor& t) {
    manifest << name << " " << t.rank();
    for (std::size_t a = 0; a < t.rank(); ++a) manifest << " " << t.extent(a);
    manifest << " " << total << "\n";
    total += t.size();
    ++tensors;
  });

  out << "FOCALMODEL 1\n";
  out << "config " << config_to_json(model.config) << "\n";
  out << "tensors " << tensors << "\n";
  out << manifest.str();
  out << "data " << total << "\n";
  for_each_tensor(model, [&](const std::string&, const Tensor& t) {
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  });
  if (!out) throw std::runtime_error("failed writing model file: " + path);
}

Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model file: " + path);

  std::string line;
  if (!std::getline(in, line) || line != "FOCALMODEL 1") {
    throw std::runtime_error("not a model container: " + path);
  }
  if (!std::getline(in, line) || line.rfind("config ", 0) != 0) {
    throw std::runtime_error("model container missing config line");
  }
  const ModelConfig config = config_from_json(line.substr(7));

  if (!std::getline(in, line) || line.rfind("tensors ", 0) != 0) {
    throw std::runtime_error("model container missing tensor count");
  }
  const auto parse_count = [&](const std::string& text) {
    try {
      return static_cast<std::size_t>(std::stoull(text));
    } catch (const std::exception&) {
      throw std::runtime_error("bad count in model container: " + text);
    }
  };
  const std::size_t tensors = parse_count(line.substr(8));

  struct Entry {
    std::vector<std::size_t> shape;
    std::size_t offset;
  };
  std::unordered_map<std::string, Entry> entries;
  for (std::size_t i = 0; i < tensors; ++i) {
    if (!std::getline(in, line)) {
      throw std::runtime_error("model container truncated in manifest");
    }
    std::istringstream row(line);
    std::string name;
    std::size_t rank = 0;
    row >> name >> rank;
    Entry e;
    e.shape.resize(rank);
    for (std::size_t a = 0; a < rank; ++a) row >> e.shape[a];
    row >> e.offset;
    if (!row) throw std::runtime_error("bad manifest row: " + line);
    entries.emplace(std::move(name), std::move(e));
  }
  if (!std::getline(in, line) || line.rfind("data ", 0) != 0) {
    throw std::runtime_error("model container missing data header");
  }
  const std::size_t total = parse_count(line.substr(5));
  std::vector<double> blob(total);
  in.read(reinterpret_cast<char*>(blob.data()),
          static_cast<std::streamsize>(total * sizeof(double)));
  if (!in) throw std::runtime_error("model container payload truncated");

  Model model = build_model(config, 0);
  for_each_tensor(model, [&](const std::string& name, Tensor& t) {
    const auto it = entries.find(name);
    if (it == entries.end()) {
      throw std::runtime_error("model container missing tensor: " + name);
    }
    if (it->second.shape != t.shape()) {
      throw std::runtime_error("model container shape mismatch for " + name);
    }
    if (it->second.offset + t.size() > blob.size()) {
      throw std::runtime_error("model container offset out of range for " + name);
    }
    std::copy(blob.begin() + static_cast<std::ptrdiff_t>(it->second.offset),
              blob.begin() + static_cast<std::ptrdiff_t>(it->second.offset + t.size()),
              t.data());
  });
  return model;
}

}  // namespace focal
