#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "pmap/nn.hpp"

namespace pmap {

// A checkpoint is a directory: one tensor file per parameter plus
// manifest.json naming them. Loading is strict; the parameter list and
// every shape must match the receiving model.
struct CheckpointMeta {
  std::string model;  // architecture tag, e.g. "fusion" or "mae"
  int epoch = 0;
  uint64_t seed = 0;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
};

template <typename T>
inline void save_checkpoint(const std::string& dir, const ParamRefs<T>& params,
                            const CheckpointMeta& meta) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "pmap-checkpoint-v1";
  manifest["model"] = meta.model;
  manifest["epoch"] = meta.epoch;
  manifest["seed"] = meta.seed;
  manifest["config"] = meta.config;
  auto list = nlohmann::ordered_json::array();
  for (const auto* p : params) {
    std::string file = p->name + ".pmtn";
    save_tensor((fs::path(dir) / file).string(), p->value);
    nlohmann::ordered_json entry;
    entry["name"] = p->name;
    entry["file"] = file;
    entry["shape"] = p->value.shape();
    list.push_back(std::move(entry));
  }
  manifest["params"] = std::move(list);
  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw DataError("cannot write checkpoint manifest in " + dir);
  os << manifest.dump(2) << "\n";
}

template <typename T>
inline CheckpointMeta load_checkpoint(const std::string& dir, const ParamRefs<T>& params) {
  namespace fs = std::filesystem;
  fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream is(mpath);
  if (!is) throw DataError("checkpoint manifest not found: " + mpath.string());
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "pmap-checkpoint-v1")
    throw ParseError("checkpoint manifest: unknown format");
  const auto& list = manifest.at("params");
  if (list.size() != params.size())
    throw DataError("checkpoint has " + std::to_string(list.size()) + " params, model wants " +
                    std::to_string(params.size()));
  std::map<std::string, const nlohmann::json*> by_name;
  for (const auto& entry : list) by_name[entry.at("name").get<std::string>()] = &entry;
  for (auto* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw DataError("checkpoint missing param " + p->name);
    const auto& entry = *it->second;
    Shape shape = entry.at("shape").template get<Shape>();
    if (shape != p->value.shape())
      throw DataError("checkpoint param " + p->name + ": shape " + shape_str(shape) +
                      " does not match model " + shape_str(p->value.shape()));
    Tensor<T> t =
        load_tensor<T>((fs::path(dir) / entry.at("file").template get<std::string>()).string());
    if (t.shape() != shape)
      throw DataError("checkpoint param " + p->name + ": file shape disagrees with manifest");
    p->value = std::move(t);
  }
  CheckpointMeta meta;
  meta.model = manifest.value("model", "");
  meta.epoch = manifest.value("epoch", 0);
  meta.seed = manifest.value("seed", uint64_t(0));
  if (manifest.contains("config")) meta.config = manifest["config"];
  return meta;
}

}  // namespace pmap
