#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "dlat/datamodel.hpp"
#include "dlat/nn.hpp"

// Checkpoint layout: a directory holding manifest.json plus one binary blob
// per named tensor group (little-endian doubles, parameters concatenated in
// registration order with per-parameter offsets in the manifest).

namespace dlat::ckpt {

using json = nlohmann::json;

inline void write_blob(const std::filesystem::path& path, const std::vector<const Tensor*>& ts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write blob: " + path.string());
  for (const Tensor* t : ts)
    out.write(reinterpret_cast<const char*>(t->data.data()),
              static_cast<std::streamsize>(t->data.size() * sizeof(double)));
  if (!out) throw IoError("short write: " + path.string());
}

inline void read_blob(const std::filesystem::path& path, const std::vector<Tensor*>& ts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read blob: " + path.string());
  for (Tensor* t : ts) {
    in.read(reinterpret_cast<char*>(t->data.data()),
            static_cast<std::streamsize>(t->data.size() * sizeof(double)));
    if (!in) throw IoError("blob truncated: " + path.string());
  }
  char extra;
  if (in.read(&extra, 1)) throw IoError("blob has trailing bytes: " + path.string());
}

// Serializes one ParamStore: blob file <name>.bin + manifest entry listing
// parameter names, shapes and offsets (in doubles).
inline json save_store(const std::filesystem::path& dir, const std::string& name,
                       const nn::ParamStore& store) {
  json entry;
  entry["blob"] = name + ".bin";
  json params = json::array();
  int64_t offset = 0;
  std::vector<const Tensor*> ts;
  for (const auto& p : store.all()) {
    json pj;
    pj["name"] = p.name;
    pj["shape"] = p.value.shape();
    pj["offset"] = offset;
    params.push_back(pj);
    offset += p.value.numel();
    ts.push_back(&p.value.get()->val);
  }
  entry["params"] = params;
  entry["total"] = offset;
  write_blob(dir / (name + ".bin"), ts);
  return entry;
}

inline void load_store(const std::filesystem::path& dir, const json& entry,
                       nn::ParamStore& store) {
  const auto& params = entry.at("params");
  if (params.size() != store.all().size())
    throw IoError("checkpoint store has " + std::to_string(params.size()) +
                  " parameters, model expects " + std::to_string(store.all().size()));
  std::vector<Tensor*> ts;
  for (size_t i = 0; i < store.all().size(); ++i) {
    auto& p = store.all()[i];
    if (params[i].at("name").get<std::string>() != p.name)
      throw IoError("checkpoint parameter mismatch: " +
                    params[i].at("name").get<std::string>() + " vs " + p.name);
    if (params[i].at("shape").get<std::vector<int64_t>>() != p.value.shape())
      throw IoError("checkpoint shape mismatch for " + p.name);
    ts.push_back(&p.value.get()->val);
  }
  read_blob(dir / entry.at("blob").get<std::string>(), ts);
}

inline json save_tensor(const std::filesystem::path& dir, const std::string& name,
                        const Tensor& t) {
  json entry;
  entry["blob"] = name + ".bin";
  entry["shape"] = t.shape;
  write_blob(dir / (name + ".bin"), {&t});
  return entry;
}

inline Tensor load_tensor(const std::filesystem::path& dir, const json& entry) {
  Tensor t(entry.at("shape").get<std::vector<int64_t>>());
  std::vector<Tensor*> ts{&t};
  read_blob(dir / entry.at("blob").get<std::string>(), ts);
  return t;
}

inline void save_manifest(const std::filesystem::path& dir, const json& manifest) {
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

inline json load_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no manifest.json in " + dir.string());
  json m;
  in >> m;
  return m;
}

}  // namespace dlat::ckpt
