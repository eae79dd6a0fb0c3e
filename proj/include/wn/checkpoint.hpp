#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "wn/errors.hpp"
#include "wn/model.hpp"
#include "wn/tensor.hpp"

namespace wn {

// Single-file checkpoint: an 8-byte magic, a u64 manifest length, a JSON
// manifest listing named tensors (shape, element count, payload offset) plus
// free-form metadata, then the raw little-endian doubles.
inline constexpr char kCheckpointMagic[8] = {'W', 'N', 'C', 'K', 'P', 'T', '0', '1'};

struct Checkpoint {
  nlohmann::json meta;
  std::map<std::string, Tensor> tensors;
};

namespace detail {

inline void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) {
    throw DataError(DataError::Kind::length, "checkpoint: truncated header");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

/// All persistent tensors of a model: trainable parameters plus the running
/// statistics eval mode depends on. Seeded flags ride along as one-element
/// tensors.
inline std::vector<std::pair<std::string, Tensor>> model_tensors(ModelState& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& p : parameters(model)) {
    out.emplace_back(p.name, Tensor::from_vector(p.value));
  }
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    Layer& l = model.layers[li];
    if (!l.spec.trainable()) continue;
    const std::string prefix = "layer" + std::to_string(li) + ".";
    if (l.spec.norm_mode == NormMode::batch_norm) {
      out.emplace_back(prefix + "running_mean", Tensor::from_vector(l.bn.running_mean));
      out.emplace_back(prefix + "running_var", Tensor::from_vector(l.bn.running_var));
      Tensor seeded({1});
      seeded.flat()[0] = l.bn.seeded ? 1.0 : 0.0;
      out.emplace_back(prefix + "bn_seeded", std::move(seeded));
    }
    if (uses_mean_only(l.spec.norm_mode)) {
      out.emplace_back(prefix + "running_mean", Tensor::from_vector(l.mbn.running_mean));
      Tensor seeded({1});
      seeded.flat()[0] = l.mbn.seeded ? 1.0 : 0.0;
      out.emplace_back(prefix + "mbn_seeded", std::move(seeded));
    }
  }
  return out;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, ModelState& model,
                            const nlohmann::json& meta) {
  auto tensors = detail::model_tensors(model);
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["meta"] = meta;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["count"] = t.size();
    entry["offset"] = offset;
    manifest["tensors"].push_back(entry);
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(double);
  }
  const std::string manifest_str = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataError::Kind::length, "checkpoint: cannot write " + path);
  out.write(kCheckpointMagic, 8);
  detail::write_u64_le(out, manifest_str.size());
  out.write(manifest_str.data(), static_cast<std::streamsize>(manifest_str.size()));
  for (const auto& [name, t] : tensors) {
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::length, "checkpoint: cannot open " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::string(magic, 8) != std::string(kCheckpointMagic, 8)) {
    throw DataError(DataError::Kind::format, "checkpoint: bad magic in " + path);
  }
  const std::uint64_t manifest_len = detail::read_u64_le(in);
  std::string manifest_str(manifest_len, '\0');
  if (!in.read(manifest_str.data(), static_cast<std::streamsize>(manifest_len))) {
    throw DataError(DataError::Kind::length, "checkpoint: truncated manifest");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_str);
  } catch (const nlohmann::json::exception&) {
    throw DataError(DataError::Kind::format, "checkpoint: manifest is not valid JSON");
  }

  Checkpoint ck;
  ck.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& entry : manifest["tensors"]) {
    const std::string name = entry["name"];
    const std::vector<Index> shape = entry["shape"].get<std::vector<Index>>();
    Tensor t(shape);
    if (!in.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw DataError(DataError::Kind::length, "checkpoint: truncated payload for " + name);
    }
    ck.tensors.emplace(name, std::move(t));
  }
  return ck;
}

/// Copies checkpoint tensors back into a structurally matching model.
inline void restore_model(ModelState& model, const Checkpoint& ck) {
  auto expect = detail::model_tensors(model);
  for (auto& [name, current] : expect) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) {
      throw DataError(DataError::Kind::consistency, "checkpoint: missing tensor " + name);
    }
    if (it->second.size() != current.size()) {
      throw DataError(DataError::Kind::consistency, "checkpoint: size mismatch for " + name);
    }
  }
  for (auto& p : parameters(model)) {
    p.value = ck.tensors.at(p.name).flat();
  }
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    Layer& l = model.layers[li];
    if (!l.spec.trainable()) continue;
    const std::string prefix = "layer" + std::to_string(li) + ".";
    if (l.spec.norm_mode == NormMode::batch_norm) {
      l.bn.running_mean = ck.tensors.at(prefix + "running_mean").flat();
      l.bn.running_var = ck.tensors.at(prefix + "running_var").flat();
      l.bn.seeded = ck.tensors.at(prefix + "bn_seeded").flat()[0] != 0.0;
    }
    if (uses_mean_only(l.spec.norm_mode)) {
      l.mbn.running_mean = ck.tensors.at(prefix + "running_mean").flat();
      l.mbn.seeded = ck.tensors.at(prefix + "mbn_seeded").flat()[0] != 0.0;
    }
  }
  post_update(model);
}

}  // namespace wn
