#pragma once

// Flat tensor archive: 8-byte magic "EANCKPT1", u64 LE manifest length, UTF-8
// JSON manifest, then raw little-endian buffers. The manifest maps tensor
// names to {dtype, shape, offset} with offsets relative to the data section;
// a free-form "meta" object rides along for optimizer/rng bookkeeping.
// Round-trips are bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ean/errors.hpp"
#include "ean/tensor.hpp"

namespace ean {

static_assert(std::endian::native == std::endian::little,
              "archive format assumes a little-endian host");

inline constexpr char kArchiveMagic[8] = {'E', 'A', 'N', 'C', 'K', 'P', 'T', '1'};

class TensorArchive {
 public:
  void put(const std::string& name, const Tensor& t) {
    Entry e;
    e.dtype = "f64";
    e.shape = t.shape();
    e.data = t.values();
    entries_[name] = std::move(e);
  }

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }

  Tensor get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IoError("archive has no tensor named '" + name + "'");
    return Tensor::from_data(it->second.shape, it->second.data);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
  }

  nlohmann::json meta = nlohmann::json::object();

  void save(const std::filesystem::path& path) const {
    nlohmann::json manifest;
    manifest["tensors"] = nlohmann::json::object();
    uint64_t offset = 0;
    for (const auto& [name, e] : entries_) {
      manifest["tensors"][name] = {
          {"dtype", e.dtype}, {"shape", e.shape}, {"offset", offset}};
      offset += e.data.size() * sizeof(double);
    }
    manifest["meta"] = meta;
    const std::string mjson = manifest.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    f.write(kArchiveMagic, 8);
    const uint64_t mlen = mjson.size();
    f.write(reinterpret_cast<const char*>(&mlen), 8);
    f.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
    for (const auto& [name, e] : entries_) {
      f.write(reinterpret_cast<const char*>(e.data.data()),
              static_cast<std::streamsize>(e.data.size() * sizeof(double)));
    }
    if (!f) throw IoError("write failed for '" + path.string() + "'");
  }

  static TensorArchive load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "'");
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kArchiveMagic, 8) != 0) {
      throw IoError("'" + path.string() + "' is not a tensor archive");
    }
    uint64_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), 8);
    std::string mjson(mlen, '\0');
    f.read(mjson.data(), static_cast<std::streamsize>(mlen));
    if (!f) throw IoError("truncated archive manifest in '" + path.string() + "'");
    nlohmann::json manifest = nlohmann::json::parse(mjson, nullptr, false);
    if (manifest.is_discarded()) throw IoError("archive manifest is not valid JSON");

    TensorArchive ar;
    ar.meta = manifest.value("meta", nlohmann::json::object());
    const auto data_start = f.tellg();
    for (const auto& [name, desc] : manifest.at("tensors").items()) {
      Entry e;
      e.dtype = desc.at("dtype").get<std::string>();
      if (e.dtype != "f64") throw IoError("unsupported dtype '" + e.dtype + "' in archive");
      e.shape = desc.at("shape").get<Shape>();
      const uint64_t off = desc.at("offset").get<uint64_t>();
      e.data.resize(static_cast<size_t>(shape_numel(e.shape)));
      f.seekg(data_start + static_cast<std::streamoff>(off));
      f.read(reinterpret_cast<char*>(e.data.data()),
             static_cast<std::streamsize>(e.data.size() * sizeof(double)));
      if (!f) throw IoError("truncated tensor data for '" + name + "'");
      ar.entries_[name] = std::move(e);
    }
    return ar;
  }

 private:
  struct Entry {
    std::string dtype;
    Shape shape;
    std::vector<double> data;
  };
  std::map<std::string, Entry> entries_;
};

}  // namespace ean
