#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "skd/common.hpp"
#include "skd/vit.hpp"

#include <json.hpp>

namespace skd::io {

// Single-file container: "SKDC" magic, version, JSON header (metadata plus a
// named-tensor directory with dtypes/shapes/offsets), little-endian blobs,
// trailing CRC-32 over everything before it.

struct TensorBlob {
  std::string dtype;  // f64 | f32 | i64
  std::vector<index_t> shape;
  std::vector<char> bytes;
  index_t numel() const {
    index_t n = 1;
    for (index_t s : shape) n *= s;
    return n;
  }
};

struct Container {
  nlohmann::json meta;
  std::vector<std::string> order;  // directory order
  std::map<std::string, TensorBlob> tensors;
};

std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0);

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

void save_model(const vit::Model& m, const std::string& path);
vit::Model load_model(const std::string& path);

}  // namespace skd::io
