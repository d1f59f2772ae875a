#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <json.hpp>

#include "blobdiff/tensor.hpp"

namespace blobdiff {

using TensorMap = std::map<std::string, Tensor>;
using json = nlohmann::json;

// Binary container: magic, tensor table (name, dims, float64 payload), then a
// JSON metadata blob. Deterministic byte-for-byte given the same contents.
void save_tensors(const std::string& path, const TensorMap& tensors, const json& meta);
TensorMap load_tensors(const std::string& path, json* meta = nullptr);
json load_tensor_meta(const std::string& path);

// FNV-1a over shape and raw float64 bytes; stable across runs and platforms
// with IEEE doubles. Used for freeze checks and checkpoint lineage.
uint64_t tensor_hash(const Tensor& t);
uint64_t tensor_map_hash(const TensorMap& tensors);

void save_json(const std::string& path, const json& doc);
json load_json(const std::string& path);

std::string hash_hex(uint64_t h);

}  // namespace blobdiff
