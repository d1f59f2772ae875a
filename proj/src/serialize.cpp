#include "blobdiff/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace blobdiff {

namespace {

constexpr char kMagic[8] = {'B', 'D', 'T', 'E', 'N', 'S', '0', '1'};

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

uint64_t fnv1a_bytes(const void* p, size_t n, uint64_t h) {
  const auto* b = static_cast<const unsigned char*>(p);
  for (size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ULL;
  }
  return h;
}

constexpr uint64_t kFnvOffset = 14695981039346656037ULL;

}  // namespace

void save_tensors(const std::string& path, const TensorMap& tensors, const json& meta) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("save_tensors: cannot open " + path);
  os.write(kMagic, 8);
  write_u64(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(t.rank()));
    for (int d : t.shape) write_u32(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  std::string m = meta.dump();
  write_u64(os, m.size());
  os.write(m.data(), static_cast<std::streamsize>(m.size()));
  if (!os) throw std::runtime_error("save_tensors: write failed for " + path);
}

TensorMap load_tensors(const std::string& path, json* meta) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_tensors: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("load_tensors: bad magic in " + path);
  uint64_t n = read_u64(is);
  TensorMap out;
  for (uint64_t i = 0; i < n; ++i) {
    uint32_t len = read_u32(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    uint32_t rank = read_u32(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(read_u32(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!is) throw std::runtime_error("load_tensors: truncated file " + path);
    out.emplace(std::move(name), std::move(t));
  }
  uint64_t mlen = read_u64(is);
  std::string m(mlen, '\0');
  is.read(m.data(), static_cast<std::streamsize>(mlen));
  if (!is) throw std::runtime_error("load_tensors: truncated metadata in " + path);
  if (meta) *meta = json::parse(m);
  return out;
}

json load_tensor_meta(const std::string& path) {
  json meta;
  load_tensors(path, &meta);
  return meta;
}

uint64_t tensor_hash(const Tensor& t) {
  uint64_t h = kFnvOffset;
  uint32_t r = static_cast<uint32_t>(t.rank());
  h = fnv1a_bytes(&r, 4, h);
  for (int d : t.shape) h = fnv1a_bytes(&d, 4, h);
  h = fnv1a_bytes(t.data.data(), t.data.size() * sizeof(double), h);
  return h;
}

uint64_t tensor_map_hash(const TensorMap& tensors) {
  uint64_t h = kFnvOffset;
  for (const auto& [name, t] : tensors) {
    h = fnv1a_bytes(name.data(), name.size(), h);
    uint64_t th = tensor_hash(t);
    h = fnv1a_bytes(&th, 8, h);
  }
  return h;
}

void save_json(const std::string& path, const json& doc) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("save_json: cannot open " + path);
  os << doc.dump(2) << "\n";
}

json load_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_json: cannot open " + path);
  return json::parse(is);
}

std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace blobdiff
