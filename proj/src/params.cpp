#include "blobdiff/params.hpp"

#include <stdexcept>

namespace blobdiff {

ag::Var ParamStore::create(const std::string& name, std::vector<int> shape, double stddev,
                           Rng& rng) {
  if (params_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
  Tensor t(std::move(shape));
  if (stddev != 0.0) {
    // Per-name child stream: initialization depends only on the root seed and
    // the tensor name, never on creation order. Networks that share a subset
    // of names therefore share those tensors' initial values exactly.
    Rng named = rng.child(name);
    named.fill_normal(t);
    for (auto& v : t.data) v *= stddev;
  }
  ag::Var v = ag::leaf(std::move(t), true);
  params_.emplace(name, v);
  return v;
}

ag::Var ParamStore::create_zeros(const std::string& name, std::vector<int> shape) {
  if (params_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
  ag::Var v = ag::leaf(Tensor(std::move(shape)), true);
  params_.emplace(name, v);
  return v;
}

ag::Var ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("ParamStore: missing " + name);
  return it->second;
}

bool ParamStore::has(const std::string& name) const { return params_.count(name) > 0; }

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [k, v] : params_) out.push_back(k);
  return out;
}

bool ParamStore::pattern_match(const std::string& pattern, const std::string& name) {
  // Iterative glob with '*' only (no character classes needed for our names).
  size_t p = 0, n = 0, star = std::string::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && (pattern[p] == name[n])) {
      ++p;
      ++n;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (star != std::string::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

std::vector<std::string> ParamStore::names_matching(
    const std::vector<std::string>& patterns) const {
  std::vector<std::string> out;
  for (const auto& [name, v] : params_)
    for (const auto& pat : patterns)
      if (pattern_match(pat, name)) {
        out.push_back(name);
        break;
      }
  return out;
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const auto& [k, v] : params_) n += v.val().numel();
  return n;
}

int64_t ParamStore::total_elements_matching(const std::vector<std::string>& patterns) const {
  int64_t n = 0;
  for (const auto& name : names_matching(patterns)) n += get(name).val().numel();
  return n;
}

TensorMap ParamStore::snapshot() const {
  TensorMap out;
  for (const auto& [name, v] : params_) out.emplace(name, v.val());
  return out;
}

TensorMap ParamStore::snapshot_matching(const std::vector<std::string>& patterns) const {
  TensorMap out;
  for (const auto& name : names_matching(patterns)) out.emplace(name, get(name).val());
  return out;
}

void ParamStore::load_values(const TensorMap& values, bool strict) {
  if (strict) {
    for (const auto& [name, t] : values)
      if (!params_.count(name))
        throw std::runtime_error("ParamStore::load_values: unexpected tensor " + name);
    for (const auto& [name, v] : params_)
      if (!values.count(name))
        throw std::runtime_error("ParamStore::load_values: missing tensor " + name);
  }
  for (const auto& [name, t] : values) {
    auto it = params_.find(name);
    if (it == params_.end()) {
      if (strict) throw std::runtime_error("ParamStore::load_values: unexpected " + name);
      continue;
    }
    if (it->second.val().shape != t.shape)
      throw std::runtime_error("ParamStore::load_values: shape mismatch for " + name);
    it->second.val() = t;
  }
}

uint64_t ParamStore::values_hash(const std::vector<std::string>& subset) const {
  TensorMap sub;
  for (const auto& name : subset) sub.emplace(name, get(name).val());
  return tensor_map_hash(sub);
}

uint64_t ParamStore::values_hash() const { return tensor_map_hash(snapshot()); }

void ParamStore::zero_grads() {
  for (auto& [name, v] : params_) v.n->zero_grad();
}

void ParamStore::set_requires_grad(const std::vector<std::string>& patterns, bool on_matched,
                                   bool off_rest) {
  for (auto& [name, v] : params_) {
    bool matched = false;
    for (const auto& pat : patterns)
      if (pattern_match(pat, name)) {
        matched = true;
        break;
      }
    if (matched)
      v.n->requires_grad = on_matched;
    else if (off_rest)
      v.n->requires_grad = false;
  }
}

void ParamStore::adopt(const std::string& name, ag::Var v) {
  if (params_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
  if (!v.defined()) throw std::invalid_argument("ParamStore: adopt of undefined var " + name);
  params_.emplace(name, std::move(v));
}

ag::Var ensure_param(ParamStore& ps, const std::string& name, std::vector<int> shape,
                     double stddev, Rng& rng) {
  if (ps.has(name)) {
    ag::Var v = ps.get(name);
    if (v.val().shape != shape)
      throw std::runtime_error("parameter shape drift for " + name);
    return v;
  }
  return ps.create(name, std::move(shape), stddev, rng);
}

ag::Var ensure_ones(ParamStore& ps, const std::string& name, std::vector<int> shape) {
  if (ps.has(name)) {
    ag::Var v = ps.get(name);
    if (v.val().shape != shape)
      throw std::runtime_error("parameter shape drift for " + name);
    return v;
  }
  ag::Var v = ps.create_zeros(name, std::move(shape));
  for (auto& x : v.val().data) x = 1.0;
  return v;
}

}  // namespace blobdiff
