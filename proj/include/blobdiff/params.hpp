#pragma once

#include <map>
#include <string>
#include <vector>

#include "blobdiff/autograd.hpp"
#include "blobdiff/rng.hpp"
#include "blobdiff/serialize.hpp"

namespace blobdiff {

// Named long-lived parameter leaves. Names encode module path, block index and
// projection role ("unet.attn0.self.q.w"); they are the compatibility contract
// between stage checkpoints.
class ParamStore {
 public:
  // Creates a leaf filled with N(0, stddev) noise from rng (stddev 0 gives
  // exact zeros). Throws if the name exists.
  ag::Var create(const std::string& name, std::vector<int> shape, double stddev, Rng& rng);
  ag::Var create_zeros(const std::string& name, std::vector<int> shape);
  // Registers an externally built leaf under a name (used by tests to wire
  // probe leaves into a network). Throws if the name exists.
  void adopt(const std::string& name, ag::Var v);

  ag::Var get(const std::string& name) const;
  bool has(const std::string& name) const;
  std::vector<std::string> names() const;

  // Glob-style matching with '*' wildcards; a name matches if any pattern does.
  static bool pattern_match(const std::string& pattern, const std::string& name);
  std::vector<std::string> names_matching(const std::vector<std::string>& patterns) const;

  int64_t total_elements() const;
  int64_t total_elements_matching(const std::vector<std::string>& patterns) const;

  TensorMap snapshot() const;
  TensorMap snapshot_matching(const std::vector<std::string>& patterns) const;
  // Overwrites values of existing leaves in place (graph leaves stay live).
  // strict requires every store tensor to be present in the map and vice versa.
  void load_values(const TensorMap& values, bool strict);
  // Hash of current values of the named subset (sorted order).
  uint64_t values_hash(const std::vector<std::string>& subset) const;
  uint64_t values_hash() const;

  void zero_grads();
  void set_requires_grad(const std::vector<std::string>& patterns, bool on_matched,
                         bool off_rest);

 private:
  std::map<std::string, ag::Var> params_;
};

// Fetch-or-create helpers used by network builders: reuse an existing leaf
// (validating its shape) or create one. ensure_ones fills with 1.0 only at
// creation time, so loaded values are never clobbered.
ag::Var ensure_param(ParamStore& ps, const std::string& name, std::vector<int> shape,
                     double stddev, Rng& rng);
ag::Var ensure_ones(ParamStore& ps, const std::string& name, std::vector<int> shape);

}  // namespace blobdiff
