#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "blobdiff/params.hpp"

namespace blobdiff {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay. Moments are keyed by parameter name so
// the optimizer state can be checkpointed and reloaded for exact resume.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  int64_t step_count() const { return t_; }

  // Schedules (warmup, decay) adjust the rate between steps.
  void set_lr(double lr) { cfg_.lr = lr; }

  // One update across every leaf in `params` that requires grad and has an
  // accumulated gradient this step; clears all gradients afterwards.
  void step(ParamStore& params);

  // Moments and step count as tensors ("m/<name>", "v/<name>", "t").
  TensorMap state() const;
  void load_state(const TensorMap& st);

 private:
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace blobdiff
