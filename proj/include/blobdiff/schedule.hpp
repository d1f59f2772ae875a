#pragma once

#include <optional>
#include <string>
#include <vector>

#include "blobdiff/tensor.hpp"

namespace blobdiff {

// Discrete diffusion schedule. Vectors are indexed by step-1 (beta[0] is the
// table entry for t=1).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::string kind = "linear";

  double beta_at(int t) const;       // t in [1, T]
  double alpha_bar_at(int t) const;  // alpha_bar_at(0) == 1 by convention
};

struct NoisyClip {
  Tensor x_t;
  int t = 0;
  Tensor eps;
};

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end);
// Toy training default: T=200 linear 1e-4 -> 0.02.
NoiseSchedule default_schedule();

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s);
NoisyClip q_sample_clip(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s);

// (x_t - sqrt(1-abar_t) * eps_hat) / sqrt(abar_t). Rejects steps where
// alpha_bar underflows. Callers clamp to [-1,1] before reusing the estimate
// as context.
Tensor estimate_x0(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& s);

double sigma_at(const NoiseSchedule& s, int t);

// Ancestral t -> t-1. noise_in required for t > 1 and ignored at t = 1 (the
// final step returns the posterior mean).
Tensor reverse_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& s,
                    const Tensor* noise_in);

// Generalized ancestral update t -> t_prev for respaced step sequences
// (t_prev < t, t_prev = 0 means fully denoised). With t_prev = t-1 this is
// exactly reverse_step.
Tensor reverse_step_between(const Tensor& x_t, const Tensor& eps_hat, int t, int t_prev,
                            const NoiseSchedule& s, const Tensor* noise_in);

// Decreasing step sequence for fast sampling: `count` values from T down,
// ending at a step whose successor is 0. count = T yields T, T-1, ..., 1.
std::vector<int> respaced_steps(int T, int count);

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double scale);

void save_schedule(const std::string& path, const NoiseSchedule& s);
NoiseSchedule load_schedule(const std::string& path);

}  // namespace blobdiff
