#include "blobdiff/schedule.hpp"

#include <cmath>
#include <stdexcept>

#include "blobdiff/serialize.hpp"

namespace blobdiff {

namespace {

void check_step(const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.T) throw std::out_of_range("schedule: step out of [1,T]");
}

void check_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

}  // namespace

double NoiseSchedule::beta_at(int t) const {
  check_step(*this, t);
  return beta[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar_at(int t) const {
  if (t == 0) return 1.0;
  check_step(*this, t);
  return alpha_bar[static_cast<size_t>(t - 1)];
}

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw std::invalid_argument("make_linear_schedule: T must be >= 2");
  if (!(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0))
    throw std::invalid_argument("make_linear_schedule: need 0 < beta_start < beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.kind = "linear";
  s.beta.resize(static_cast<size_t>(T));
  s.alpha.resize(static_cast<size_t>(T));
  s.alpha_bar.resize(static_cast<size_t>(T));
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    double b = beta_start + (beta_end - beta_start) * static_cast<double>(i) / (T - 1);
    s.beta[static_cast<size_t>(i)] = b;
    s.alpha[static_cast<size_t>(i)] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bar[static_cast<size_t>(i)] = prod;
  }
  return s;
}

NoiseSchedule default_schedule() { return make_linear_schedule(200, 1e-4, 0.02); }

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  check_step(s, t);
  check_shape(x0, eps, "q_sample");
  double ab = s.alpha_bar_at(t);
  double c0 = std::sqrt(ab);
  double ce = std::sqrt(1.0 - ab);
  Tensor out = x0;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = c0 * out.data[i] + ce * eps.data[i];
  return out;
}

NoisyClip q_sample_clip(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  return NoisyClip{q_sample(x0, t, eps, s), t, eps};
}

Tensor estimate_x0(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& s) {
  check_step(s, t);
  check_shape(x_t, eps_hat, "estimate_x0");
  double ab = s.alpha_bar_at(t);
  if (ab < 1e-8) throw std::domain_error("estimate_x0: alpha_bar underflow at this step");
  double inv = 1.0 / std::sqrt(ab);
  double ce = std::sqrt(1.0 - ab);
  Tensor out = x_t;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = (out.data[i] - ce * eps_hat.data[i]) * inv;
  return out;
}

double sigma_at(const NoiseSchedule& s, int t) {
  check_step(s, t);
  double ab_t = s.alpha_bar_at(t);
  double ab_prev = s.alpha_bar_at(t - 1);
  return std::sqrt(s.beta_at(t) * (1.0 - ab_prev) / (1.0 - ab_t));
}

Tensor reverse_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& s,
                    const Tensor* noise_in) {
  return reverse_step_between(x_t, eps_hat, t, t - 1, s, noise_in);
}

Tensor reverse_step_between(const Tensor& x_t, const Tensor& eps_hat, int t, int t_prev,
                            const NoiseSchedule& s, const Tensor* noise_in) {
  check_step(s, t);
  if (t_prev < 0 || t_prev >= t)
    throw std::invalid_argument("reverse_step_between: need 0 <= t_prev < t");
  check_shape(x_t, eps_hat, "reverse_step");
  double ab_t = s.alpha_bar_at(t);
  double ab_prev = s.alpha_bar_at(t_prev);
  double beta_eff = 1.0 - ab_t / ab_prev;  // equals beta_t when t_prev = t-1
  double inv_sqrt_a = 1.0 / std::sqrt(ab_t / ab_prev);
  double eps_coef = beta_eff / std::sqrt(1.0 - ab_t);
  bool add_noise = t_prev > 0;
  double sigma = add_noise ? std::sqrt(beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)) : 0.0;
  if (add_noise) {
    if (!noise_in) throw std::invalid_argument("reverse_step: noise_in required for t_prev > 0");
    check_shape(x_t, *noise_in, "reverse_step noise");
  }
  Tensor out = x_t;
  for (size_t i = 0; i < out.data.size(); ++i) {
    double mean = inv_sqrt_a * (out.data[i] - eps_coef * eps_hat.data[i]);
    out.data[i] = add_noise ? mean + sigma * noise_in->data[i] : mean;
  }
  return out;
}

std::vector<int> respaced_steps(int T, int count) {
  if (count < 1 || count > T) throw std::invalid_argument("respaced_steps: bad count");
  std::vector<int> steps(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    // Evenly spaced in [1, T], descending, endpoints included.
    double frac = count == 1 ? 1.0 : static_cast<double>(count - 1 - i) / (count - 1);
    steps[static_cast<size_t>(i)] = 1 + static_cast<int>(std::lround(frac * (T - 1)));
  }
  for (size_t i = 1; i < steps.size(); ++i)
    if (steps[i] >= steps[i - 1]) throw std::logic_error("respaced_steps: not decreasing");
  return steps;
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double scale) {
  check_shape(eps_cond, eps_uncond, "cfg_combine");
  // (1-s)*u + s*c: algebraically u + s*(c-u) but exact at the s=0 and s=1
  // reductions.
  Tensor out = eps_uncond;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = (1.0 - scale) * out.data[i] + scale * eps_cond.data[i];
  return out;
}

void save_schedule(const std::string& path, const NoiseSchedule& s) {
  save_json(path, json{{"T", s.T},
                       {"beta_start", s.beta_start},
                       {"beta_end", s.beta_end},
                       {"schedule_kind", s.kind}});
}

NoiseSchedule load_schedule(const std::string& path) {
  json j = load_json(path);
  if (j.at("schedule_kind").get<std::string>() != "linear")
    throw std::runtime_error("load_schedule: unknown schedule_kind");
  return make_linear_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(),
                              j.at("beta_end").get<double>());
}

}  // namespace blobdiff
