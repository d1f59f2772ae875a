#include "blobdiff/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace blobdiff {

void AdamW::step(ParamStore& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const std::string& name : params.names()) {
    ag::Var p = params.get(name);
    if (!p.requires_grad()) continue;
    const Tensor& g = p.n->grad;
    // A leaf that never entered a graph this step has no grad buffer; skip it
    // (a present-but-zero gradient still counts as a step, as usual for Adam).
    if (g.shape != p.val().shape) continue;
    Tensor& m = m_[name];
    Tensor& v = v_[name];
    if (m.shape != p.val().shape) m = Tensor::zeros(p.val().shape);
    if (v.shape != p.val().shape) v = Tensor::zeros(p.val().shape);
    Tensor& x = p.val();
    for (size_t i = 0; i < x.data.size(); ++i) {
      const double gi = g.data[i];
      m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * gi;
      v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mh = m.data[i] / bc1;
      const double vh = v.data[i] / bc2;
      x.data[i] -= cfg_.lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * x.data[i]);
    }
  }
  params.zero_grads();
}

TensorMap AdamW::state() const {
  TensorMap st;
  st["t"] = Tensor({1}, {static_cast<double>(t_)});
  for (const auto& [name, m] : m_) st["m/" + name] = m;
  for (const auto& [name, v] : v_) st["v/" + name] = v;
  return st;
}

void AdamW::load_state(const TensorMap& st) {
  auto it = st.find("t");
  if (it == st.end()) throw std::invalid_argument("AdamW::load_state: missing step count");
  m_.clear();
  v_.clear();
  t_ = static_cast<int64_t>(it->second.data.at(0));
  for (const auto& [key, tensor] : st) {
    if (key.rfind("m/", 0) == 0)
      m_[key.substr(2)] = tensor;
    else if (key.rfind("v/", 0) == 0)
      v_[key.substr(2)] = tensor;
    else if (key != "t")
      throw std::invalid_argument("AdamW::load_state: unexpected key " + key);
  }
}

}  // namespace blobdiff
