#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "blobdiff/tensor.hpp"

namespace blobdiff::ag {

// Reverse-mode tape node. Graphs are built per evaluation; parameters are
// long-lived leaves shared across graphs.
struct Node {
  Tensor val;
  Tensor grad;  // allocated on demand, same shape as val
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

  void ensure_grad() {
    if (grad.shape != val.shape) grad = Tensor::zeros(val.shape);
  }
  void zero_grad() {
    if (grad.shape == val.shape)
      for (auto& g : grad.data) g = 0.0;
  }
};

struct Var {
  std::shared_ptr<Node> n;

  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : n(std::move(node)) {}

  bool defined() const { return static_cast<bool>(n); }
  const Tensor& val() const { return n->val; }
  Tensor& val() { return n->val; }
  const Tensor& grad() const { return n->grad; }
  const std::vector<int>& shape() const { return n->val.shape; }
  int dim(int i) const { return n->val.dim(i); }
  double item() const { return n->val.data.at(0); }
  bool requires_grad() const { return n->requires_grad; }
};

Var leaf(Tensor value, bool requires_grad = true);
Var constant(Tensor value);

// Runs reverse accumulation from a scalar root (seeds d(root)/d(root) = 1).
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var affine(const Var& a, double k, double c);  // k*a + c
Var neg(const Var& a);
Var square(const Var& a);
Var rsqrt_eps(const Var& a, double eps);  // 1/sqrt(a + eps)
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var clamp(const Var& a, double lo, double hi);

// ---- shape ----
Var reshape(const Var& a, std::vector<int> shape);
Var slice0(const Var& a, int start, int len);
Var concat0(const std::vector<Var>& parts);
Var slice1(const Var& a, int start, int len);                 // rank-3, token axis
Var concat1(const Var& a, const Var& b);                      // rank-3, token axis
Var transpose_last2(const Var& a);                            // rank-2 or rank-3
Var permute0213(const Var& a);                                // rank-4
Var expand0(const Var& a, int n);                             // prepend axis of size n

// ---- reductions / broadcasts ----
Var softmax_last(const Var& a);
Var sum_last(const Var& a);
Var sum_all(const Var& a);
Var mean_last(const Var& a);
Var mean_all(const Var& a);
Var add_lastb(const Var& x, const Var& s);  // x[...,D] + s[...]
Var mul_lastb(const Var& x, const Var& s);
Var add_rowb(const Var& x, const Var& b);  // x[...,D] + b[D]
Var mul_rowb(const Var& x, const Var& g);
Var channel_affine(const Var& x, const Var& g, const Var& b);  // x[F,C,H,W]*g[C]+b[C]
Var add_chanb(const Var& x, const Var& e);                     // x[F,C,H,W] + e[F,C]

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);    // [m,k] x [k,n]
Var matmul3(const Var& a, const Var& w);   // [g,m,k] x [k,n]
Var bmm(const Var& a, const Var& b);       // [g,m,k] x [g,k,n]

// ---- spatial ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample2(const Var& x);                // nearest neighbour 2x
Var global_avgpool(const Var& x);           // [F,C,H,W] -> [F,C]
// Crops out_size x out_size windows centered per frame; gradients flow into x
// only (centers are data).
Var bilinear_crop(const Var& x, const Tensor& centers, double half_size, int out_size);

// ---- graph ----
Var detach(const Var& a);

// ---- composites ----
Var mse(const Var& a, const Var& b);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta,
               double eps = 1e-5);
Var linear(const Var& x, const Var& w, const Var& b);  // rank-2/3 x, w[Din,Dout]

}  // namespace blobdiff::ag
