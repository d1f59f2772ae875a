#include "blobdiff/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "blobdiff/gemm.hpp"

namespace blobdiff::ag {

namespace {

Var make_node(Tensor val, std::vector<Var> parents, std::function<void(Node&)> bp) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  bool req = false;
  for (const auto& p : parents) req = req || p.n->requires_grad;
  n->requires_grad = req;
  if (req) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.n);
    n->backprop = std::move(bp);
  }
  return Var(n);
}

inline int64_t rows_of(const Tensor& t) {
  return t.numel() / t.shape.back();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

}  // namespace

Var leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->val = std::move(value);
  n->requires_grad = requires_grad;
  return Var(n);
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

void backward(const Var& root) {
  if (root.n->val.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  // Iterative post-order over the requires_grad subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.n.get(), 0);
  seen.insert(root.n.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.n->ensure_grad();
  root.n->grad.data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && node->requires_grad) node->backprop(*node);
  }
}

// ---- elementwise ----

Var add(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "add");
  Tensor out = a.val();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.val().data[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    for (int pi = 0; pi < 2; ++pi) {
      Node& p = *self.parents[pi];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (size_t i = 0; i < p.grad.data.size(); ++i) p.grad.data[i] += self.grad.data[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "sub");
  Tensor out = a.val();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.val().data[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < pa.grad.data.size(); ++i) pa.grad.data[i] += self.grad.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < pb.grad.data.size(); ++i) pb.grad.data[i] -= self.grad.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a.val(), b.val(), "mul");
  Tensor out = a.val();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.val().data[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < pa.grad.data.size(); ++i)
        pa.grad.data[i] += self.grad.data[i] * pb.val.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < pb.grad.data.size(); ++i)
        pb.grad.data[i] += self.grad.data[i] * pa.val.data[i];
    }
  });
}

Var affine(const Var& a, double k, double c) {
  Tensor out = a.val();
  for (auto& v : out.data) v = k * v + c;
  return make_node(std::move(out), {a}, [k](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < p.grad.data.size(); ++i) p.grad.data[i] += k * self.grad.data[i];
  });
}

Var neg(const Var& a) { return affine(a, -1.0, 0.0); }

Var square(const Var& a) {
  Tensor out = a.val();
  for (auto& v : out.data) v = v * v;
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < p.grad.data.size(); ++i)
      p.grad.data[i] += 2.0 * p.val.data[i] * self.grad.data[i];
  });
}

Var rsqrt_eps(const Var& a, double eps) {
  Tensor out = a.val();
  for (auto& v : out.data) v = 1.0 / std::sqrt(v + eps);
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < p.grad.data.size(); ++i) {
      double y = self.val.data[i];
      p.grad.data[i] += -0.5 * y * y * y * self.grad.data[i];
    }
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a.val();
  for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < p.grad.data.size(); ++i) {
      double s = self.val.data[i];
      p.grad.data[i] += s * (1.0 - s) * self.grad.data[i];
    }
  });
}

Var silu(const Var& a) {
  Tensor out = a.val();
  for (auto& v : out.data) v = v / (1.0 + std::exp(-v));
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < p.grad.data.size(); ++i) {
      double x = p.val.data[i];
      double s = 1.0 / (1.0 + std::exp(-x));
      p.grad.data[i] += s * (1.0 + x * (1.0 - s)) * self.grad.data[i];
    }
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Tensor out = a.val();
  for (auto& v : out.data) v = std::min(hi, std::max(lo, v));
  return make_node(std::move(out), {a}, [lo, hi](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < p.grad.data.size(); ++i) {
      double x = p.val.data[i];
      if (x >= lo && x <= hi) p.grad.data[i] += self.grad.data[i];
    }
  });
}

// ---- shape ----

Var reshape(const Var& a, std::vector<int> shape) {
  if (Tensor::count(shape) != a.val().numel())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out(std::move(shape), a.val().data);
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < p.grad.data.size(); ++i) p.grad.data[i] += self.grad.data[i];
  });
}

Var slice0(const Var& a, int start, int len) {
  const Tensor& x = a.val();
  if (start < 0 || len < 0 || start + len > x.shape[0])
    throw std::invalid_argument("slice0: out of range");
  int64_t inner = x.numel() / x.shape[0];
  std::vector<int> shp = x.shape;
  shp[0] = len;
  Tensor out(shp);
  std::memcpy(out.data.data(), x.data.data() + start * inner,
              static_cast<size_t>(len * inner) * sizeof(double));
  return make_node(std::move(out), {a}, [start, inner](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    int64_t n = self.grad.numel();
    for (int64_t i = 0; i < n; ++i) p.grad.data[start * inner + i] += self.grad.data[i];
  });
}

Var concat0(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat0: empty");
  std::vector<int> shp = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    for (size_t i = 1; i < shp.size(); ++i)
      if (p.shape()[i] != shp[i]) throw std::invalid_argument("concat0: shape mismatch");
    total += p.shape()[0];
  }
  shp[0] = total;
  Tensor out(shp);
  int64_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.data.data() + off, p.val().data.data(),
                p.val().data.size() * sizeof(double));
    off += p.val().numel();
  }
  return make_node(std::move(out), parts, [](Node& self) {
    int64_t off = 0;
    for (auto& pp : self.parents) {
      Node& p = *pp;
      int64_t n = p.val.numel();
      if (p.requires_grad) {
        p.ensure_grad();
        for (int64_t i = 0; i < n; ++i) p.grad.data[i] += self.grad.data[off + i];
      }
      off += n;
    }
  });
}

Var slice1(const Var& a, int start, int len) {
  const Tensor& x = a.val();
  if (x.rank() != 3) throw std::invalid_argument("slice1: rank-3 only");
  int G = x.shape[0], L = x.shape[1], D = x.shape[2];
  if (start < 0 || start + len > L) throw std::invalid_argument("slice1: out of range");
  Tensor out({G, len, D});
  for (int g = 0; g < G; ++g)
    std::memcpy(out.data.data() + static_cast<size_t>(g) * len * D,
                x.data.data() + (static_cast<size_t>(g) * L + start) * D,
                static_cast<size_t>(len) * D * sizeof(double));
  return make_node(std::move(out), {a}, [start, G, L, D, len](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (int g = 0; g < G; ++g)
      for (int64_t i = 0; i < static_cast<int64_t>(len) * D; ++i)
        p.grad.data[(static_cast<size_t>(g) * L + start) * D + i] +=
            self.grad.data[static_cast<size_t>(g) * len * D + i];
  });
}

Var concat1(const Var& a, const Var& b) {
  const Tensor& x = a.val();
  const Tensor& y = b.val();
  if (x.rank() != 3 || y.rank() != 3 || x.shape[0] != y.shape[0] || x.shape[2] != y.shape[2])
    throw std::invalid_argument("concat1: incompatible shapes");
  int G = x.shape[0], La = x.shape[1], Lb = y.shape[1], D = x.shape[2];
  Tensor out({G, La + Lb, D});
  for (int g = 0; g < G; ++g) {
    std::memcpy(out.data.data() + static_cast<size_t>(g) * (La + Lb) * D,
                x.data.data() + static_cast<size_t>(g) * La * D,
                static_cast<size_t>(La) * D * sizeof(double));
    std::memcpy(out.data.data() + (static_cast<size_t>(g) * (La + Lb) + La) * D,
                y.data.data() + static_cast<size_t>(g) * Lb * D,
                static_cast<size_t>(Lb) * D * sizeof(double));
  }
  return make_node(std::move(out), {a, b}, [G, La, Lb, D](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int g = 0; g < G; ++g)
        for (int64_t i = 0; i < static_cast<int64_t>(La) * D; ++i)
          pa.grad.data[static_cast<size_t>(g) * La * D + i] +=
              self.grad.data[static_cast<size_t>(g) * (La + Lb) * D + i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int g = 0; g < G; ++g)
        for (int64_t i = 0; i < static_cast<int64_t>(Lb) * D; ++i)
          pb.grad.data[static_cast<size_t>(g) * Lb * D + i] +=
              self.grad.data[(static_cast<size_t>(g) * (La + Lb) + La) * D + i];
    }
  });
}

Var transpose_last2(const Var& a) {
  const Tensor& x = a.val();
  int r = x.rank();
  if (r != 2 && r != 3) throw std::invalid_argument("transpose_last2: rank-2/3 only");
  int G = (r == 3) ? x.shape[0] : 1;
  int M = x.shape[r - 2], N = x.shape[r - 1];
  std::vector<int> shp = x.shape;
  std::swap(shp[r - 2], shp[r - 1]);
  Tensor out(shp);
  for (int g = 0; g < G; ++g) {
    const double* src = x.data.data() + static_cast<size_t>(g) * M * N;
    double* dst = out.data.data() + static_cast<size_t>(g) * M * N;
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j) dst[j * M + i] = src[i * N + j];
  }
  return make_node(std::move(out), {a}, [G, M, N](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (int g = 0; g < G; ++g) {
      const double* gsrc = self.grad.data.data() + static_cast<size_t>(g) * M * N;
      double* gdst = p.grad.data.data() + static_cast<size_t>(g) * M * N;
      for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) gdst[i * N + j] += gsrc[j * M + i];
    }
  });
}

Var permute0213(const Var& a) {
  const Tensor& x = a.val();
  if (x.rank() != 4) throw std::invalid_argument("permute0213: rank-4 only");
  int A = x.shape[0], B = x.shape[1], C = x.shape[2], D = x.shape[3];
  Tensor out({A, C, B, D});
  for (int i = 0; i < A; ++i)
    for (int j = 0; j < B; ++j)
      for (int k = 0; k < C; ++k)
        std::memcpy(&out.at(i, k, j, 0), &x.data[((static_cast<size_t>(i) * B + j) * C + k) * D],
                    static_cast<size_t>(D) * sizeof(double));
  return make_node(std::move(out), {a}, [A, B, C, D](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (int i = 0; i < A; ++i)
      for (int j = 0; j < B; ++j)
        for (int k = 0; k < C; ++k)
          for (int l = 0; l < D; ++l)
            p.grad.data[((static_cast<size_t>(i) * B + j) * C + k) * D + l] +=
                self.grad.data[((static_cast<size_t>(i) * C + k) * B + j) * D + l];
  });
}

Var expand0(const Var& a, int n) {
  const Tensor& x = a.val();
  std::vector<int> shp;
  shp.push_back(n);
  shp.insert(shp.end(), x.shape.begin(), x.shape.end());
  Tensor out(shp);
  int64_t inner = x.numel();
  for (int i = 0; i < n; ++i)
    std::memcpy(out.data.data() + static_cast<size_t>(i) * inner, x.data.data(),
                static_cast<size_t>(inner) * sizeof(double));
  return make_node(std::move(out), {a}, [n, inner](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int64_t j = 0; j < inner; ++j)
        p.grad.data[j] += self.grad.data[static_cast<size_t>(i) * inner + j];
  });
}

// ---- reductions / broadcasts ----

Var softmax_last(const Var& a) {
  const Tensor& x = a.val();
  int D = x.shape.back();
  int64_t R = rows_of(x);
  Tensor out = x;
  for (int64_t r = 0; r < R; ++r) {
    double* row = out.data.data() + r * D;
    double mx = row[0];
    for (int i = 1; i < D; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (int i = 0; i < D; ++i) {
      row[i] = std::exp(row[i] - mx);
      sum += row[i];
    }
    for (int i = 0; i < D; ++i) row[i] /= sum;
  }
  return make_node(std::move(out), {a}, [D, R](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (int64_t r = 0; r < R; ++r) {
      const double* y = self.val.data.data() + r * D;
      const double* gy = self.grad.data.data() + r * D;
      double* gx = p.grad.data.data() + r * D;
      double dot = 0.0;
      for (int i = 0; i < D; ++i) dot += gy[i] * y[i];
      for (int i = 0; i < D; ++i) gx[i] += y[i] * (gy[i] - dot);
    }
  });
}

Var sum_last(const Var& a) {
  const Tensor& x = a.val();
  int D = x.shape.back();
  int64_t R = rows_of(x);
  std::vector<int> shp(x.shape.begin(), x.shape.end() - 1);
  if (shp.empty()) shp.push_back(1);
  Tensor out(shp);
  for (int64_t r = 0; r < R; ++r) {
    double s = 0.0;
    const double* row = x.data.data() + r * D;
    for (int i = 0; i < D; ++i) s += row[i];
    out.data[static_cast<size_t>(r)] = s;
  }
  return make_node(std::move(out), {a}, [D, R](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (int64_t r = 0; r < R; ++r) {
      double g = self.grad.data[static_cast<size_t>(r)];
      double* row = p.grad.data.data() + r * D;
      for (int i = 0; i < D; ++i) row[i] += g;
    }
  });
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a.val().data) s += v;
  Tensor out({1}, {s});
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    double g = self.grad.data[0];
    for (auto& v : p.grad.data) v += g;
  });
}

Var mean_last(const Var& a) {
  return affine(sum_last(a), 1.0 / a.val().shape.back(), 0.0);
}

Var mean_all(const Var& a) {
  return affine(sum_all(a), 1.0 / static_cast<double>(a.val().numel()), 0.0);
}

Var add_lastb(const Var& x, const Var& s) {
  const Tensor& xv = x.val();
  int D = xv.shape.back();
  int64_t R = rows_of(xv);
  if (s.val().numel() != R) throw std::invalid_argument("add_lastb: size mismatch");
  Tensor out = xv;
  for (int64_t r = 0; r < R; ++r) {
    double b = s.val().data[static_cast<size_t>(r)];
    double* row = out.data.data() + r * D;
    for (int i = 0; i < D; ++i) row[i] += b;
  }
  return make_node(std::move(out), {x, s}, [D, R](Node& self) {
    Node& px = *self.parents[0];
    Node& ps = *self.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (size_t i = 0; i < px.grad.data.size(); ++i) px.grad.data[i] += self.grad.data[i];
    }
    if (ps.requires_grad) {
      ps.ensure_grad();
      for (int64_t r = 0; r < R; ++r) {
        double g = 0.0;
        const double* row = self.grad.data.data() + r * D;
        for (int i = 0; i < D; ++i) g += row[i];
        ps.grad.data[static_cast<size_t>(r)] += g;
      }
    }
  });
}

Var mul_lastb(const Var& x, const Var& s) {
  const Tensor& xv = x.val();
  int D = xv.shape.back();
  int64_t R = rows_of(xv);
  if (s.val().numel() != R) throw std::invalid_argument("mul_lastb: size mismatch");
  Tensor out = xv;
  for (int64_t r = 0; r < R; ++r) {
    double m = s.val().data[static_cast<size_t>(r)];
    double* row = out.data.data() + r * D;
    for (int i = 0; i < D; ++i) row[i] *= m;
  }
  return make_node(std::move(out), {x, s}, [D, R](Node& self) {
    Node& px = *self.parents[0];
    Node& ps = *self.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (int64_t r = 0; r < R; ++r) {
        double m = ps.val.data[static_cast<size_t>(r)];
        for (int i = 0; i < D; ++i)
          px.grad.data[r * D + i] += m * self.grad.data[r * D + i];
      }
    }
    if (ps.requires_grad) {
      ps.ensure_grad();
      for (int64_t r = 0; r < R; ++r) {
        double g = 0.0;
        for (int i = 0; i < D; ++i)
          g += self.grad.data[r * D + i] * px.val.data[r * D + i];
        ps.grad.data[static_cast<size_t>(r)] += g;
      }
    }
  });
}

Var add_rowb(const Var& x, const Var& b) {
  const Tensor& xv = x.val();
  int D = xv.shape.back();
  if (b.val().numel() != D) throw std::invalid_argument("add_rowb: size mismatch");
  int64_t R = rows_of(xv);
  Tensor out = xv;
  for (int64_t r = 0; r < R; ++r) {
    double* row = out.data.data() + r * D;
    for (int i = 0; i < D; ++i) row[i] += b.val().data[static_cast<size_t>(i)];
  }
  return make_node(std::move(out), {x, b}, [D, R](Node& self) {
    Node& px = *self.parents[0];
    Node& pb = *self.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (size_t i = 0; i < px.grad.data.size(); ++i) px.grad.data[i] += self.grad.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int64_t r = 0; r < R; ++r)
        for (int i = 0; i < D; ++i)
          pb.grad.data[static_cast<size_t>(i)] += self.grad.data[r * D + i];
    }
  });
}

Var mul_rowb(const Var& x, const Var& g) {
  const Tensor& xv = x.val();
  int D = xv.shape.back();
  if (g.val().numel() != D) throw std::invalid_argument("mul_rowb: size mismatch");
  int64_t R = rows_of(xv);
  Tensor out = xv;
  for (int64_t r = 0; r < R; ++r) {
    double* row = out.data.data() + r * D;
    for (int i = 0; i < D; ++i) row[i] *= g.val().data[static_cast<size_t>(i)];
  }
  return make_node(std::move(out), {x, g}, [D, R](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (int64_t r = 0; r < R; ++r)
        for (int i = 0; i < D; ++i)
          px.grad.data[r * D + i] += pg.val.data[static_cast<size_t>(i)] * self.grad.data[r * D + i];
    }
    if (pg.requires_grad) {
      pg.ensure_grad();
      for (int64_t r = 0; r < R; ++r)
        for (int i = 0; i < D; ++i)
          pg.grad.data[static_cast<size_t>(i)] += self.grad.data[r * D + i] * px.val.data[r * D + i];
    }
  });
}

Var channel_affine(const Var& x, const Var& g, const Var& b) {
  const Tensor& xv = x.val();
  if (xv.rank() != 4) throw std::invalid_argument("channel_affine: rank-4 only");
  int F = xv.shape[0], C = xv.shape[1];
  int64_t HW = static_cast<int64_t>(xv.shape[2]) * xv.shape[3];
  if (g.val().numel() != C || b.val().numel() != C)
    throw std::invalid_argument("channel_affine: channel mismatch");
  Tensor out = xv;
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c) {
      double gg = g.val().data[static_cast<size_t>(c)];
      double bb = b.val().data[static_cast<size_t>(c)];
      double* p = out.data.data() + (static_cast<int64_t>(f) * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) p[i] = p[i] * gg + bb;
    }
  return make_node(std::move(out), {x, g, b}, [F, C, HW](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    if (px.requires_grad) {
      px.ensure_grad();
      for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c) {
          double gg = pg.val.data[static_cast<size_t>(c)];
          int64_t off = (static_cast<int64_t>(f) * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i)
            px.grad.data[off + i] += gg * self.grad.data[off + i];
        }
    }
    if (pg.requires_grad) {
      pg.ensure_grad();
      for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c) {
          int64_t off = (static_cast<int64_t>(f) * C + c) * HW;
          double s = 0.0;
          for (int64_t i = 0; i < HW; ++i) s += self.grad.data[off + i] * px.val.data[off + i];
          pg.grad.data[static_cast<size_t>(c)] += s;
        }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c) {
          int64_t off = (static_cast<int64_t>(f) * C + c) * HW;
          double s = 0.0;
          for (int64_t i = 0; i < HW; ++i) s += self.grad.data[off + i];
          pb.grad.data[static_cast<size_t>(c)] += s;
        }
    }
  });
}

Var add_chanb(const Var& x, const Var& e) {
  const Tensor& xv = x.val();
  if (xv.rank() != 4 || e.val().rank() != 2) throw std::invalid_argument("add_chanb: bad ranks");
  int F = xv.shape[0], C = xv.shape[1];
  if (e.val().shape[0] != F || e.val().shape[1] != C)
    throw std::invalid_argument("add_chanb: shape mismatch");
  int64_t HW = static_cast<int64_t>(xv.shape[2]) * xv.shape[3];
  Tensor out = xv;
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c) {
      double ee = e.val().at(f, c);
      double* p = out.data.data() + (static_cast<int64_t>(f) * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) p[i] += ee;
    }
  return make_node(std::move(out), {x, e}, [F, C, HW](Node& self) {
    Node& px = *self.parents[0];
    Node& pe = *self.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (size_t i = 0; i < px.grad.data.size(); ++i) px.grad.data[i] += self.grad.data[i];
    }
    if (pe.requires_grad) {
      pe.ensure_grad();
      for (int f = 0; f < F; ++f)
        for (int c = 0; c < C; ++c) {
          int64_t off = (static_cast<int64_t>(f) * C + c) * HW;
          double s = 0.0;
          for (int64_t i = 0; i < HW; ++i) s += self.grad.data[off + i];
          pe.grad.at(f, c) += s;
        }
    }
  });
}

// ---- linear algebra ----

Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
    throw std::invalid_argument("matmul: incompatible shapes");
  int m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor out({m, n});
  gemm_nn(A.data.data(), B.data.data(), out.data.data(), m, k, n, false);
  return make_node(std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      gemm_nt(self.grad.data.data(), pb.val.data.data(), pa.grad.data.data(), m, n, k, true);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      gemm_tn(pa.val.data.data(), self.grad.data.data(), pb.grad.data.data(), k, m, n, true);
    }
  });
}

Var matmul3(const Var& a, const Var& w) {
  const Tensor& A = a.val();
  const Tensor& W = w.val();
  if (A.rank() != 3 || W.rank() != 2 || A.shape[2] != W.shape[0])
    throw std::invalid_argument("matmul3: incompatible shapes");
  int g = A.shape[0], m = A.shape[1], k = A.shape[2], n = W.shape[1];
  Tensor out({g, m, n});
  gemm_nn(A.data.data(), W.data.data(), out.data.data(), g * m, k, n, false);
  return make_node(std::move(out), {a, w}, [g, m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pw = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      gemm_nt(self.grad.data.data(), pw.val.data.data(), pa.grad.data.data(), g * m, n, k, true);
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      gemm_tn(pa.val.data.data(), self.grad.data.data(), pw.grad.data.data(), k, g * m, n, true);
    }
  });
}

Var bmm(const Var& a, const Var& b) {
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.rank() != 3 || B.rank() != 3 || A.shape[0] != B.shape[0] || A.shape[2] != B.shape[1])
    throw std::invalid_argument("bmm: incompatible shapes");
  int G = A.shape[0], m = A.shape[1], k = A.shape[2], n = B.shape[2];
  Tensor out({G, m, n});
  for (int gi = 0; gi < G; ++gi)
    gemm_nn(A.data.data() + static_cast<size_t>(gi) * m * k,
            B.data.data() + static_cast<size_t>(gi) * k * n,
            out.data.data() + static_cast<size_t>(gi) * m * n, m, k, n, false);
  return make_node(std::move(out), {a, b}, [G, m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int gi = 0; gi < G; ++gi)
        gemm_nt(self.grad.data.data() + static_cast<size_t>(gi) * m * n,
                pb.val.data.data() + static_cast<size_t>(gi) * k * n,
                pa.grad.data.data() + static_cast<size_t>(gi) * m * k, m, n, k, true);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int gi = 0; gi < G; ++gi)
        gemm_tn(pa.val.data.data() + static_cast<size_t>(gi) * m * k,
                self.grad.data.data() + static_cast<size_t>(gi) * m * n,
                pb.grad.data.data() + static_cast<size_t>(gi) * k * n, k, m, n, true);
    }
  });
}

// ---- spatial ----

namespace {

// cols[(ci*kh+u)*kw+v, ho*Wo+wo]; zero padding.
void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, double* cols) {
  for (int c = 0; c < C; ++c)
    for (int u = 0; u < kh; ++u)
      for (int v = 0; v < kw; ++v) {
        double* dst = cols + ((static_cast<size_t>(c) * kh + u) * kw + v) * Ho * Wo;
        for (int ho = 0; ho < Ho; ++ho) {
          int hi = ho * stride - pad + u;
          if (hi < 0 || hi >= H) {
            for (int wo = 0; wo < Wo; ++wo) dst[ho * Wo + wo] = 0.0;
            continue;
          }
          const double* src = x + (static_cast<size_t>(c) * H + hi) * W;
          for (int wo = 0; wo < Wo; ++wo) {
            int wi = wo * stride - pad + v;
            dst[ho * Wo + wo] = (wi >= 0 && wi < W) ? src[wi] : 0.0;
          }
        }
      }
}

void col2im_acc(const double* cols, int C, int H, int W, int kh, int kw, int stride, int pad,
                int Ho, int Wo, double* dx) {
  for (int c = 0; c < C; ++c)
    for (int u = 0; u < kh; ++u)
      for (int v = 0; v < kw; ++v) {
        const double* src = cols + ((static_cast<size_t>(c) * kh + u) * kw + v) * Ho * Wo;
        for (int ho = 0; ho < Ho; ++ho) {
          int hi = ho * stride - pad + u;
          if (hi < 0 || hi >= H) continue;
          double* dst = dx + (static_cast<size_t>(c) * H + hi) * W;
          for (int wo = 0; wo < Wo; ++wo) {
            int wi = wo * stride - pad + v;
            if (wi >= 0 && wi < W) dst[wi] += src[ho * Wo + wo];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& X = x.val();
  const Tensor& W = w.val();
  if (X.rank() != 4 || W.rank() != 4) throw std::invalid_argument("conv2d: bad ranks");
  int F = X.shape[0], Ci = X.shape[1], H = X.shape[2], Wd = X.shape[3];
  int Co = W.shape[0], kh = W.shape[2], kw = W.shape[3];
  if (W.shape[1] != Ci || b.val().numel() != Co)
    throw std::invalid_argument("conv2d: channel mismatch");
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (Wd + 2 * pad - kw) / stride + 1;
  int K = Ci * kh * kw;
  Tensor out({F, Co, Ho, Wo});
  std::vector<double> cols(static_cast<size_t>(K) * Ho * Wo);
  for (int f = 0; f < F; ++f) {
    im2col(X.data.data() + static_cast<size_t>(f) * Ci * H * Wd, Ci, H, Wd, kh, kw, stride,
           pad, Ho, Wo, cols.data());
    double* of = out.data.data() + static_cast<size_t>(f) * Co * Ho * Wo;
    gemm_nn(W.data.data(), cols.data(), of, Co, K, Ho * Wo, false);
    for (int c = 0; c < Co; ++c) {
      double bb = b.val().data[static_cast<size_t>(c)];
      for (int i = 0; i < Ho * Wo; ++i) of[static_cast<size_t>(c) * Ho * Wo + i] += bb;
    }
  }
  auto bp = [F, Ci, H, Wd, Co, kh, kw, stride, pad, Ho, Wo, K](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    std::vector<double> cols(static_cast<size_t>(K) * Ho * Wo);
    std::vector<double> dcols(static_cast<size_t>(K) * Ho * Wo);
    if (px.requires_grad) px.ensure_grad();
    if (pw.requires_grad) pw.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (int f = 0; f < F; ++f) {
      const double* g = self.grad.data.data() + static_cast<size_t>(f) * Co * Ho * Wo;
      if (pw.requires_grad || pb.requires_grad)
        im2col(px.val.data.data() + static_cast<size_t>(f) * Ci * H * Wd, Ci, H, Wd, kh, kw,
               stride, pad, Ho, Wo, cols.data());
      if (pw.requires_grad)
        gemm_nt(g, cols.data(), pw.grad.data.data(), Co, Ho * Wo, K, true);
      if (pb.requires_grad)
        for (int c = 0; c < Co; ++c) {
          double s = 0.0;
          for (int i = 0; i < Ho * Wo; ++i) s += g[static_cast<size_t>(c) * Ho * Wo + i];
          pb.grad.data[static_cast<size_t>(c)] += s;
        }
      if (px.requires_grad) {
        gemm_tn(pw.val.data.data(), g, dcols.data(), K, Co, Ho * Wo, false);
        col2im_acc(dcols.data(), Ci, H, Wd, kh, kw, stride, pad, Ho, Wo,
                   px.grad.data.data() + static_cast<size_t>(f) * Ci * H * Wd);
      }
    }
  };
  return make_node(std::move(out), {x, w, b}, std::move(bp));
}

Var upsample2(const Var& x) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw std::invalid_argument("upsample2: rank-4 only");
  int F = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  Tensor out({F, C, H * 2, W * 2});
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c) {
      const double* src = X.data.data() + (static_cast<size_t>(f) * C + c) * H * W;
      double* dst = out.data.data() + (static_cast<size_t>(f) * C + c) * H * W * 4;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          double v = src[i * W + j];
          dst[(2 * i) * 2 * W + 2 * j] = v;
          dst[(2 * i) * 2 * W + 2 * j + 1] = v;
          dst[(2 * i + 1) * 2 * W + 2 * j] = v;
          dst[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
        }
    }
  return make_node(std::move(out), {x}, [F, C, H, W](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (int f = 0; f < F; ++f)
      for (int c = 0; c < C; ++c) {
        double* gdst = p.grad.data.data() + (static_cast<size_t>(f) * C + c) * H * W;
        const double* gsrc = self.grad.data.data() + (static_cast<size_t>(f) * C + c) * H * W * 4;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j)
            gdst[i * W + j] += gsrc[(2 * i) * 2 * W + 2 * j] + gsrc[(2 * i) * 2 * W + 2 * j + 1] +
                               gsrc[(2 * i + 1) * 2 * W + 2 * j] +
                               gsrc[(2 * i + 1) * 2 * W + 2 * j + 1];
      }
  });
}

Var global_avgpool(const Var& x) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw std::invalid_argument("global_avgpool: rank-4 only");
  int F = X.shape[0], C = X.shape[1];
  int64_t HW = static_cast<int64_t>(X.shape[2]) * X.shape[3];
  Tensor out({F, C});
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c) {
      const double* p = X.data.data() + (static_cast<int64_t>(f) * C + c) * HW;
      double s = 0.0;
      for (int64_t i = 0; i < HW; ++i) s += p[i];
      out.at(f, c) = s / static_cast<double>(HW);
    }
  return make_node(std::move(out), {x}, [F, C, HW](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    double inv = 1.0 / static_cast<double>(HW);
    for (int f = 0; f < F; ++f)
      for (int c = 0; c < C; ++c) {
        double g = self.grad.at(f, c) * inv;
        double* gp = p.grad.data.data() + (static_cast<int64_t>(f) * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) gp[i] += g;
      }
  });
}

Var bilinear_crop(const Var& x, const Tensor& centers, double half_size, int out_size) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw std::invalid_argument("bilinear_crop: rank-4 only");
  if (half_size <= 0.0) throw std::invalid_argument("bilinear_crop: degenerate crop");
  int F = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  if (centers.rank() != 2 || centers.shape[0] != F || centers.shape[1] != 2)
    throw std::invalid_argument("bilinear_crop: centers must be [F,2]");
  int O = out_size;
  double step = 2.0 * half_size / O;
  Tensor out({F, C, O, O});
  // Sample positions in pixel-center coordinates, edge-replicated.
  auto sample_axis = [](double q, int limit, int& i0, double& a) {
    double u = q - 0.5;
    double fi = std::floor(u);
    i0 = static_cast<int>(fi);
    a = u - fi;
    if (i0 < 0) {
      i0 = 0;
      a = 0.0;
    } else if (i0 >= limit - 1) {
      i0 = limit - 2 >= 0 ? limit - 2 : 0;
      a = limit > 1 ? 1.0 : 0.0;
    }
  };
  for (int f = 0; f < F; ++f) {
    double cx = centers.at(f, 0), cy = centers.at(f, 1);
    for (int oy = 0; oy < O; ++oy) {
      int iy;
      double ay;
      sample_axis(cy - half_size + (oy + 0.5) * step, H, iy, ay);
      for (int ox = 0; ox < O; ++ox) {
        int ix;
        double ax;
        sample_axis(cx - half_size + (ox + 0.5) * step, W, ix, ax);
        for (int c = 0; c < C; ++c) {
          const double* src = X.data.data() + (static_cast<size_t>(f) * C + c) * H * W;
          double v00 = src[iy * W + ix];
          double v01 = src[iy * W + std::min(ix + 1, W - 1)];
          double v10 = src[std::min(iy + 1, H - 1) * W + ix];
          double v11 = src[std::min(iy + 1, H - 1) * W + std::min(ix + 1, W - 1)];
          out.at(f, c, oy, ox) = (1 - ay) * ((1 - ax) * v00 + ax * v01) +
                                 ay * ((1 - ax) * v10 + ax * v11);
        }
      }
    }
  }
  Tensor centers_copy = centers;
  auto bp = [centers_copy, half_size, O, step, F, C, H, W, sample_axis](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (int f = 0; f < F; ++f) {
      double cx = centers_copy.at(f, 0), cy = centers_copy.at(f, 1);
      for (int oy = 0; oy < O; ++oy) {
        int iy;
        double ay;
        sample_axis(cy - half_size + (oy + 0.5) * step, H, iy, ay);
        for (int ox = 0; ox < O; ++ox) {
          int ix;
          double ax;
          sample_axis(cx - half_size + (ox + 0.5) * step, W, ix, ax);
          for (int c = 0; c < C; ++c) {
            double g = self.grad.at(f, c, oy, ox);
            double* gp = p.grad.data.data() + (static_cast<size_t>(f) * C + c) * H * W;
            gp[iy * W + ix] += (1 - ay) * (1 - ax) * g;
            gp[iy * W + std::min(ix + 1, W - 1)] += (1 - ay) * ax * g;
            gp[std::min(iy + 1, H - 1) * W + ix] += ay * (1 - ax) * g;
            gp[std::min(iy + 1, H - 1) * W + std::min(ix + 1, W - 1)] += ay * ax * g;
          }
        }
      }
    }
  };
  return make_node(std::move(out), {x}, std::move(bp));
}

// ---- graph ----

Var detach(const Var& a) { return constant(a.val()); }

// ---- composites ----

Var mse(const Var& a, const Var& b) { return mean_all(square(sub(a, b))); }

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  Var m = mean_last(x);
  Var xm = add_lastb(x, neg(m));
  Var v = mean_last(square(xm));
  Var y = mul_lastb(xm, rsqrt_eps(v, eps));
  return add_rowb(mul_rowb(y, gamma), beta);
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw std::invalid_argument("group_norm: rank-4 only");
  int F = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  if (C % groups != 0) throw std::invalid_argument("group_norm: C % groups != 0");
  Var flat = reshape(x, {F * groups, (C / groups) * H * W});
  Var m = mean_last(flat);
  Var xm = add_lastb(flat, neg(m));
  Var v = mean_last(square(xm));
  Var y = mul_lastb(xm, rsqrt_eps(v, eps));
  return channel_affine(reshape(y, {F, C, H, W}), gamma, beta);
}

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.val().rank() == 2) return add_rowb(matmul(x, w), b);
  if (x.val().rank() == 3) return add_rowb(matmul3(x, w), b);
  throw std::invalid_argument("linear: rank-2/3 only");
}

}  // namespace blobdiff::ag
