#include "blobdiff/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace blobdiff {

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data) m = std::max(m, std::fabs(v));
  return m;
}

double Tensor::max_abs_diff(const Tensor& o) const {
  double m = 0.0;
  for (size_t i = 0; i < data.size(); ++i) m = std::max(m, std::fabs(data[i] - o.data[i]));
  return m;
}

bool Tensor::bit_equal(const Tensor& o) const {
  if (shape != o.shape) return false;
  return std::memcmp(data.data(), o.data.data(), data.size() * sizeof(double)) == 0;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

}  // namespace blobdiff
