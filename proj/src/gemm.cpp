#include "blobdiff/gemm.hpp"

#include <Eigen/Core>

namespace blobdiff {

namespace {
using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;
}  // namespace

void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  MapC A(a, m, k), B(b, k, n);
  MapM C(c, m, n);
  if (acc)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  MapC A(a, m, k), B(b, n, k);
  MapM C(c, m, n);
  if (acc)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  MapC A(a, k, m), B(b, k, n);
  MapM C(c, m, n);
  if (acc)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

}  // namespace blobdiff
