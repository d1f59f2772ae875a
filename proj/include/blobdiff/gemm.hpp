#pragma once

#include <cstdint>

namespace blobdiff {

// C[m,n] (+)= A[m,k] * B[k,n], row-major buffers. Accumulates when acc is true.
void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
// C[m,n] (+)= A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
// C[m,n] (+)= A[k,m]^T * B[k,n]
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc);

}  // namespace blobdiff
