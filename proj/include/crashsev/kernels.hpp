#pragma once

// Dense numeric kernels used by the neural network core and the nearest-neighbour search.
//
// Every kernel exists twice: `serial::` is the plain reference loop nest kept for testing,
// `par::` is the OpenMP version used in production. Both compute each output element with
// the same reduction order (ascending inner index, explicit fma in the products), so the two
// agree bit-for-bit. Parallelism is only ever across independent output rows.

#include <cmath>
#include <cstddef>
#include <vector>

namespace crashsev::kernels {

namespace serial {

/// C[M,N] (+)= A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = accumulate ? c[i * n + j] : T(0);
            for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[i * k + p], b[p * n + j], acc);
            c[i * n + j] = acc;
        }
    }
}

/// C[M,N] (+)= A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = accumulate ? c[i * n + j] : T(0);
            for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[p * m + i], b[p * n + j], acc);
            c[i * n + j] = acc;
        }
    }
}

/// C[M,N] (+)= A[M,K] * B[N,K]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = accumulate ? c[i * n + j] : T(0);
            for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[i * k + p], b[j * k + p], acc);
            c[i * n + j] = acc;
        }
    }
}

/// C(i, j) (+)= sum_p A(i, p) B(p, j) with A(i, p) = a[i * ars + p * acs], B(p, j) = b[p * ldb + j],
/// C(i, j) = c[i * ldc + j].
template <class T>
void gemm_strided(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t ars, std::size_t acs,
                  const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = accumulate ? c[i * ldc + j] : T(0);
            for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[i * ars + p * acs], b[p * ldb + j], acc);
            c[i * ldc + j] = acc;
        }
    }
}

/// out[j] = sum_c (q[c] - x[j,c])^2 over a row-major point set x[n,d].
inline void sq_distances(std::size_t n, std::size_t d, const double* x, const double* q, double* out) {
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double diff = q[c] - x[j * d + c];
            acc += diff * diff;
        }
        out[j] = acc;
    }
}

}  // namespace serial

namespace par {

namespace detail {

// Register-blocked C[i0:i0+R, j0:j0+J] (+)= A * B over columns [j0, n) in J-wide tiles, with
// A(i, p) = a[i * ars + p * acs], B(p, j) = b[p * ldb + j], C(i, j) = c[i * ldc + j]. The tile
// lives in registers while p runs; every C[i,j] still accumulates over p in ascending order
// with fma, so results match serial:: exactly. Returns the first column not handled.
template <class T, std::size_t R, std::size_t J>
inline std::size_t gemm_tiles(std::size_t i0, std::size_t j0, std::size_t k, std::size_t n, const T* a,
                              std::size_t ars, std::size_t acs, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                              bool accumulate) {
    for (; j0 + J <= n; j0 += J) {
        T acc[R][J];
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t jj = 0; jj < J; ++jj) acc[r][jj] = accumulate ? c[(i0 + r) * ldc + j0 + jj] : T(0);
        for (std::size_t p = 0; p < k; ++p) {
            const T* brow = b + p * ldb + j0;
            for (std::size_t r = 0; r < R; ++r) {
                const T av = a[(i0 + r) * ars + p * acs];
#pragma omp simd
                for (std::size_t jj = 0; jj < J; ++jj) acc[r][jj] = std::fma(av, brow[jj], acc[r][jj]);
            }
        }
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t jj = 0; jj < J; ++jj) c[(i0 + r) * ldc + j0 + jj] = acc[r][jj];
    }
    return j0;
}

template <class T, std::size_t R>
inline void gemm_rows(std::size_t i0, std::size_t k, std::size_t n, const T* a, std::size_t ars, std::size_t acs,
                      const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
    constexpr std::size_t V = 32 / sizeof(T);  // one 256-bit vector
    std::size_t j0 = gemm_tiles<T, R, 4 * V>(i0, 0, k, n, a, ars, acs, b, ldb, c, ldc, accumulate);
    j0 = gemm_tiles<T, R, 2 * V>(i0, j0, k, n, a, ars, acs, b, ldb, c, ldc, accumulate);
    j0 = gemm_tiles<T, R, V>(i0, j0, k, n, a, ars, acs, b, ldb, c, ldc, accumulate);
    for (; j0 < n; ++j0)
        for (std::size_t r = 0; r < R; ++r) {
            T acc = accumulate ? c[(i0 + r) * ldc + j0] : T(0);
            for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[(i0 + r) * ars + p * acs], b[p * ldb + j0], acc);
            c[(i0 + r) * ldc + j0] = acc;
        }
}

}  // namespace detail

/// General strided product C (+)= A * B with A(i, p) = a[i * ars + p * acs], B(p, j) = b[p * ldb + j]
/// and C(i, j) = c[i * ldc + j]. Covers transposed A and sub-blocks of wider matrices.
template <class T>
void gemm_strided(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t ars, std::size_t acs,
                  const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
    constexpr std::size_t R = 4;
    const long blocks = static_cast<long>(m / R);
#pragma omp parallel for schedule(static) if (m * k * n > (1u << 16))
    for (long bi = 0; bi < blocks; ++bi)
        detail::gemm_rows<T, R>(static_cast<std::size_t>(bi) * R, k, n, a, ars, acs, b, ldb, c, ldc, accumulate);
    for (std::size_t i = m - m % R; i < m; ++i) detail::gemm_rows<T, 1>(i, k, n, a, ars, acs, b, ldb, c, ldc, accumulate);
}

template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
    gemm_strided(m, k, n, a, k, 1, b, n, c, n, accumulate);
}

template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
    gemm_strided(m, k, n, a, 1, m, b, n, c, n, accumulate);
}

template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
    // Transpose B once so the inner loop is contiguous; the per-element order is unchanged.
    std::vector<T> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    gemm_nn(m, k, n, a, bt.data(), c, accumulate);
}

/// Same contract as serial::sq_distances, but takes the point set feature-major (xt[d,n])
/// so the loop vectorizes across points.
inline void sq_distances_colmajor(std::size_t n, std::size_t d, const double* xt, const double* q, double* out) {
    for (std::size_t j = 0; j < n; ++j) out[j] = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
        const double qc = q[c];
        const double* col = xt + c * n;
#pragma omp simd
        for (std::size_t j = 0; j < n; ++j) {
            const double diff = qc - col[j];
            out[j] += diff * diff;
        }
    }
}

}  // namespace par

}  // namespace crashsev::kernels
