#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>

#include <omp.h>

// Data-parallel compute kernels. Every kernel comes in two flavors with
// identical loop bodies: a serial reference under stmem::ref (kept for
// testing) and an OpenMP version under stmem:: used by the library. Each
// output element is produced by exactly one thread with a fixed-order inner
// reduction, so both flavors are bitwise identical for any thread count.
// tools/bench_kernels compares their throughput.

namespace stmem {

// Thread cap: STMEM_THREADS wins over the OpenMP default.
inline int num_threads() {
    static const int n = [] {
        if (const char* s = std::getenv("STMEM_THREADS")) {
            const int v = std::atoi(s);
            if (v > 0) return v;
        }
        return omp_get_max_threads();
    }();
    return n;
}

namespace detail {

constexpr std::int64_t kParallelGrain = 1 << 15;  // flops below this run inline

template <class Real>
inline Real gelu_scalar(Real x) {
    // exact erf form
    return Real(0.5) * x * (Real(1) + std::erf(x * Real(M_SQRT1_2)));
}

template <class Real>
inline Real gelu_grad_scalar(Real x) {
    const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(M_SQRT1_2)));
    const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.3989422804014327);
    return cdf + x * pdf;
}

template <class Real>
inline void matmul_row(Real* ci, const Real* a_row, const Real* b, int k, int n) {
    for (int j = 0; j < n; ++j) ci[j] = Real(0);
    for (int kk = 0; kk < k; ++kk) {
        const Real aik = a_row[kk];
        const Real* bk = b + static_cast<std::int64_t>(kk) * n;
        for (int j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
}

template <class Real>
inline void matmul_nt_row(Real* ci, const Real* a_row, const Real* b, int k, int n) {
    for (int j = 0; j < n; ++j) {
        const Real* bj = b + static_cast<std::int64_t>(j) * k;
        Real acc = Real(0);
        for (int kk = 0; kk < k; ++kk) acc += a_row[kk] * bj[kk];
        ci[j] = acc;
    }
}

template <class Real>
inline void matmul_tn_row(Real* cr, const Real* a, const Real* b, int m, int k, int n, int r) {
    for (int j = 0; j < n; ++j) cr[j] = Real(0);
    for (int i = 0; i < m; ++i) {
        const Real air = a[static_cast<std::int64_t>(i) * k + r];
        const Real* bi = b + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) cr[j] += air * bi[j];
    }
}

template <class Real>
inline void layernorm_row(Real* y, Real* mean, Real* rstd, const Real* x, const Real* gamma,
                          const Real* beta, int cols, Real eps) {
    Real mu = Real(0);
    for (int j = 0; j < cols; ++j) mu += x[j];
    mu /= Real(cols);
    Real var = Real(0);
    for (int j = 0; j < cols; ++j) {
        const Real d = x[j] - mu;
        var += d * d;
    }
    var /= Real(cols);
    const Real rs = Real(1) / std::sqrt(var + eps);
    for (int j = 0; j < cols; ++j) y[j] = gamma[j] * ((x[j] - mu) * rs) + beta[j];
    *mean = mu;
    *rstd = rs;
}

template <class Real>
inline void layernorm_bwd_row(Real* dx, const Real* dy, const Real* x, Real mean, Real rstd,
                              const Real* gamma, int cols) {
    // dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat ∘ xhat))
    Real sum_dxhat = Real(0);
    Real sum_dxhat_xhat = Real(0);
    for (int j = 0; j < cols; ++j) {
        const Real xhat = (x[j] - mean) * rstd;
        const Real dxhat = dy[j] * gamma[j];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
    }
    const Real inv_n = Real(1) / Real(cols);
    for (int j = 0; j < cols; ++j) {
        const Real xhat = (x[j] - mean) * rstd;
        const Real dxhat = dy[j] * gamma[j];
        dx[j] = rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
    }
}

template <class Real>
inline void softmax_row(Real* x, int cols) {
    Real mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    Real sum = Real(0);
    for (int j = 0; j < cols; ++j) {
        x[j] = std::exp(x[j] - mx);
        sum += x[j];
    }
    const Real inv = Real(1) / sum;
    for (int j = 0; j < cols; ++j) x[j] *= inv;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// serial reference implementations
// ---------------------------------------------------------------------------
namespace ref {

// c(m x n) = a(m x k) * b(k x n), row-major
template <class Real>
void matmul(Real* c, const Real* a, const Real* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        detail::matmul_row(c + static_cast<std::int64_t>(i) * n,
                           a + static_cast<std::int64_t>(i) * k, b, k, n);
    }
}

// c(m x n) = a(m x k) * b(n x k)^T
template <class Real>
void matmul_nt(Real* c, const Real* a, const Real* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        detail::matmul_nt_row(c + static_cast<std::int64_t>(i) * n,
                              a + static_cast<std::int64_t>(i) * k, b, k, n);
    }
}

// c(k x n) = a(m x k)^T * b(m x n)
template <class Real>
void matmul_tn(Real* c, const Real* a, const Real* b, int m, int k, int n) {
    for (int r = 0; r < k; ++r) {
        detail::matmul_tn_row(c + static_cast<std::int64_t>(r) * n, a, b, m, k, n, r);
    }
}

template <class Real>
void add_bias(Real* x, const Real* bias, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        Real* xi = x + static_cast<std::int64_t>(i) * cols;
        for (int j = 0; j < cols; ++j) xi[j] += bias[j];
    }
}

template <class Real>
void layernorm_fwd(Real* y, Real* mean, Real* rstd, const Real* x, const Real* gamma,
                   const Real* beta, int rows, int cols, Real eps) {
    for (int i = 0; i < rows; ++i) {
        const std::int64_t off = static_cast<std::int64_t>(i) * cols;
        detail::layernorm_row(y + off, mean + i, rstd + i, x + off, gamma, beta, cols, eps);
    }
}

template <class Real>
void layernorm_bwd(Real* dx, Real* dgamma, Real* dbeta, const Real* dy, const Real* x,
                   const Real* mean, const Real* rstd, const Real* gamma, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        const std::int64_t off = static_cast<std::int64_t>(i) * cols;
        detail::layernorm_bwd_row(dx + off, dy + off, x + off, mean[i], rstd[i], gamma, cols);
    }
    for (int j = 0; j < cols; ++j) {
        Real dg = Real(0), db = Real(0);
        for (int i = 0; i < rows; ++i) {
            const std::int64_t off = static_cast<std::int64_t>(i) * cols;
            dg += dy[off + j] * ((x[off + j] - mean[i]) * rstd[i]);
            db += dy[off + j];
        }
        dgamma[j] += dg;
        dbeta[j] += db;
    }
}

template <class Real>
void softmax_rows(Real* x, int rows, int cols) {
    for (int i = 0; i < rows; ++i) detail::softmax_row(x + static_cast<std::int64_t>(i) * cols, cols);
}

template <class Real>
void gelu_fwd(Real* y, const Real* x, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) y[i] = detail::gelu_scalar(x[i]);
}

template <class Real>
void gelu_bwd(Real* dx, const Real* dy, const Real* x, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) dx[i] = dy[i] * detail::gelu_grad_scalar(x[i]);
}

}  // namespace ref

// ---------------------------------------------------------------------------
// OpenMP kernels (same bodies, row-parallel)
// ---------------------------------------------------------------------------

template <class Real>
void matmul(Real* c, const Real* a, const Real* b, int m, int k, int n) {
    const std::int64_t work = static_cast<std::int64_t>(m) * k * n;
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (work >= detail::kParallelGrain)
    for (int i = 0; i < m; ++i) {
        detail::matmul_row(c + static_cast<std::int64_t>(i) * n,
                           a + static_cast<std::int64_t>(i) * k, b, k, n);
    }
}

template <class Real>
void matmul_nt(Real* c, const Real* a, const Real* b, int m, int k, int n) {
    const std::int64_t work = static_cast<std::int64_t>(m) * k * n;
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (work >= detail::kParallelGrain)
    for (int i = 0; i < m; ++i) {
        detail::matmul_nt_row(c + static_cast<std::int64_t>(i) * n,
                              a + static_cast<std::int64_t>(i) * k, b, k, n);
    }
}

template <class Real>
void matmul_tn(Real* c, const Real* a, const Real* b, int m, int k, int n) {
    const std::int64_t work = static_cast<std::int64_t>(m) * k * n;
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (work >= detail::kParallelGrain)
    for (int r = 0; r < k; ++r) {
        detail::matmul_tn_row(c + static_cast<std::int64_t>(r) * n, a, b, m, k, n, r);
    }
}

template <class Real>
void add_bias(Real* x, const Real* bias, int rows, int cols) {
    const std::int64_t work = static_cast<std::int64_t>(rows) * cols;
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (work >= detail::kParallelGrain)
    for (int i = 0; i < rows; ++i) {
        Real* xi = x + static_cast<std::int64_t>(i) * cols;
        for (int j = 0; j < cols; ++j) xi[j] += bias[j];
    }
}

template <class Real>
void layernorm_fwd(Real* y, Real* mean, Real* rstd, const Real* x, const Real* gamma,
                   const Real* beta, int rows, int cols, Real eps) {
    const std::int64_t work = static_cast<std::int64_t>(rows) * cols;
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (work >= detail::kParallelGrain)
    for (int i = 0; i < rows; ++i) {
        const std::int64_t off = static_cast<std::int64_t>(i) * cols;
        detail::layernorm_row(y + off, mean + i, rstd + i, x + off, gamma, beta, cols, eps);
    }
}

template <class Real>
void layernorm_bwd(Real* dx, Real* dgamma, Real* dbeta, const Real* dy, const Real* x,
                   const Real* mean, const Real* rstd, const Real* gamma, int rows, int cols) {
    const std::int64_t work = static_cast<std::int64_t>(rows) * cols;
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (work >= detail::kParallelGrain)
    for (int i = 0; i < rows; ++i) {
        const std::int64_t off = static_cast<std::int64_t>(i) * cols;
        detail::layernorm_bwd_row(dx + off, dy + off, x + off, mean[i], rstd[i], gamma, cols);
    }
    // gamma/beta reductions run per-column so the row order stays fixed
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (work >= detail::kParallelGrain)
    for (int j = 0; j < cols; ++j) {
        Real dg = Real(0), db = Real(0);
        for (int i = 0; i < rows; ++i) {
            const std::int64_t off = static_cast<std::int64_t>(i) * cols;
            dg += dy[off + j] * ((x[off + j] - mean[i]) * rstd[i]);
            db += dy[off + j];
        }
        dgamma[j] += dg;
        dbeta[j] += db;
    }
}

template <class Real>
void softmax_rows(Real* x, int rows, int cols) {
    const std::int64_t work = static_cast<std::int64_t>(rows) * cols;
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (work >= detail::kParallelGrain)
    for (int i = 0; i < rows; ++i) detail::softmax_row(x + static_cast<std::int64_t>(i) * cols, cols);
}

template <class Real>
void gelu_fwd(Real* y, const Real* x, std::int64_t n) {
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (n >= detail::kParallelGrain)
    for (std::int64_t i = 0; i < n; ++i) y[i] = detail::gelu_scalar(x[i]);
}

template <class Real>
void gelu_bwd(Real* dx, const Real* dy, const Real* x, std::int64_t n) {
#pragma omp parallel for schedule(static) num_threads(num_threads()) \
    if (n >= detail::kParallelGrain)
    for (std::int64_t i = 0; i < n; ++i) dx[i] = dy[i] * detail::gelu_grad_scalar(x[i]);
}

}  // namespace stmem
