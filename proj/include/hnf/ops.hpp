#pragma once

#include <algorithm>
#include <optional>

#include "hnf/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace hnf {

// ---------------------------------------------------------------------------
// Deterministic parallelism. Work is split into fixed-size blocks and each
// block is processed serially by exactly one thread, so results are bitwise
// identical for any thread count. Every parallel loop in the library goes
// through these helpers.
// ---------------------------------------------------------------------------

namespace par {

constexpr int64_t kBlock = 4096;

template <class F>
inline void blocks(int64_t total, int64_t block, F&& fn) {
    if (total <= 0) return;
    const int64_t nblocks = (total + block - 1) / block;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t b = 0; b < nblocks; ++b) {
        const int64_t lo = b * block;
        const int64_t hi = std::min(total, lo + block);
        fn(lo, hi);
    }
}

template <class F>
inline void items(int64_t count, F&& fn) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < count; ++i) fn(i);
}

}  // namespace par

// Optional FLOP accounting for the dominant ops (conv3d, matmul). Enabled by
// pointing the thread-local counter at an accumulator.
inline int64_t*& flop_counter() {
    thread_local int64_t* counter = nullptr;
    return counter;
}

inline void count_flops(int64_t n) {
    if (flop_counter()) *flop_counter() += n;
}

// Block-wise deterministic sum: per-block serial partial sums combined in
// block order, accumulated in double.
template <typename T>
inline double block_sum(std::span<const T> v) {
    const int64_t n = static_cast<int64_t>(v.size());
    const int64_t nblocks = (n + par::kBlock - 1) / par::kBlock;
    std::vector<double> partial(static_cast<size_t>(std::max<int64_t>(nblocks, 1)), 0.0);
    par::blocks(n, par::kBlock, [&](int64_t lo, int64_t hi) {
        double s = 0.0;
        for (int64_t i = lo; i < hi; ++i) s += static_cast<double>(v[static_cast<size_t>(i)]);
        partial[static_cast<size_t>(lo / par::kBlock)] = s;
    });
    double total = 0.0;
    for (double s : partial) total += s;
    return total;
}

// ---------------------------------------------------------------------------
// Row-major GEMM kernels. Output elements are owned by a single thread and
// accumulated in a fixed k order.
// ---------------------------------------------------------------------------

namespace detail {

constexpr int64_t kGemmBlock = 1024;

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, int64_t M, int64_t N, int64_t K, bool accumulate) {
    par::blocks(N, kGemmBlock, [&](int64_t n0, int64_t n1) {
        for (int64_t m = 0; m < M; ++m) {
            T* c = C + m * N;
            if (!accumulate)
                for (int64_t n = n0; n < n1; ++n) c[n] = T(0);
            const T* a = A + m * K;
            for (int64_t k = 0; k < K; ++k) {
                const T w = a[k];
                if (w == T(0)) continue;
                const T* b = B + k * N;
                for (int64_t n = n0; n < n1; ++n) c[n] += w * b[n];
            }
        }
    });
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, int64_t M, int64_t N, int64_t K, bool accumulate) {
    par::items(M, [&](int64_t m) {
        const T* a = A + m * K;
        T* c = C + m * N;
        for (int64_t n = 0; n < N; ++n) {
            const T* b = B + n * K;
            T acc = T(0);
            for (int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
            c[n] = accumulate ? c[n] + acc : acc;
        }
    });
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, int64_t M, int64_t N, int64_t K, bool accumulate) {
    par::blocks(N, kGemmBlock, [&](int64_t n0, int64_t n1) {
        if (!accumulate)
            for (int64_t m = 0; m < M; ++m)
                for (int64_t n = n0; n < n1; ++n) C[m * N + n] = T(0);
        for (int64_t k = 0; k < K; ++k) {
            const T* arow = A + k * M;
            const T* b = B + k * N;
            for (int64_t m = 0; m < M; ++m) {
                const T w = arow[m];
                if (w == T(0)) continue;
                T* c = C + m * N;
                for (int64_t n = n0; n < n1; ++n) c[n] += w * b[n];
            }
        }
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (!same_shape(a.shape(), b.shape()))
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

template <typename T>
void accumulate_grad(const std::shared_ptr<TensorImpl<T>>& impl, std::span<const T> g) {
    auto& grad = grad_of(impl);
    par::blocks(static_cast<int64_t>(g.size()), par::kBlock, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) grad[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
    });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("add", a, b);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.mutable_values();
    par::blocks(out.size(), par::kBlock, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) ov[i] = av[i] + bv[i];
    });
    if (detail::track<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl();
        Tape<T>::current()->record(out.impl(), [ai, bi](std::span<const T> g) {
            if (ai->requires_grad) detail::accumulate_grad(ai, g);
            if (bi->requires_grad) detail::accumulate_grad(bi, g);
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("sub", a, b);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.mutable_values();
    par::blocks(out.size(), par::kBlock, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) ov[i] = av[i] - bv[i];
    });
    if (detail::track<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl();
        Tape<T>::current()->record(out.impl(), [ai, bi](std::span<const T> g) {
            if (ai->requires_grad) detail::accumulate_grad(ai, g);
            if (bi->requires_grad) {
                auto& gb = detail::grad_of(bi);
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("mul", a, b);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.mutable_values();
    par::blocks(out.size(), par::kBlock, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) ov[i] = av[i] * bv[i];
    });
    if (detail::track<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl();
        Tape<T>::current()->record(out.impl(), [ai, bi](std::span<const T> g) {
            if (ai->requires_grad) {
                auto& ga = detail::grad_of(ai);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                auto& gb = detail::grad_of(bi);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("div", a, b);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.mutable_values();
    for (int64_t i = 0; i < out.size(); ++i) ov[i] = av[i] / bv[i];
    if (detail::track<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl();
        Tape<T>::current()->record(out.impl(), [ai, bi](std::span<const T> g) {
            for (size_t i = 0; i < g.size(); ++i) {
                const T inv = T(1) / bi->data[i];
                if (ai->requires_grad) detail::grad_of(ai)[i] += g[i] * inv;
                if (bi->requires_grad)
                    detail::grad_of(bi)[i] -= g[i] * ai->data[i] * inv * inv;
            }
        });
    }
    return out;
}

// out = a * scale + shift, elementwise with scalar coefficients
template <typename T>
Tensor<T> affine(const Tensor<T>& a, T scale, T shift) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.values();
    auto ov = out.mutable_values();
    par::blocks(out.size(), par::kBlock, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) ov[i] = av[i] * scale + shift;
    });
    if (detail::track<T>({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        Tape<T>::current()->record(out.impl(), [ai, scale](std::span<const T> g) {
            auto& ga = detail::grad_of(ai);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * scale;
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.values();
    auto ov = out.mutable_values();
    par::blocks(out.size(), par::kBlock, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
    });
    if (detail::track<T>({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        Tape<T>::current()->record(out.impl(), [ai](std::span<const T> g) {
            auto& ga = detail::grad_of(ai);
            for (size_t i = 0; i < g.size(); ++i)
                if (ai->data[i] > T(0)) ga[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.values();
    auto ov = out.mutable_values();
    par::blocks(out.size(), par::kBlock, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const T x = av[i];
            ov[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                              : std::exp(x) / (T(1) + std::exp(x));
        }
    });
    if (detail::track<T>({&a})) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        Tape<T>::current()->record(out.impl(), [ai, oi](std::span<const T> g) {
            auto& ga = detail::grad_of(ai);
            for (size_t i = 0; i < g.size(); ++i) {
                const T y = oi->data[i];
                ga[i] += g[i] * y * (T(1) - y);
            }
        });
    }
    return out;
}

// x[N,C,D,H,W] * s[N,C,1,1,1], the only broadcast the library allows besides
// the per-channel gain/shift inside instance_norm.
template <typename T>
Tensor<T> mul_channels(const Tensor<T>& x, const Tensor<T>& s) {
    if (x.rank() != 5 || s.rank() != 5 || s.dim(0) != x.dim(0) || s.dim(1) != x.dim(1) ||
        s.dim(2) != 1 || s.dim(3) != 1 || s.dim(4) != 1)
        throw ConfigError("mul_channels: expected x[N,C,D,H,W] and s[N,C,1,1,1], got " +
                          shape_str(x.shape()) + " and " + shape_str(s.shape()));
    const int64_t planes = x.dim(0) * x.dim(1);
    const int64_t vol = x.dim(2) * x.dim(3) * x.dim(4);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xv = x.values(), sv = s.values();
    auto ov = out.mutable_values();
    par::items(planes, [&](int64_t p) {
        const T g = sv[p];
        for (int64_t i = 0; i < vol; ++i) ov[p * vol + i] = xv[p * vol + i] * g;
    });
    if (detail::track<T>({&x, &s})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), si = s.impl();
        Tape<T>::current()->record(out.impl(), [xi, si, planes, vol](std::span<const T> g) {
            if (xi->requires_grad) {
                auto& gx = detail::grad_of(xi);
                par::items(planes, [&](int64_t p) {
                    const T sc = si->data[static_cast<size_t>(p)];
                    for (int64_t i = 0; i < vol; ++i)
                        gx[static_cast<size_t>(p * vol + i)] +=
                            g[static_cast<size_t>(p * vol + i)] * sc;
                });
            }
            if (si->requires_grad) {
                auto& gs = detail::grad_of(si);
                for (int64_t p = 0; p < planes; ++p) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < vol; ++i)
                        acc += static_cast<double>(g[static_cast<size_t>(p * vol + i)]) *
                               static_cast<double>(xi->data[static_cast<size_t>(p * vol + i)]);
                    gs[static_cast<size_t>(p)] += static_cast<T>(acc);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv3d: im2col + GEMM, with a direct path for 1x1x1/stride-1 kernels.
// ---------------------------------------------------------------------------

namespace detail {

struct Conv3dGeom {
    int64_t n, cin, cout;
    std::array<int64_t, 3> in;      // D,H,W
    std::array<int64_t, 3> k;       // kd,kh,kw
    std::array<int64_t, 3> stride;
    std::array<int64_t, 3> pad;
    std::array<int64_t, 3> out;     // D',H',W'
    int64_t patch() const { return cin * k[0] * k[1] * k[2]; }
    int64_t opos() const { return out[0] * out[1] * out[2]; }
    bool pointwise() const {
        return k == std::array<int64_t, 3>{1, 1, 1} && stride == std::array<int64_t, 3>{1, 1, 1} &&
               pad == std::array<int64_t, 3>{0, 0, 0};
    }
};

template <typename T>
Conv3dGeom conv3d_geometry(const Tensor<T>& x, const Tensor<T>& w,
                           const std::array<int64_t, 3>& stride,
                           const std::array<int64_t, 3>& pad) {
    if (x.rank() != 5 || w.rank() != 5)
        throw ConfigError("conv3d: expected input[N,Cin,D,H,W] and weight[Cout,Cin,kd,kh,kw], got " +
                          shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(1))
        throw ConfigError("conv3d: input channels mismatch, input " + shape_str(x.shape()) +
                          " vs weight " + shape_str(w.shape()));
    Conv3dGeom g;
    g.n = x.dim(0);
    g.cin = x.dim(1);
    g.cout = w.dim(0);
    g.in = {x.dim(2), x.dim(3), x.dim(4)};
    g.k = {w.dim(2), w.dim(3), w.dim(4)};
    g.stride = stride;
    g.pad = pad;
    for (int a = 0; a < 3; ++a) {
        if (stride[a] < 1) throw ConfigError("conv3d: stride components must be >= 1");
        if (pad[a] < 0) throw ConfigError("conv3d: negative padding");
        const int64_t span = g.in[a] + 2 * pad[a];
        if (span < g.k[a])
            throw ConfigError("conv3d: kernel larger than padded input, input " +
                              shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
        g.out[a] = (span - g.k[a]) / stride[a] + 1;
    }
    return g;
}

// Bm[patch, opos]: one row per (ci,kd,kh,kw), one column per output position.
template <typename T>
void im2col(const T* x, const Conv3dGeom& g, T* bm) {
    const int64_t P = g.opos();
    const int64_t kvol = g.k[0] * g.k[1] * g.k[2];
    par::items(g.cin * kvol, [&](int64_t row) {
        const int64_t ci = row / kvol;
        const int64_t kr = row % kvol;
        const int64_t kd = kr / (g.k[1] * g.k[2]);
        const int64_t kh = (kr / g.k[2]) % g.k[1];
        const int64_t kw = kr % g.k[2];
        const T* src = x + ci * g.in[0] * g.in[1] * g.in[2];
        T* dst = bm + row * P;
        int64_t p = 0;
        for (int64_t od = 0; od < g.out[0]; ++od) {
            const int64_t id = od * g.stride[0] - g.pad[0] + kd;
            const bool dok = id >= 0 && id < g.in[0];
            for (int64_t oh = 0; oh < g.out[1]; ++oh) {
                const int64_t ih = oh * g.stride[1] - g.pad[1] + kh;
                const bool hok = ih >= 0 && ih < g.in[1];
                if (!dok || !hok) {
                    for (int64_t ow = 0; ow < g.out[2]; ++ow) dst[p++] = T(0);
                    continue;
                }
                const T* line = src + (id * g.in[1] + ih) * g.in[2];
                for (int64_t ow = 0; ow < g.out[2]; ++ow) {
                    const int64_t iw = ow * g.stride[2] - g.pad[2] + kw;
                    dst[p++] = (iw >= 0 && iw < g.in[2]) ? line[iw] : T(0);
                }
            }
        }
    });
}

// Scatter-add of dBm back onto the input gradient. Rows are grouped by input
// channel so parallel channels never touch the same destination.
template <typename T>
void col2im_add(const T* dbm, const Conv3dGeom& g, T* dx) {
    const int64_t P = g.opos();
    const int64_t kvol = g.k[0] * g.k[1] * g.k[2];
    par::items(g.cin, [&](int64_t ci) {
        T* dst = dx + ci * g.in[0] * g.in[1] * g.in[2];
        for (int64_t kr = 0; kr < kvol; ++kr) {
            const int64_t kd = kr / (g.k[1] * g.k[2]);
            const int64_t kh = (kr / g.k[2]) % g.k[1];
            const int64_t kw = kr % g.k[2];
            const T* src = dbm + (ci * kvol + kr) * P;
            int64_t p = 0;
            for (int64_t od = 0; od < g.out[0]; ++od) {
                const int64_t id = od * g.stride[0] - g.pad[0] + kd;
                const bool dok = id >= 0 && id < g.in[0];
                for (int64_t oh = 0; oh < g.out[1]; ++oh) {
                    const int64_t ih = oh * g.stride[1] - g.pad[1] + kh;
                    if (!dok || ih < 0 || ih >= g.in[1]) {
                        p += g.out[2];
                        continue;
                    }
                    T* line = dst + (id * g.in[1] + ih) * g.in[2];
                    for (int64_t ow = 0; ow < g.out[2]; ++ow, ++p) {
                        const int64_t iw = ow * g.stride[2] - g.pad[2] + kw;
                        if (iw >= 0 && iw < g.in[2]) line[iw] += src[p];
                    }
                }
            }
        }
    });
}

}  // namespace detail

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias,
                 std::array<int64_t, 3> stride = {1, 1, 1}, std::array<int64_t, 3> pad = {0, 0, 0}) {
    using detail::Conv3dGeom;
    const Conv3dGeom g = detail::conv3d_geometry(x, w, stride, pad);
    if (bias && (bias->rank() != 1 || bias->dim(0) != g.cout))
        throw ConfigError("conv3d: bias shape " + shape_str(bias->shape()) + " does not match Cout " +
                          std::to_string(g.cout));

    Tensor<T> out = Tensor<T>::zeros({g.n, g.cout, g.out[0], g.out[1], g.out[2]});
    const int64_t P = g.opos();
    const int64_t K = g.patch();
    count_flops(g.n * (2 * g.cout * P * K + (bias ? g.cout * P : 0)));
    const T* xv = x.values().data();
    const T* wv = w.values().data();
    T* ov = out.mutable_values().data();
    const int64_t in_vol = g.cin * g.in[0] * g.in[1] * g.in[2];

    std::vector<T> bm;
    if (!g.pointwise()) bm.resize(static_cast<size_t>(K * P));
    for (int64_t n = 0; n < g.n; ++n) {
        const T* src = xv + n * in_vol;
        const T* cols = src;
        if (!g.pointwise()) {
            detail::im2col(src, g, bm.data());
            cols = bm.data();
        }
        detail::gemm_nn(wv, cols, ov + n * g.cout * P, g.cout, P, K, false);
    }
    if (bias) {
        const T* bv = bias->values().data();
        par::items(g.n * g.cout, [&](int64_t p) {
            const T b = bv[p % g.cout];
            T* dst = ov + p * P;
            for (int64_t i = 0; i < P; ++i) dst[i] += b;
        });
    }

    const bool need_grad =
        bias ? detail::track<T>({&x, &w, &*bias}) : detail::track<T>({&x, &w});
    if (need_grad) {
        out.set_requires_grad(true);
        auto xi = x.impl(), wi = w.impl();
        std::shared_ptr<TensorImpl<T>> bi = bias ? bias->impl() : nullptr;
        Tape<T>::current()->record(out.impl(), [xi, wi, bi, g](std::span<const T> gout) {
            const int64_t P = g.opos();
            const int64_t K = g.patch();
            const int64_t in_vol = g.cin * g.in[0] * g.in[1] * g.in[2];
            std::vector<T> bm;
            if (!g.pointwise()) bm.resize(static_cast<size_t>(K * P));
            std::vector<T> dbm(static_cast<size_t>(K * P));
            for (int64_t n = 0; n < g.n; ++n) {
                const T* gslice = gout.data() + n * g.cout * P;
                if (wi->requires_grad) {
                    const T* cols = xi->data.data() + n * in_vol;
                    if (!g.pointwise()) {
                        detail::im2col(xi->data.data() + n * in_vol, g, bm.data());
                        cols = bm.data();
                    }
                    detail::gemm_nt(gslice, cols, detail::grad_of(wi).data(), g.cout, K, P, true);
                }
                if (xi->requires_grad) {
                    detail::gemm_tn(wi->data.data(), gslice, dbm.data(), K, P, g.cout, false);
                    T* dx = detail::grad_of(xi).data() + n * in_vol;
                    if (g.pointwise()) {
                        par::blocks(K * P, par::kBlock, [&](int64_t lo, int64_t hi) {
                            for (int64_t i = lo; i < hi; ++i) dx[i] += dbm[static_cast<size_t>(i)];
                        });
                    } else {
                        detail::col2im_add(dbm.data(), g, dx);
                    }
                }
            }
            if (bi && bi->requires_grad) {
                auto& gb = detail::grad_of(bi);
                for (int64_t n = 0; n < g.n; ++n)
                    for (int64_t c = 0; c < g.cout; ++c) {
                        const T* gs = gout.data() + (n * g.cout + c) * P;
                        double acc = 0.0;
                        for (int64_t i = 0; i < P; ++i) acc += static_cast<double>(gs[i]);
                        gb[static_cast<size_t>(c)] += static_cast<T>(acc);
                    }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w,
                 std::array<int64_t, 3> stride = {1, 1, 1}, std::array<int64_t, 3> pad = {0, 0, 0}) {
    return conv3d(x, w, std::nullopt, stride, pad);
}

// ---------------------------------------------------------------------------
// Trilinear resize with align-corners mapping: src = i*(in-1)/(out-1).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> trilinear_resize(const Tensor<T>& x, std::array<int64_t, 3> target) {
    if (x.rank() != 5)
        throw ConfigError("trilinear_resize: expected [N,C,D,H,W], got " + shape_str(x.shape()));
    for (int a = 0; a < 3; ++a)
        if (target[a] < 1)
            throw ConfigError("trilinear_resize: target extent must be >= 1, got " +
                              std::to_string(target[a]));
    const int64_t n = x.dim(0), c = x.dim(1);
    const std::array<int64_t, 3> in{x.dim(2), x.dim(3), x.dim(4)};
    Tensor<T> out = Tensor<T>::zeros({n, c, target[0], target[1], target[2]});

    struct Axis {
        std::vector<int64_t> lo;
        std::vector<T> frac;
    };
    auto make_axis = [](int64_t in_ext, int64_t out_ext) {
        Axis ax;
        ax.lo.resize(static_cast<size_t>(out_ext));
        ax.frac.resize(static_cast<size_t>(out_ext));
        for (int64_t i = 0; i < out_ext; ++i) {
            double src = (out_ext == 1 || in_ext == 1)
                             ? 0.0
                             : static_cast<double>(i) * static_cast<double>(in_ext - 1) /
                                   static_cast<double>(out_ext - 1);
            int64_t lo = static_cast<int64_t>(std::floor(src));
            if (lo > in_ext - 2) lo = std::max<int64_t>(in_ext - 2, 0);
            ax.lo[static_cast<size_t>(i)] = lo;
            ax.frac[static_cast<size_t>(i)] =
                in_ext == 1 ? T(0) : static_cast<T>(src - static_cast<double>(lo));
        }
        return ax;
    };
    const Axis ad = make_axis(in[0], target[0]);
    const Axis ah = make_axis(in[1], target[1]);
    const Axis aw = make_axis(in[2], target[2]);

    const int64_t in_vol = in[0] * in[1] * in[2];
    const int64_t out_vol = target[0] * target[1] * target[2];
    const T* xv = x.values().data();
    T* ov = out.mutable_values().data();
    par::items(n * c, [&](int64_t plane) {
        const T* src = xv + plane * in_vol;
        T* dst = ov + plane * out_vol;
        int64_t p = 0;
        for (int64_t od = 0; od < target[0]; ++od) {
            const int64_t d0 = ad.lo[od];
            const T fd = ad.frac[od];
            const int64_t d1 = std::min(d0 + 1, in[0] - 1);
            for (int64_t oh = 0; oh < target[1]; ++oh) {
                const int64_t h0 = ah.lo[oh];
                const T fh = ah.frac[oh];
                const int64_t h1 = std::min(h0 + 1, in[1] - 1);
                for (int64_t ow = 0; ow < target[2]; ++ow, ++p) {
                    const int64_t w0 = aw.lo[ow];
                    const T fw = aw.frac[ow];
                    const int64_t w1 = std::min(w0 + 1, in[2] - 1);
                    auto at = [&](int64_t dd, int64_t hh, int64_t ww) {
                        return src[(dd * in[1] + hh) * in[2] + ww];
                    };
                    const T v00 = at(d0, h0, w0) * (T(1) - fw) + at(d0, h0, w1) * fw;
                    const T v01 = at(d0, h1, w0) * (T(1) - fw) + at(d0, h1, w1) * fw;
                    const T v10 = at(d1, h0, w0) * (T(1) - fw) + at(d1, h0, w1) * fw;
                    const T v11 = at(d1, h1, w0) * (T(1) - fw) + at(d1, h1, w1) * fw;
                    const T v0 = v00 * (T(1) - fh) + v01 * fh;
                    const T v1 = v10 * (T(1) - fh) + v11 * fh;
                    dst[p] = v0 * (T(1) - fd) + v1 * fd;
                }
            }
        }
    });

    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        Tape<T>::current()->record(
            out.impl(), [xi, in, target, ad, ah, aw, n, c, in_vol, out_vol](std::span<const T> g) {
                auto& gx = detail::grad_of(xi);
                par::items(n * c, [&](int64_t plane) {
                    T* dst = gx.data() + plane * in_vol;
                    const T* gsrc = g.data() + plane * out_vol;
                    int64_t p = 0;
                    for (int64_t od = 0; od < target[0]; ++od) {
                        const int64_t d0 = ad.lo[od];
                        const T fd = ad.frac[od];
                        const int64_t d1 = std::min(d0 + 1, in[0] - 1);
                        for (int64_t oh = 0; oh < target[1]; ++oh) {
                            const int64_t h0 = ah.lo[oh];
                            const T fh = ah.frac[oh];
                            const int64_t h1 = std::min(h0 + 1, in[1] - 1);
                            for (int64_t ow = 0; ow < target[2]; ++ow, ++p) {
                                const int64_t w0 = aw.lo[ow];
                                const T fw = aw.frac[ow];
                                const int64_t w1 = std::min(w0 + 1, in[2] - 1);
                                const T gv = gsrc[p];
                                auto put = [&](int64_t dd, int64_t hh, int64_t ww, T wgt) {
                                    dst[(dd * in[1] + hh) * in[2] + ww] += gv * wgt;
                                };
                                put(d0, h0, w0, (T(1) - fd) * (T(1) - fh) * (T(1) - fw));
                                put(d0, h0, w1, (T(1) - fd) * (T(1) - fh) * fw);
                                put(d0, h1, w0, (T(1) - fd) * fh * (T(1) - fw));
                                put(d0, h1, w1, (T(1) - fd) * fh * fw);
                                put(d1, h0, w0, fd * (T(1) - fh) * (T(1) - fw));
                                put(d1, h0, w1, fd * (T(1) - fh) * fw);
                                put(d1, h1, w0, fd * fh * (T(1) - fw));
                                put(d1, h1, w1, fd * fh * fw);
                            }
                        }
                    }
                });
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Global average pooling over the spatial extent.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() != 5)
        throw ConfigError("global_avg_pool: expected [N,C,D,H,W], got " + shape_str(x.shape()));
    const int64_t planes = x.dim(0) * x.dim(1);
    const int64_t vol = x.dim(2) * x.dim(3) * x.dim(4);
    if (vol < 1) throw ConfigError("global_avg_pool: empty spatial extent");
    Tensor<T> out = Tensor<T>::zeros({x.dim(0), x.dim(1), 1, 1, 1});
    auto xv = x.values();
    auto ov = out.mutable_values();
    par::items(planes, [&](int64_t p) {
        double acc = 0.0;
        for (int64_t i = 0; i < vol; ++i) acc += static_cast<double>(xv[p * vol + i]);
        ov[p] = static_cast<T>(acc / static_cast<double>(vol));
    });
    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        Tape<T>::current()->record(out.impl(), [xi, planes, vol](std::span<const T> g) {
            auto& gx = detail::grad_of(xi);
            par::items(planes, [&](int64_t p) {
                const T share = g[static_cast<size_t>(p)] / static_cast<T>(vol);
                for (int64_t i = 0; i < vol; ++i) gx[static_cast<size_t>(p * vol + i)] += share;
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Instance normalization with per-channel gain/shift.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                        T eps = T(1e-5)) {
    if (x.rank() != 5)
        throw ConfigError("instance_norm: expected [N,C,D,H,W], got " + shape_str(x.shape()));
    const int64_t C = x.dim(1);
    if (gain.rank() != 1 || gain.dim(0) != C || shift.rank() != 1 || shift.dim(0) != C)
        throw ConfigError("instance_norm: gain/shift must be [C] with C=" + std::to_string(C) +
                          ", got " + shape_str(gain.shape()) + " and " + shape_str(shift.shape()));
    const int64_t N = x.dim(0);
    const int64_t planes = N * C;
    const int64_t vol = x.dim(2) * x.dim(3) * x.dim(4);
    Tensor<T> out = Tensor<T>::zeros(x.shape());

    auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(planes));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(planes));
    auto xv = x.values();
    auto gv = gain.values();
    auto sv = shift.values();
    auto ov = out.mutable_values();
    par::items(planes, [&](int64_t p) {
        double m = 0.0;
        for (int64_t i = 0; i < vol; ++i) m += static_cast<double>(xv[p * vol + i]);
        m /= static_cast<double>(vol);
        double var = 0.0;
        for (int64_t i = 0; i < vol; ++i) {
            const double d = static_cast<double>(xv[p * vol + i]) - m;
            var += d * d;
        }
        var /= static_cast<double>(vol);
        const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        (*mean)[static_cast<size_t>(p)] = static_cast<T>(m);
        (*inv_std)[static_cast<size_t>(p)] = istd;
        const T gc = gv[p % C], sc = sv[p % C];
        for (int64_t i = 0; i < vol; ++i)
            ov[p * vol + i] = (xv[p * vol + i] - static_cast<T>(m)) * istd * gc + sc;
    });

    if (detail::track<T>({&x, &gain, &shift})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), gi = gain.impl(), si = shift.impl();
        Tape<T>::current()->record(
            out.impl(), [xi, gi, si, mean, inv_std, N, C, vol](std::span<const T> g) {
                const int64_t planes = N * C;
                std::vector<double> sum_g(static_cast<size_t>(planes)),
                    sum_gx(static_cast<size_t>(planes));
                par::items(planes, [&](int64_t p) {
                    const T m = (*mean)[static_cast<size_t>(p)];
                    const T istd = (*inv_std)[static_cast<size_t>(p)];
                    double sg = 0.0, sgx = 0.0;
                    for (int64_t i = 0; i < vol; ++i) {
                        const T xhat = (xi->data[static_cast<size_t>(p * vol + i)] - m) * istd;
                        const T gv = g[static_cast<size_t>(p * vol + i)];
                        sg += static_cast<double>(gv);
                        sgx += static_cast<double>(gv) * static_cast<double>(xhat);
                    }
                    sum_g[static_cast<size_t>(p)] = sg;
                    sum_gx[static_cast<size_t>(p)] = sgx;
                });
                if (xi->requires_grad) {
                    auto& gx = detail::grad_of(xi);
                    par::items(planes, [&](int64_t p) {
                        const T m = (*mean)[static_cast<size_t>(p)];
                        const T istd = (*inv_std)[static_cast<size_t>(p)];
                        const T gc = gi->data[static_cast<size_t>(p % C)];
                        const T mg = static_cast<T>(sum_g[static_cast<size_t>(p)] /
                                                    static_cast<double>(vol));
                        const T mgx = static_cast<T>(sum_gx[static_cast<size_t>(p)] /
                                                     static_cast<double>(vol));
                        for (int64_t i = 0; i < vol; ++i) {
                            const size_t idx = static_cast<size_t>(p * vol + i);
                            const T xhat = (xi->data[idx] - m) * istd;
                            gx[idx] += gc * istd * (g[idx] - mg - xhat * mgx);
                        }
                    });
                }
                if (gi->requires_grad) {
                    auto& gg = detail::grad_of(gi);
                    for (int64_t p = 0; p < planes; ++p)
                        gg[static_cast<size_t>(p % C)] +=
                            static_cast<T>(sum_gx[static_cast<size_t>(p)]);
                }
                if (si->requires_grad) {
                    auto& gs = detail::grad_of(si);
                    for (int64_t p = 0; p < planes; ++p)
                        gs[static_cast<size_t>(p % C)] +=
                            static_cast<T>(sum_g[static_cast<size_t>(p)]);
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax along an arbitrary axis, max-subtracted for stability.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    if (axis < 0 || axis >= static_cast<int>(x.rank()))
        throw ConfigError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                          shape_str(x.shape()));
    const Shape& s = x.shape();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    const int64_t len = s[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xv = x.values();
    auto ov = out.mutable_values();
    par::items(outer, [&](int64_t o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * len * inner + in;
            T mx = xv[base];
            for (int64_t k = 1; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
            double denom = 0.0;
            for (int64_t k = 0; k < len; ++k) {
                const T e = std::exp(xv[base + k * inner] - mx);
                ov[base + k * inner] = e;
                denom += static_cast<double>(e);
            }
            const T inv = static_cast<T>(1.0 / denom);
            for (int64_t k = 0; k < len; ++k) ov[base + k * inner] *= inv;
        }
    });

    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = out.impl();
        Tape<T>::current()->record(out.impl(), [xi, oi, outer, len, inner](std::span<const T> g) {
            auto& gx = detail::grad_of(xi);
            par::items(outer, [&](int64_t o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (int64_t k = 0; k < len; ++k)
                        dot += static_cast<double>(g[static_cast<size_t>(base + k * inner)]) *
                               static_cast<double>(oi->data[static_cast<size_t>(base + k * inner)]);
                    for (int64_t k = 0; k < len; ++k) {
                        const size_t idx = static_cast<size_t>(base + k * inner);
                        gx[idx] += oi->data[idx] * (g[idx] - static_cast<T>(dot));
                    }
                }
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batched matrix multiply on rank-3 tensors with transpose flags.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        throw ConfigError("matmul: expected [B,M,K] x [B,K,N], got " + shape_str(a.shape()) +
                          " and " + shape_str(b.shape()));
    const int64_t B = a.dim(0);
    const int64_t M = trans_a ? a.dim(2) : a.dim(1);
    const int64_t Ka = trans_a ? a.dim(1) : a.dim(2);
    const int64_t Kb = trans_b ? b.dim(2) : b.dim(1);
    const int64_t N = trans_b ? b.dim(1) : b.dim(2);
    if (Ka != Kb)
        throw ConfigError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    const int64_t K = Ka;
    count_flops(2 * B * M * N * K);
    Tensor<T> out = Tensor<T>::zeros({B, M, N});
    const T* av = a.values().data();
    const T* bv = b.values().data();
    T* ov = out.mutable_values().data();
    const int64_t as = a.dim(1) * a.dim(2), bs = b.dim(1) * b.dim(2), os = M * N;

    auto run = [&](const T* A, const T* Bm, T* C) {
        if (!trans_a && !trans_b)
            detail::gemm_nn(A, Bm, C, M, N, K, false);
        else if (!trans_a && trans_b)
            detail::gemm_nt(A, Bm, C, M, N, K, false);
        else if (trans_a && !trans_b)
            detail::gemm_tn(A, Bm, C, M, N, K, false);
        else
            for (int64_t m = 0; m < M; ++m)
                for (int64_t n = 0; n < N; ++n) {
                    T acc = T(0);
                    for (int64_t k = 0; k < K; ++k) acc += A[k * M + m] * Bm[n * K + k];
                    C[m * N + n] = acc;
                }
    };
    for (int64_t i = 0; i < B; ++i) run(av + i * as, bv + i * bs, ov + i * os);

    if (detail::track<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl();
        Tape<T>::current()->record(
            out.impl(), [ai, bi, B, M, N, K, as, bs, os, trans_a, trans_b](std::span<const T> g) {
                for (int64_t i = 0; i < B; ++i) {
                    const T* A = ai->data.data() + i * as;
                    const T* Bm = bi->data.data() + i * bs;
                    const T* G = g.data() + i * os;
                    if (ai->requires_grad) {
                        T* dA = detail::grad_of(ai).data() + i * as;
                        if (!trans_a) {
                            // dA[M,K] += trans_b ? G*B : G*B^T
                            if (!trans_b)
                                detail::gemm_nt(G, Bm, dA, M, K, N, true);
                            else
                                detail::gemm_nn(G, Bm, dA, M, K, N, true);
                        } else {
                            // dA[K,M] += (dC w.r.t. A^T) transposed
                            if (!trans_b)
                                detail::gemm_nt(Bm, G, dA, K, M, N, true);  // B[K,N]*G[M,N]^T
                            else
                                for (int64_t k = 0; k < K; ++k)
                                    for (int64_t m = 0; m < M; ++m) {
                                        T acc = T(0);
                                        for (int64_t n = 0; n < N; ++n)
                                            acc += G[m * N + n] * Bm[n * K + k];
                                        dA[k * M + m] += acc;
                                    }
                        }
                    }
                    if (bi->requires_grad) {
                        T* dB = detail::grad_of(bi).data() + i * bs;
                        if (!trans_b) {
                            // dB[K,N] += A^T * G  (or A * G when A is transposed)
                            if (!trans_a)
                                detail::gemm_tn(A, G, dB, K, N, M, true);
                            else
                                detail::gemm_nn(A, G, dB, K, N, M, true);
                        } else {
                            // dB[N,K] += G^T * A (account for A transpose)
                            if (!trans_a)
                                detail::gemm_tn(G, A, dB, N, K, M, true);
                            else
                                for (int64_t n = 0; n < N; ++n)
                                    for (int64_t k = 0; k < K; ++k) {
                                        T acc = T(0);
                                        for (int64_t m = 0; m < M; ++m)
                                            acc += G[m * N + n] * A[k * M + m];
                                        dB[n * K + k] += acc;
                                    }
                        }
                    }
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Channel concatenation and spatial flips.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw ConfigError("concat_channels: empty input list");
    const Shape& ref = xs[0].shape();
    if (ref.size() != 5) throw ConfigError("concat_channels: expected rank-5 tensors");
    int64_t total_c = 0;
    for (const auto& t : xs) {
        if (t.rank() != 5 || t.dim(0) != ref[0] || t.dim(2) != ref[2] || t.dim(3) != ref[3] ||
            t.dim(4) != ref[4])
            throw ConfigError("concat_channels: incompatible shapes " + shape_str(ref) + " vs " +
                              shape_str(t.shape()));
        total_c += t.dim(1);
    }
    const int64_t n = ref[0];
    const int64_t vol = ref[2] * ref[3] * ref[4];
    Tensor<T> out = Tensor<T>::zeros({n, total_c, ref[2], ref[3], ref[4]});
    T* ov = out.mutable_values().data();
    int64_t coff = 0;
    for (const auto& t : xs) {
        const int64_t tc = t.dim(1);
        const T* tv = t.values().data();
        par::items(n * tc, [&](int64_t p) {
            const int64_t ni = p / tc, ci = p % tc;
            std::copy_n(tv + p * vol, vol, ov + ((ni * total_c + coff + ci) * vol));
        });
        coff += tc;
    }

    bool rg = false;
    if (Tape<T>::current())
        for (const auto& t : xs) rg = rg || t.requires_grad();
    if (rg) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorImpl<T>>> impls;
        impls.reserve(xs.size());
        for (const auto& t : xs) impls.push_back(t.impl());
        Tape<T>::current()->record(out.impl(), [impls, n, total_c, vol](std::span<const T> g) {
            int64_t coff = 0;
            for (const auto& impl : impls) {
                const int64_t tc = impl->shape[1];
                if (impl->requires_grad) {
                    auto& gx = detail::grad_of(impl);
                    par::items(n * tc, [&](int64_t p) {
                        const int64_t ni = p / tc, ci = p % tc;
                        const T* src = g.data() + ((ni * total_c + coff + ci) * vol);
                        T* dst = gx.data() + p * vol;
                        for (int64_t i = 0; i < vol; ++i) dst[i] += src[i];
                    });
                }
                coff += tc;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> flip3d(const Tensor<T>& x, bool flip_d, bool flip_h, bool flip_w) {
    if (x.rank() != 5)
        throw ConfigError("flip3d: expected [N,C,D,H,W], got " + shape_str(x.shape()));
    const int64_t D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int64_t planes = x.dim(0) * x.dim(1);
    const int64_t vol = D * H * W;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto remap = [=](const T* src, T* dst) {
        for (int64_t d = 0; d < D; ++d) {
            const int64_t sd = flip_d ? D - 1 - d : d;
            for (int64_t h = 0; h < H; ++h) {
                const int64_t sh = flip_h ? H - 1 - h : h;
                const T* line = src + (sd * H + sh) * W;
                T* dline = dst + (d * H + h) * W;
                if (flip_w)
                    for (int64_t w = 0; w < W; ++w) dline[w] = line[W - 1 - w];
                else
                    std::copy_n(line, W, dline);
            }
        }
    };
    const T* xv = x.values().data();
    T* ov = out.mutable_values().data();
    par::items(planes, [&](int64_t p) { remap(xv + p * vol, ov + p * vol); });

    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        Tape<T>::current()->record(out.impl(),
                                   [xi, remap, planes, vol](std::span<const T> g) {
                                       auto& gx = detail::grad_of(xi);
                                       std::vector<T> tmp(static_cast<size_t>(vol));
                                       for (int64_t p = 0; p < planes; ++p) {
                                           remap(g.data() + p * vol, tmp.data());
                                           T* dst = gx.data() + p * vol;
                                           for (int64_t i = 0; i < vol; ++i) dst[i] += tmp[i];
                                       }
                                   });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(block_sum(x.values())));
    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        Tape<T>::current()->record(out.impl(), [xi](std::span<const T> g) {
            auto& gx = detail::grad_of(xi);
            const T gv = g[0];
            par::blocks(static_cast<int64_t>(gx.size()), par::kBlock, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) gx[static_cast<size_t>(i)] += gv;
            });
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    const T scale = static_cast<T>(1.0 / static_cast<double>(x.size()));
    return affine(sum_all(x), scale, T(0));
}

// [N,C,...] -> [C], summed over batch and spatial dims.
template <typename T>
Tensor<T> sum_per_channel(const Tensor<T>& x) {
    if (x.rank() < 2)
        throw ConfigError("sum_per_channel: expected at least rank 2, got " + shape_str(x.shape()));
    const int64_t N = x.dim(0), C = x.dim(1);
    int64_t vol = 1;
    for (size_t i = 2; i < x.rank(); ++i) vol *= x.dim(i);
    Tensor<T> out = Tensor<T>::zeros({C});
    auto xv = x.values();
    std::vector<double> acc(static_cast<size_t>(N * C));
    par::items(N * C, [&](int64_t p) {
        double s = 0.0;
        for (int64_t i = 0; i < vol; ++i) s += static_cast<double>(xv[p * vol + i]);
        acc[static_cast<size_t>(p)] = s;
    });
    auto ov = out.mutable_values();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) ov[c] += static_cast<T>(acc[static_cast<size_t>(n * C + c)]);
    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        Tape<T>::current()->record(out.impl(), [xi, N, C, vol](std::span<const T> g) {
            auto& gx = detail::grad_of(xi);
            par::items(N * C, [&](int64_t p) {
                const T gv = g[static_cast<size_t>(p % C)];
                for (int64_t i = 0; i < vol; ++i) gx[static_cast<size_t>(p * vol + i)] += gv;
            });
        });
    }
    return out;
}

// Mean binary cross-entropy on logits; targets are constants.
template <typename T>
Tensor<T> bce_with_logits_mean(const Tensor<T>& logits, const Tensor<T>& targets) {
    detail::check_same_shape("bce_with_logits_mean", logits, targets);
    if (targets.requires_grad())
        throw ContractError("bce_with_logits_mean: targets must not require gradients");
    const int64_t n = logits.size();
    auto zv = logits.values();
    auto tv = targets.values();
    const int64_t nblocks = (n + par::kBlock - 1) / par::kBlock;
    std::vector<double> partial(static_cast<size_t>(std::max<int64_t>(nblocks, 1)), 0.0);
    par::blocks(n, par::kBlock, [&](int64_t lo, int64_t hi) {
        double s = 0.0;
        for (int64_t i = lo; i < hi; ++i) {
            const double z = static_cast<double>(zv[i]);
            const double t = static_cast<double>(tv[i]);
            s += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
        }
        partial[static_cast<size_t>(lo / par::kBlock)] = s;
    });
    double total = 0.0;
    for (double s : partial) total += s;
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n)));
    if (detail::track<T>({&logits})) {
        out.set_requires_grad(true);
        auto zi = logits.impl();
        auto ti = targets.impl();
        Tape<T>::current()->record(out.impl(), [zi, ti, n](std::span<const T> g) {
            auto& gz = detail::grad_of(zi);
            const T scale = g[0] / static_cast<T>(n);
            par::blocks(n, par::kBlock, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) {
                    const T z = zi->data[static_cast<size_t>(i)];
                    const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z))
                                          : std::exp(z) / (T(1) + std::exp(z));
                    gz[static_cast<size_t>(i)] += scale * (s - ti->data[static_cast<size_t>(i)]);
                }
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// EM-attention helpers on rank-3 tensors.
// ---------------------------------------------------------------------------

// [N,C,D,H,W] -> [N,P,C] with P = D*H*W (position-major rows).
template <typename T>
Tensor<T> rows_from_map(const Tensor<T>& x) {
    if (x.rank() != 5)
        throw ConfigError("rows_from_map: expected [N,C,D,H,W], got " + shape_str(x.shape()));
    const int64_t N = x.dim(0), C = x.dim(1);
    const int64_t P = x.dim(2) * x.dim(3) * x.dim(4);
    Tensor<T> out = Tensor<T>::zeros({N, P, C});
    auto xv = x.values();
    auto ov = out.mutable_values();
    par::items(N * C, [&](int64_t nc) {
        const int64_t n = nc / C, c = nc % C;
        for (int64_t p = 0; p < P; ++p) ov[(n * P + p) * C + c] = xv[nc * P + p];
    });
    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        Tape<T>::current()->record(out.impl(), [xi, N, C, P](std::span<const T> g) {
            auto& gx = detail::grad_of(xi);
            par::items(N * C, [&](int64_t nc) {
                const int64_t n = nc / C, c = nc % C;
                for (int64_t p = 0; p < P; ++p)
                    gx[static_cast<size_t>(nc * P + p)] += g[static_cast<size_t>((n * P + p) * C + c)];
            });
        });
    }
    return out;
}

// [N,P,C] -> [N,C,D,H,W]; inverse of rows_from_map.
template <typename T>
Tensor<T> map_from_rows(const Tensor<T>& x, std::array<int64_t, 3> spatial) {
    if (x.rank() != 3)
        throw ConfigError("map_from_rows: expected [N,P,C], got " + shape_str(x.shape()));
    const int64_t N = x.dim(0), P = x.dim(1), C = x.dim(2);
    if (P != spatial[0] * spatial[1] * spatial[2])
        throw ConfigError("map_from_rows: position count mismatch");
    Tensor<T> out = Tensor<T>::zeros({N, C, spatial[0], spatial[1], spatial[2]});
    auto xv = x.values();
    auto ov = out.mutable_values();
    par::items(N * C, [&](int64_t nc) {
        const int64_t n = nc / C, c = nc % C;
        for (int64_t p = 0; p < P; ++p) ov[nc * P + p] = xv[(n * P + p) * C + c];
    });
    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        Tape<T>::current()->record(out.impl(), [xi, N, C, P](std::span<const T> g) {
            auto& gx = detail::grad_of(xi);
            par::items(N * C, [&](int64_t nc) {
                const int64_t n = nc / C, c = nc % C;
                for (int64_t p = 0; p < P; ++p)
                    gx[static_cast<size_t>((n * P + p) * C + c)] += g[static_cast<size_t>(nc * P + p)];
            });
        });
    }
    return out;
}

// [B,P,K] -> [B,K], summed over the middle axis.
template <typename T>
Tensor<T> sum_mid(const Tensor<T>& x) {
    if (x.rank() != 3)
        throw ConfigError("sum_mid: expected rank-3 tensor, got " + shape_str(x.shape()));
    const int64_t B = x.dim(0), P = x.dim(1), K = x.dim(2);
    Tensor<T> out = Tensor<T>::zeros({B, K});
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (int64_t b = 0; b < B; ++b) {
        std::vector<double> acc(static_cast<size_t>(K), 0.0);
        for (int64_t p = 0; p < P; ++p)
            for (int64_t k = 0; k < K; ++k)
                acc[static_cast<size_t>(k)] += static_cast<double>(xv[(b * P + p) * K + k]);
        for (int64_t k = 0; k < K; ++k) ov[b * K + k] = static_cast<T>(acc[static_cast<size_t>(k)]);
    }
    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        Tape<T>::current()->record(out.impl(), [xi, B, P, K](std::span<const T> g) {
            auto& gx = detail::grad_of(xi);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t p = 0; p < P; ++p)
                    for (int64_t k = 0; k < K; ++k)
                        gx[static_cast<size_t>((b * P + p) * K + k)] +=
                            g[static_cast<size_t>(b * K + k)];
        });
    }
    return out;
}

// a[B,K,C] / d[B,K]: per-row scalar division.
template <typename T>
Tensor<T> div_rows(const Tensor<T>& a, const Tensor<T>& d) {
    if (a.rank() != 3 || d.rank() != 2 || a.dim(0) != d.dim(0) || a.dim(1) != d.dim(1))
        throw ConfigError("div_rows: expected [B,K,C] and [B,K], got " + shape_str(a.shape()) +
                          " and " + shape_str(d.shape()));
    const int64_t rows = a.dim(0) * a.dim(1), C = a.dim(2);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.values();
    auto dv = d.values();
    auto ov = out.mutable_values();
    for (int64_t r = 0; r < rows; ++r) {
        const T inv = T(1) / dv[r];
        for (int64_t c = 0; c < C; ++c) ov[r * C + c] = av[r * C + c] * inv;
    }
    if (detail::track<T>({&a, &d})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), di = d.impl();
        auto oi = out.impl();
        Tape<T>::current()->record(out.impl(), [ai, di, oi, rows, C](std::span<const T> g) {
            for (int64_t r = 0; r < rows; ++r) {
                const T inv = T(1) / di->data[static_cast<size_t>(r)];
                if (ai->requires_grad) {
                    auto& ga = detail::grad_of(ai);
                    for (int64_t c = 0; c < C; ++c)
                        ga[static_cast<size_t>(r * C + c)] += g[static_cast<size_t>(r * C + c)] * inv;
                }
                if (di->requires_grad) {
                    double acc = 0.0;
                    for (int64_t c = 0; c < C; ++c)
                        acc += static_cast<double>(g[static_cast<size_t>(r * C + c)]) *
                               static_cast<double>(oi->data[static_cast<size_t>(r * C + c)]);
                    detail::grad_of(di)[static_cast<size_t>(r)] -= static_cast<T>(acc) * inv;
                }
            }
        });
    }
    return out;
}

// Row-wise L2 normalization over the last axis of [B,K,C]. Rows with norm
// below eps pass through unchanged (identity gradient).
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12)) {
    if (x.rank() != 3)
        throw ConfigError("l2_normalize_rows: expected [B,K,C], got " + shape_str(x.shape()));
    const int64_t rows = x.dim(0) * x.dim(1), C = x.dim(2);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto norms = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int64_t c = 0; c < C; ++c)
            s += static_cast<double>(xv[r * C + c]) * static_cast<double>(xv[r * C + c]);
        const T n = static_cast<T>(std::sqrt(s));
        (*norms)[static_cast<size_t>(r)] = n;
        if (n <= eps) {
            for (int64_t c = 0; c < C; ++c) ov[r * C + c] = xv[r * C + c];
        } else {
            const T inv = T(1) / n;
            for (int64_t c = 0; c < C; ++c) ov[r * C + c] = xv[r * C + c] * inv;
        }
    }
    if (detail::track<T>({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = out.impl();
        Tape<T>::current()->record(out.impl(), [xi, oi, norms, rows, C, eps](std::span<const T> g) {
            auto& gx = detail::grad_of(xi);
            for (int64_t r = 0; r < rows; ++r) {
                const T n = (*norms)[static_cast<size_t>(r)];
                if (n <= eps) {
                    for (int64_t c = 0; c < C; ++c)
                        gx[static_cast<size_t>(r * C + c)] += g[static_cast<size_t>(r * C + c)];
                    continue;
                }
                double dot = 0.0;
                for (int64_t c = 0; c < C; ++c)
                    dot += static_cast<double>(g[static_cast<size_t>(r * C + c)]) *
                           static_cast<double>(oi->data[static_cast<size_t>(r * C + c)]);
                const T inv = T(1) / n;
                for (int64_t c = 0; c < C; ++c) {
                    const size_t idx = static_cast<size_t>(r * C + c);
                    gx[idx] += (g[idx] - oi->data[idx] * static_cast<T>(dot)) * inv;
                }
            }
        });
    }
    return out;
}

// Row selector: out row = mask ? a row : b row. The mask is a constant.
template <typename T>
Tensor<T> where_rows(const std::vector<uint8_t>& mask, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("where_rows", a, b);
    if (a.rank() != 3 || static_cast<int64_t>(mask.size()) != a.dim(0) * a.dim(1))
        throw ConfigError("where_rows: mask length must equal B*K");
    const int64_t rows = a.dim(0) * a.dim(1), C = a.dim(2);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.mutable_values();
    for (int64_t r = 0; r < rows; ++r) {
        const auto& src = mask[static_cast<size_t>(r)] ? av : bv;
        for (int64_t c = 0; c < C; ++c) ov[r * C + c] = src[r * C + c];
    }
    if (detail::track<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl();
        Tape<T>::current()->record(out.impl(), [ai, bi, mask, rows, C](std::span<const T> g) {
            for (int64_t r = 0; r < rows; ++r) {
                auto& target = mask[static_cast<size_t>(r)] ? ai : bi;
                if (!target->requires_grad) continue;
                auto& gt = detail::grad_of(target);
                for (int64_t c = 0; c < C; ++c)
                    gt[static_cast<size_t>(r * C + c)] += g[static_cast<size_t>(r * C + c)];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite checks and initializers
// ---------------------------------------------------------------------------

template <typename T>
void assert_all_finite(const Tensor<T>& t, const std::string& path) {
    const auto v = t.values();
    for (size_t i = 0; i < v.size(); ++i)
        if (!std::isfinite(static_cast<double>(v[i])))
            throw NumericError("non-finite value at " + path + " (flat index " + std::to_string(i) +
                               ")");
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double mean, double stddev) {
    for (auto& v : t.mutable_values()) v = static_cast<T>(rng.normal(mean, stddev));
}

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
    for (auto& v : t.mutable_values()) v = static_cast<T>(rng.uniform(lo, hi));
}

}  // namespace hnf
