#include "cafe/kernels.hpp"

#include <algorithm>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cafe::kernels {

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace parallel {
namespace {

// Work below this many multiply-adds stays on the calling thread.
constexpr long kParallelGrain = 1L << 15;

template <class T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
    const int oh = g.out_h(), ow = g.out_w(), hw = oh * ow, k = g.kernel;
    for (int c = 0; c < g.in_channels; ++c) {
        const T* xc = x + static_cast<long>(c) * g.in_h * g.in_w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                T* row = cols + static_cast<long>((c * k + ky) * k + kx) * hw;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    T* out = row + oy * ow;
                    if (iy < 0 || iy >= g.in_h) {
                        std::fill(out, out + ow, T(0));
                        continue;
                    }
                    const T* xr = xc + static_cast<long>(iy) * g.in_w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        out[ox] = (ix >= 0 && ix < g.in_w) ? xr[ix] : T(0);
                    }
                }
            }
        }
    }
}

// Transposed layout: colsT[p * patch + q].
template <class T>
void im2col_transposed(const ConvGeometry& g, const T* x, T* cols_t) {
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel, patch = g.patch();
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            T* out = cols_t + static_cast<long>(oy * ow + ox) * patch;
            int q = 0;
            for (int c = 0; c < g.in_channels; ++c) {
                const T* xc = x + static_cast<long>(c) * g.in_h * g.in_w;
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * g.stride - g.pad + ky;
                    for (int kx = 0; kx < k; ++kx, ++q) {
                        const int ix = ox * g.stride - g.pad + kx;
                        out[q] = (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w)
                                     ? xc[static_cast<long>(iy) * g.in_w + ix]
                                     : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* cols, T* dx) {
    const int oh = g.out_h(), ow = g.out_w(), hw = oh * ow, k = g.kernel;
    for (int c = 0; c < g.in_channels; ++c) {
        T* dc = dx + static_cast<long>(c) * g.in_h * g.in_w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const T* row = cols + static_cast<long>((c * k + ky) * k + kx) * hw;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.in_h) continue;
                    T* dr = dc + static_cast<long>(iy) * g.in_w;
                    const T* in = row + oy * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.in_w) dr[ix] += in[ox];
                    }
                }
            }
        }
    }
}

// Row block of four output rows sharing each streamed row of b.
template <class T>
void gemm_rows(int i0, int rows, int n, int k, const T* a, const T* b, T* c) {
    if (rows == 4) {
        T* c0 = c + static_cast<long>(i0) * n;
        T* c1 = c0 + n;
        T* c2 = c1 + n;
        T* c3 = c2 + n;
        const T* a0 = a + static_cast<long>(i0) * k;
        for (int p = 0; p < k; ++p) {
            const T v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
            const T* br = b + static_cast<long>(p) * n;
#pragma omp simd
            for (int j = 0; j < n; ++j) {
                const T bv = br[j];
                c0[j] += v0 * bv;
                c1[j] += v1 * bv;
                c2[j] += v2 * bv;
                c3[j] += v3 * bv;
            }
        }
        return;
    }
    for (int i = i0; i < i0 + rows; ++i) {
        T* ci = c + static_cast<long>(i) * n;
        const T* ai = a + static_cast<long>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T v = ai[p];
            const T* br = b + static_cast<long>(p) * n;
#pragma omp simd
            for (int j = 0; j < n; ++j) ci[j] += v * br[j];
        }
    }
}

}  // namespace

template <class T>
void gemm(int m, int n, int k, const T* a, const T* b, T* c) {
    const int blocks = (m + 3) / 4;
    const long work = static_cast<long>(m) * n * k;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
    for (int blk = 0; blk < blocks; ++blk) {
        const int i0 = blk * 4;
        gemm_rows(i0, std::min(4, m - i0), n, k, a, b, c);
    }
}

template <class T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                    std::span<T> y) {
    const int hw = g.out_h() * g.out_w();
    const long in_stride = static_cast<long>(g.in_channels) * g.in_h * g.in_w;
    const long out_stride = static_cast<long>(g.out_channels) * hw;
    const long work = g.output_size() * g.patch();
#pragma omp parallel if (work > kParallelGrain)
    {
        std::vector<T> cols(static_cast<std::size_t>(g.patch()) * hw);
#pragma omp for schedule(static)
        for (int n = 0; n < g.batch; ++n) {
            T* yn = y.data() + n * out_stride;
            for (int o = 0; o < g.out_channels; ++o)
                std::fill(yn + static_cast<long>(o) * hw, yn + static_cast<long>(o + 1) * hw,
                          bias.empty() ? T(0) : bias[static_cast<std::size_t>(o)]);
            im2col(g, x.data() + n * in_stride, cols.data());
            for (int i0 = 0; i0 < g.out_channels; i0 += 4)
                gemm_rows(i0, std::min(4, g.out_channels - i0), hw, g.patch(), w.data(), cols.data(), yn);
        }
    }
}

template <class T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> dy, std::span<const T> w, std::span<T> dx) {
    const int hw = g.out_h() * g.out_w();
    const int patch = g.patch();
    const long in_stride = static_cast<long>(g.in_channels) * g.in_h * g.in_w;
    const long out_stride = static_cast<long>(g.out_channels) * hw;
    std::vector<T> wt(static_cast<std::size_t>(patch) * g.out_channels);
    for (int o = 0; o < g.out_channels; ++o)
        for (int q = 0; q < patch; ++q) wt[static_cast<std::size_t>(q) * g.out_channels + o] = w[static_cast<std::size_t>(o) * patch + q];
    const long work = g.output_size() * patch;
#pragma omp parallel if (work > kParallelGrain)
    {
        std::vector<T> cols(static_cast<std::size_t>(patch) * hw);
#pragma omp for schedule(static)
        for (int n = 0; n < g.batch; ++n) {
            std::fill(cols.begin(), cols.end(), T(0));
            for (int i0 = 0; i0 < patch; i0 += 4)
                gemm_rows(i0, std::min(4, patch - i0), hw, g.out_channels, wt.data(), dy.data() + n * out_stride,
                          cols.data());
            col2im_add(g, cols.data(), dx.data() + n * in_stride);
        }
    }
}

template <class T>
void conv2d_backward_params(const ConvGeometry& g, std::span<const T> x, std::span<const T> dy, std::span<T> dw,
                            std::span<T> dbias) {
    const int hw = g.out_h() * g.out_w();
    const int patch = g.patch();
    const long in_stride = static_cast<long>(g.in_channels) * g.in_h * g.in_w;
    const long out_stride = static_cast<long>(g.out_channels) * hw;
    std::vector<T> cols_t(static_cast<std::size_t>(hw) * patch);
    for (int n = 0; n < g.batch; ++n) {
        im2col_transposed(g, x.data() + n * in_stride, cols_t.data());
        gemm(g.out_channels, patch, hw, dy.data() + n * out_stride, cols_t.data(), dw.data());
    }
    if (dbias.empty()) return;
#pragma omp parallel for schedule(static) if (g.output_size() > kParallelGrain)
    for (int o = 0; o < g.out_channels; ++o) {
        T acc = T(0);
        for (int n = 0; n < g.batch; ++n) {
            const T* row = dy.data() + n * out_stride + static_cast<long>(o) * hw;
            for (int p = 0; p < hw; ++p) acc += row[p];
        }
        dbias[static_cast<std::size_t>(o)] += acc;
    }
}

template <class T>
void dense_forward(const DenseGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                   std::span<T> y) {
    const long work = static_cast<long>(g.batch) * g.in_features * g.out_features;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
    for (int n = 0; n < g.batch; ++n) {
        const T* xn = x.data() + static_cast<long>(n) * g.in_features;
        for (int o = 0; o < g.out_features; ++o) {
            const T* wo = w.data() + static_cast<long>(o) * g.in_features;
            T acc = T(0);
#pragma omp simd reduction(+ : acc)
            for (int i = 0; i < g.in_features; ++i) acc += xn[i] * wo[i];
            y[static_cast<std::size_t>(n) * g.out_features + o] = acc + (bias.empty() ? T(0) : bias[static_cast<std::size_t>(o)]);
        }
    }
}

template <class T>
void dense_backward_input(const DenseGeometry& g, std::span<const T> dy, std::span<const T> w, std::span<T> dx) {
    const long work = static_cast<long>(g.batch) * g.in_features * g.out_features;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
    for (int n = 0; n < g.batch; ++n) {
        T* dxn = dx.data() + static_cast<long>(n) * g.in_features;
        for (int o = 0; o < g.out_features; ++o) {
            const T d = dy[static_cast<std::size_t>(n) * g.out_features + o];
            const T* wo = w.data() + static_cast<long>(o) * g.in_features;
#pragma omp simd
            for (int i = 0; i < g.in_features; ++i) dxn[i] += d * wo[i];
        }
    }
}

template <class T>
void dense_backward_params(const DenseGeometry& g, std::span<const T> x, std::span<const T> dy, std::span<T> dw,
                           std::span<T> dbias) {
    const long work = static_cast<long>(g.batch) * g.in_features * g.out_features;
#pragma omp parallel for schedule(static) if (work > kParallelGrain)
    for (int o = 0; o < g.out_features; ++o) {
        T* dwo = dw.data() + static_cast<long>(o) * g.in_features;
        T db = T(0);
        for (int n = 0; n < g.batch; ++n) {
            const T d = dy[static_cast<std::size_t>(n) * g.out_features + o];
            db += d;
            const T* xn = x.data() + static_cast<long>(n) * g.in_features;
#pragma omp simd
            for (int i = 0; i < g.in_features; ++i) dwo[i] += d * xn[i];
        }
        if (!dbias.empty()) dbias[static_cast<std::size_t>(o)] += db;
    }
}

#define CAFE_INSTANTIATE(T)                                                                                       \
    template void gemm<T>(int, int, int, const T*, const T*, T*);                                               \
    template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,                  \
                                    std::span<const T>, std::span<T>);                                            \
    template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,           \
                                           std::span<T>);                                                         \
    template void conv2d_backward_params<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,          \
                                            std::span<T>, std::span<T>);                                          \
    template void dense_forward<T>(const DenseGeometry&, std::span<const T>, std::span<const T>,                  \
                                   std::span<const T>, std::span<T>);                                             \
    template void dense_backward_input<T>(const DenseGeometry&, std::span<const T>, std::span<const T>,           \
                                          std::span<T>);                                                          \
    template void dense_backward_params<T>(const DenseGeometry&, std::span<const T>, std::span<const T>,          \
                                           std::span<T>, std::span<T>);

CAFE_INSTANTIATE(float)
CAFE_INSTANTIATE(double)
#undef CAFE_INSTANTIATE

}  // namespace parallel
}  // namespace cafe::kernels
