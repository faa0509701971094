#pragma once

#include <span>

// Compute kernels behind the autograd ops. Two implementations share each
// signature:
//   kernels::parallel  im2col + blocked GEMM, OpenMP over independent outputs
//   kernels::serial    direct loops, the reference the parallel path is tested against
//
// Backward kernels accumulate (+=) into their outputs. Every reduction runs in
// a fixed order so results do not depend on the thread count.

namespace cafe::kernels {

struct ConvGeometry {
    int batch = 1;
    int in_channels = 1;
    int in_h = 1;
    int in_w = 1;
    int out_channels = 1;
    int kernel = 3;
    int stride = 1;
    int pad = 1;

    int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
    int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
    int patch() const { return in_channels * kernel * kernel; }
    long input_size() const { return static_cast<long>(batch) * in_channels * in_h * in_w; }
    long output_size() const { return static_cast<long>(batch) * out_channels * out_h() * out_w(); }
    long weight_size() const { return static_cast<long>(out_channels) * patch(); }
};

struct DenseGeometry {
    int batch = 1;
    int in_features = 1;
    int out_features = 1;
};

#define CAFE_KERNEL_DECLS                                                                                  \
    template <class T>                                                                                     \
    void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,                \
                        std::span<const T> bias, std::span<T> y);                                          \
    template <class T>                                                                                     \
    void conv2d_backward_input(const ConvGeometry& g, std::span<const T> dy, std::span<const T> w,        \
                               std::span<T> dx);                                                           \
    template <class T>                                                                                     \
    void conv2d_backward_params(const ConvGeometry& g, std::span<const T> x, std::span<const T> dy,       \
                                std::span<T> dw, std::span<T> dbias);                                      \
    template <class T>                                                                                     \
    void dense_forward(const DenseGeometry& g, std::span<const T> x, std::span<const T> w,                \
                       std::span<const T> bias, std::span<T> y);                                           \
    template <class T>                                                                                     \
    void dense_backward_input(const DenseGeometry& g, std::span<const T> dy, std::span<const T> w,        \
                              std::span<T> dx);                                                            \
    template <class T>                                                                                     \
    void dense_backward_params(const DenseGeometry& g, std::span<const T> x, std::span<const T> dy,       \
                               std::span<T> dw, std::span<T> dbias);

namespace parallel {
CAFE_KERNEL_DECLS

/// C[m x n] += A[m x k] * B[k x n], all row-major and contiguous.
template <class T>
void gemm(int m, int n, int k, const T* a, const T* b, T* c);
}  // namespace parallel

namespace serial {
CAFE_KERNEL_DECLS
}  // namespace serial

#undef CAFE_KERNEL_DECLS

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace cafe::kernels
