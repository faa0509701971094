#include "cafe/kernels.hpp"

namespace cafe::kernels::serial {

template <class T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                    std::span<T> y) {
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel;
    for (int n = 0; n < g.batch; ++n)
        for (int o = 0; o < g.out_channels; ++o)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    T acc = bias.empty() ? T(0) : bias[static_cast<std::size_t>(o)];
                    for (int c = 0; c < g.in_channels; ++c)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * g.stride - g.pad + ky;
                                const int ix = ox * g.stride - g.pad + kx;
                                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                                acc += x[((static_cast<std::size_t>(n) * g.in_channels + c) * g.in_h + iy) * g.in_w + ix] *
                                       w[((static_cast<std::size_t>(o) * g.in_channels + c) * k + ky) * k + kx];
                            }
                    y[((static_cast<std::size_t>(n) * g.out_channels + o) * oh + oy) * ow + ox] = acc;
                }
}

template <class T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> dy, std::span<const T> w, std::span<T> dx) {
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel;
    for (int n = 0; n < g.batch; ++n)
        for (int o = 0; o < g.out_channels; ++o)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const T d = dy[((static_cast<std::size_t>(n) * g.out_channels + o) * oh + oy) * ow + ox];
                    for (int c = 0; c < g.in_channels; ++c)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * g.stride - g.pad + ky;
                                const int ix = ox * g.stride - g.pad + kx;
                                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                                dx[((static_cast<std::size_t>(n) * g.in_channels + c) * g.in_h + iy) * g.in_w + ix] +=
                                    d * w[((static_cast<std::size_t>(o) * g.in_channels + c) * k + ky) * k + kx];
                            }
                }
}

template <class T>
void conv2d_backward_params(const ConvGeometry& g, std::span<const T> x, std::span<const T> dy, std::span<T> dw,
                            std::span<T> dbias) {
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel;
    for (int n = 0; n < g.batch; ++n)
        for (int o = 0; o < g.out_channels; ++o)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const T d = dy[((static_cast<std::size_t>(n) * g.out_channels + o) * oh + oy) * ow + ox];
                    if (!dbias.empty()) dbias[static_cast<std::size_t>(o)] += d;
                    for (int c = 0; c < g.in_channels; ++c)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * g.stride - g.pad + ky;
                                const int ix = ox * g.stride - g.pad + kx;
                                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                                dw[((static_cast<std::size_t>(o) * g.in_channels + c) * k + ky) * k + kx] +=
                                    d * x[((static_cast<std::size_t>(n) * g.in_channels + c) * g.in_h + iy) * g.in_w + ix];
                            }
                }
}

template <class T>
void dense_forward(const DenseGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                   std::span<T> y) {
    for (int n = 0; n < g.batch; ++n)
        for (int o = 0; o < g.out_features; ++o) {
            T acc = bias.empty() ? T(0) : bias[static_cast<std::size_t>(o)];
            for (int i = 0; i < g.in_features; ++i)
                acc += x[static_cast<std::size_t>(n) * g.in_features + i] * w[static_cast<std::size_t>(o) * g.in_features + i];
            y[static_cast<std::size_t>(n) * g.out_features + o] = acc;
        }
}

template <class T>
void dense_backward_input(const DenseGeometry& g, std::span<const T> dy, std::span<const T> w, std::span<T> dx) {
    for (int n = 0; n < g.batch; ++n)
        for (int o = 0; o < g.out_features; ++o)
            for (int i = 0; i < g.in_features; ++i)
                dx[static_cast<std::size_t>(n) * g.in_features + i] +=
                    dy[static_cast<std::size_t>(n) * g.out_features + o] * w[static_cast<std::size_t>(o) * g.in_features + i];
}

template <class T>
void dense_backward_params(const DenseGeometry& g, std::span<const T> x, std::span<const T> dy, std::span<T> dw,
                           std::span<T> dbias) {
    for (int n = 0; n < g.batch; ++n)
        for (int o = 0; o < g.out_features; ++o) {
            const T d = dy[static_cast<std::size_t>(n) * g.out_features + o];
            if (!dbias.empty()) dbias[static_cast<std::size_t>(o)] += d;
            for (int i = 0; i < g.in_features; ++i)
                dw[static_cast<std::size_t>(o) * g.in_features + i] += d * x[static_cast<std::size_t>(n) * g.in_features + i];
        }
}

#define CAFE_INSTANTIATE(T)                                                                                       \
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

}  // namespace cafe::kernels::serial
