#include <random>
#include <vector>

#include "cafe/kernels.hpp"
#include "doctest.h"

using namespace cafe::kernels;

namespace {

template <class T>
std::vector<T> random_vec(long n, unsigned seed) {
    std::mt19937 gen(seed);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    std::vector<T> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<T>(d(gen));
    return v;
}

template <class T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

template <class T>
void check_conv(const ConvGeometry& g, bool with_bias, double tol) {
    auto x = random_vec<T>(g.input_size(), 1);
    auto w = random_vec<T>(g.weight_size(), 2);
    auto b = with_bias ? random_vec<T>(g.out_channels, 3) : std::vector<T>{};
    auto dy = random_vec<T>(g.output_size(), 4);

    std::vector<T> y_par(g.output_size()), y_ser(g.output_size());
    parallel::conv2d_forward<T>(g, x, w, b, y_par);
    serial::conv2d_forward<T>(g, x, w, b, y_ser);
    CHECK(max_abs_diff(y_par, y_ser) < tol);

    std::vector<T> dx_par(g.input_size(), T(0.5)), dx_ser(g.input_size(), T(0.5));
    parallel::conv2d_backward_input<T>(g, dy, w, dx_par);
    serial::conv2d_backward_input<T>(g, dy, w, dx_ser);
    CHECK(max_abs_diff(dx_par, dx_ser) < tol);

    std::vector<T> dw_par(g.weight_size(), T(0.25)), dw_ser(g.weight_size(), T(0.25));
    std::vector<T> db_par(with_bias ? g.out_channels : 0, T(1)), db_ser(with_bias ? g.out_channels : 0, T(1));
    parallel::conv2d_backward_params<T>(g, x, dy, dw_par, db_par);
    serial::conv2d_backward_params<T>(g, x, dy, dw_ser, db_ser);
    CHECK(max_abs_diff(dw_par, dw_ser) < tol);
    CHECK(max_abs_diff(db_par, db_ser) < tol);
}

}  // namespace

TEST_CASE("parallel conv kernels agree with the serial reference") {
    check_conv<double>({2, 3, 9, 7, 5, 3, 1, 1}, true, 1e-12);
    check_conv<double>({3, 4, 8, 8, 6, 3, 2, 1}, false, 1e-12);
    check_conv<double>({2, 5, 6, 6, 7, 1, 2, 0}, true, 1e-12);
    check_conv<float>({4, 16, 16, 16, 16, 3, 1, 1}, false, 1e-4);
}

TEST_CASE("parallel dense kernels agree with the serial reference") {
    DenseGeometry g{5, 37, 11};
    auto x = random_vec<double>(5 * 37, 5);
    auto w = random_vec<double>(11 * 37, 6);
    auto b = random_vec<double>(11, 7);
    auto dy = random_vec<double>(5 * 11, 8);
    std::vector<double> yp(55), ys(55);
    parallel::dense_forward<double>(g, x, w, b, yp);
    serial::dense_forward<double>(g, x, w, b, ys);
    CHECK(max_abs_diff(yp, ys) < 1e-12);
    std::vector<double> dxp(5 * 37), dxs(5 * 37);
    parallel::dense_backward_input<double>(g, dy, w, dxp);
    serial::dense_backward_input<double>(g, dy, w, dxs);
    CHECK(max_abs_diff(dxp, dxs) < 1e-12);
    std::vector<double> dwp(11 * 37), dws(11 * 37), dbp(11), dbs(11);
    parallel::dense_backward_params<double>(g, x, dy, dwp, dbp);
    serial::dense_backward_params<double>(g, x, dy, dws, dbs);
    CHECK(max_abs_diff(dwp, dws) < 1e-12);
    CHECK(max_abs_diff(dbp, dbs) < 1e-12);
}

TEST_CASE("gemm accumulates into C") {
    // [1 2; 3 4] * [5; 6] = [17; 39]
    const double a[] = {1, 2, 3, 4}, b[] = {5, 6};
    double c[] = {1, 1};
    parallel::gemm(2, 1, 2, a, b, c);
    CHECK(c[0] == 18);
    CHECK(c[1] == 40);
}
