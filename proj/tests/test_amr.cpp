#include <cmath>

#include "cafe/amr_gmm.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace cafe;
using namespace cafe::amr;
using zoo::FeatureNetKind;

namespace {

// Zeroes every head parameter, then sets the final dense bias, so the head
// emits log_softmax(bias) for any input.
template <class T>
void constant_head(zoo::SplitClassifier<T>& m, const std::vector<double>& bias) {
    auto params = nn::parameters(m.head_module());
    for (auto& p : params) p.mutable_value().fill(T(0));
    auto& b = params.back().mutable_value();
    REQUIRE(b.size() == static_cast<std::int64_t>(bias.size()));
    for (std::size_t k = 0; k < bias.size(); ++k) b[static_cast<std::int64_t>(k)] = static_cast<T>(bias[k]);
}

template <class T>
AmrBatch<T> batch_of(zoo::SplitClassifier<T>& m, int n, unsigned seed, double eps = 0.03) {
    const auto d = testutil::shapes_test().slice(0, n);
    Tensor<T> x(d.images.shape()), xa(d.images.shape());
    const auto noise = testutil::random_tensor(d.images.shape(), seed, -eps, eps);
    for (std::int64_t i = 0; i < x.size(); ++i) {
        x[i] = static_cast<T>(d.images[i]);
        xa[i] = static_cast<T>(std::clamp(d.images[i] + noise[i], 0.0, 1.0));
    }
    return compute_instrument(m, x, xa, d.labels);
}

}  // namespace

TEST_CASE("instrument: zero perturbation gives a zero instrument; f_nat + z recovers f_adv") {
    auto m = zoo::build_classifier<float>({"tiny-cnn", 3}, 1);
    const auto d = testutil::shapes_test().slice(0, 4);
    const auto same = compute_instrument(m, d.images, d.images, d.labels);
    for (float v : same.z.storage()) CHECK(v == 0.0f);
    const auto b = batch_of(m, 4, 2);
    for (std::int64_t i = 0; i < b.z.size(); ++i) CHECK(b.f_nat[i] + b.z[i] == doctest::Approx(b.f_adv[i]).epsilon(1e-6));
    CHECK_THROWS_AS(compute_instrument(m, d.images, d.slice(0, 2).images, d.labels), ShapeError);
}

TEST_CASE("log-likelihood projection") {
    auto m = zoo::build_classifier<float>({"tiny-cnn", 3}, 1);
    const auto b = batch_of(m, 4, 3);
    ag::NoGradGuard ng;
    const Var<float> f_nat(b.f_nat);
    const Tensor<float> zero(b.f_nat.shape());
    const auto lp0 = log_likelihood_project(m, f_nat, Var<float>(zero)).value();
    CHECK(lp0.storage() == m.head(f_nat).value().storage());
    const auto lpz = log_likelihood_project(m, f_nat, Var<float>(b.z)).value();
    const auto lpa = m.head(Var<float>(b.f_adv)).value();
    for (std::int64_t i = 0; i < lpz.size(); ++i) CHECK(lpz[i] == doctest::Approx(lpa[i]).epsilon(1e-5));
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int k = 0; k < 3; ++k) {
            CHECK(lpz[r * 3 + k] <= 0.0f);
            s += std::exp(lpz[r * 3 + k]);
        }
        CHECK(std::abs(s - 1.0) <= 1e-5);
    }
}

TEST_CASE("residual: uniform head gives ln K, confident head gives zero") {
    auto m = zoo::build_classifier<float>({"tiny-cnn", 10}, 1);
    constant_head(m, std::vector<double>(10, 0.0));
    const auto b = batch_of(m, 5, 4);
    auto h = zoo::FeatureNet<float>(FeatureNetKind::Cnn, m.feature_shape(), 3);
    ag::NoGradGuard ng;
    const auto psi = amr_residual(m, h, Var<float>(b.f_nat), Var<float>(b.z), b.labels).value();
    for (float v : psi.storage()) CHECK(v == doctest::Approx(std::log(10.0)).epsilon(1e-6));

    auto m3 = zoo::build_classifier<float>({"tiny-cnn", 3}, 1);
    constant_head(m3, {0.0, 200.0, 0.0});
    const auto b3 = batch_of(m3, 3, 4);
    auto h3 = zoo::FeatureNet<float>(FeatureNetKind::Zero, m3.feature_shape(), 0);
    const auto psi3 = amr_residual(m3, h3, Var<float>(b3.f_nat), Var<float>(b3.z), {1, 1, 1}).value();
    for (float v : psi3.storage()) CHECK(v == 0.0f);
}

TEST_CASE("moment on a hand-built three-sample batch") {
    // Constant logits (1, 2, 3): -log p_k = lse - b_k with
    // lse = 3 + ln(1 + e^-1 + e^-2).
    auto m = zoo::build_classifier<double>({"tiny-cnn", 3}, 1);
    constant_head(m, {1.0, 2.0, 3.0});
    auto b = batch_of(m, 3, 5);
    b.labels = {0, 1, 2};
    const double lse = 3.0 + std::log(1.0 + std::exp(-1.0) + std::exp(-2.0));
    const double nll[3] = {lse - 1.0, lse - 2.0, lse - 3.0};
    auto h = zoo::FeatureNet<double>(FeatureNetKind::Cnn, m.feature_shape(), 2);
    auto g = zoo::FeatureNet<double>(FeatureNetKind::Cnn, m.feature_shape(), 3);
    // residual and weight both equal -log p_y, so each term is its square
    const double expected = (nll[0] * nll[0] + nll[1] * nll[1] + nll[2] * nll[2]) / 3.0;
    const auto e = amr_moment(m, h, g, b);
    CHECK(e.value == doctest::Approx(expected).epsilon(1e-12));
    for (int i = 0; i < 3; ++i) {
        CHECK(e.per_sample_residuals[static_cast<std::size_t>(i)] == doctest::Approx(nll[i]).epsilon(1e-12));
        CHECK(e.weights[static_cast<std::size_t>(i)] == doctest::Approx(nll[i]).epsilon(1e-12));
    }
    const auto lit = amr_moment(m, h, g, b, SignConvention::PaperLiteral);
    CHECK(lit.value == doctest::Approx(-expected).epsilon(1e-12));
}

TEST_CASE("moment is nonnegative, vanishes for perfect h, and identity g zeroes the penalty") {
    auto m = zoo::build_classifier<float>({"tiny-cnn", 3}, 7);
    const auto b = batch_of(m, 8, 6, 8.0 / 255);
    auto id = zoo::FeatureNet<float>(FeatureNetKind::Identity, m.feature_shape(), 0);
    for (std::uint64_t s = 0; s < 4; ++s) {
        auto h = zoo::FeatureNet<float>(FeatureNetKind::Cnn, m.feature_shape(), 10 + s);
        auto g = zoo::FeatureNet<float>(FeatureNetKind::Cnn, m.feature_shape(), 20 + s);
        const auto e = amr_moment(m, h, g, b);
        CHECK(e.value >= 0.0);
        for (double r : e.per_sample_residuals) CHECK(r >= 0.0);
        CHECK(e.regularizer > 0.0);
        CHECK(amr_moment(m, h, id, b).regularizer == 0.0);
    }
    auto perfect = zoo::build_classifier<float>({"tiny-cnn", 3}, 7);
    constant_head(perfect, {0.0, 0.0, 300.0});
    auto pb = batch_of(perfect, 4, 6);
    pb.labels = {2, 2, 2, 2};
    auto h = zoo::FeatureNet<float>(FeatureNetKind::Cnn, perfect.feature_shape(), 1);
    auto g = zoo::FeatureNet<float>(FeatureNetKind::Cnn, perfect.feature_shape(), 2);
    CHECK(amr_moment(perfect, h, g, pb).value == 0.0);
}

TEST_CASE("gradients of the full min-max objective match central differences") {
    auto m = zoo::build_classifier<double>({"tiny-cnn", 3}, 5);
    const auto b = batch_of(m, 4, 8, 8.0 / 255);
    auto h = zoo::FeatureNet<double>(FeatureNetKind::Cnn, m.feature_shape(), 31);
    auto g = zoo::FeatureNet<double>(FeatureNetKind::Cnn, m.feature_shape(), 32);
    h.set_training(true);
    g.set_training(true);
    nn::FreezeGuard<double> frozen(m.parameters());
    auto objective = [&] { return amr_terms(m, h, g, b, 1.0, SignConvention::RoleConsistent).objective; };
    CHECK(testutil::gradcheck_normwise(h.parameters(), objective) <= 1e-4);
    CHECK(testutil::gradcheck_normwise(g.parameters(), objective) <= 1e-4);
    auto literal = [&] { return amr_terms(m, h, g, b, 0.5, SignConvention::PaperLiteral).objective; };
    CHECK(testutil::gradcheck_normwise(g.parameters(), literal) <= 1e-4);
}

TEST_CASE("one small h step with g fixed lowers the moment") {
    auto m = zoo::build_classifier<double>({"tiny-cnn", 3}, 5);
    const auto b = batch_of(m, 6, 9, 8.0 / 255);
    auto h = zoo::FeatureNet<double>(FeatureNetKind::Cnn, m.feature_shape(), 41);
    auto g = zoo::FeatureNet<double>(FeatureNetKind::Cnn, m.feature_shape(), 42);
    nn::FreezeGuard<double> frozen(m.parameters());
    const double before = amr_moment(m, h, g, b).value;
    for (auto& p : h.parameters()) p.zero_grad();
    amr_terms(m, h, g, b, 0.0, SignConvention::RoleConsistent).value.backward();
    for (auto& p : h.parameters()) {
        auto& v = p.mutable_value();
        for (std::int64_t i = 0; i < v.size(); ++i) v[i] -= 1e-4 * p.grad()[i];
    }
    CHECK(amr_moment(m, h, g, b).value < before);
}

TEST_CASE("fit config validation and sign convention names") {
    AmrFitConfig c;
    CHECK_NOTHROW(c.validate());
    c.lambda_reg = -1;
    CHECK_THROWS_AS(c.validate(), AmrError);
    CHECK(parse_sign_convention(to_string(SignConvention::PaperLiteral)) == SignConvention::PaperLiteral);
    CHECK(parse_sign_convention("role-consistent") == SignConvention::RoleConsistent);
    CHECK_THROWS_AS(parse_sign_convention("upside-down"), AmrError);
}

TEST_CASE("fitting is deterministic and warns on an untrained classifier") {
    auto m = zoo::build_classifier<float>({"tiny-cnn", 3}, 12);
    const auto train = testutil::shapes_train().slice(0, 48);
    AmrFitConfig c;
    c.epochs = 2;
    c.batch_size = 16;
    c.seed = 4;
    const auto a = fit_amr_gmm(m, train, c);
    const auto b = fit_amr_gmm(m, train, c);
    REQUIRE(a.trace.size() == 2);
    for (std::size_t e = 0; e < 2; ++e) {
        CHECK(a.trace[e].moment == b.trace[e].moment);
        CHECK(a.trace[e].regularizer == b.trace[e].regularizer);
        CHECK(a.trace[e].acc_ac == b.trace[e].acc_ac);
        for (double acc : {a.trace[e].acc_adv, a.trace[e].acc_cf, a.trace[e].acc_cc, a.trace[e].acc_ac}) {
            CHECK(acc >= 0.0);
            CHECK(acc <= 100.0);
        }
    }
    auto ha = a.h, hb = b.h;
    CHECK(ha.state_dict() == hb.state_dict());
    CHECK_FALSE(a.warnings.empty());
}
