#include <cmath>
#include <numbers>
#include <random>

#include "cafe/causal_analysis.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace cafe;
using namespace cafe::analysis;
using ag::Var;
using zoo::FeatureNetKind;

TEST_CASE("imbalance ratio") {
    CHECK(imbalance_ratio({0, 0, 0, 1, 2, 2}, 3) == doctest::Approx(1.0 / 3.0));
    CHECK(imbalance_ratio({0, 1, 2, 0, 1, 2}, 3) == 1.0);
    CHECK(imbalance_ratio({1, 1, 1}, 3) == 0.0);
    CHECK(imbalance_ratio({0, 1}, 3) == 0.0);
    CHECK_THROWS_AS(imbalance_ratio({}, 3), AnalysisError);
    CHECK_THROWS_AS(imbalance_ratio({3}, 3), AnalysisError);
    std::mt19937 gen(1);
    for (int t = 0; t < 50; ++t) {
        std::vector<int> p(20);
        for (auto& v : p) v = static_cast<int>(gen() % 4);
        const double r = imbalance_ratio(p, 4);
        CHECK(r >= 0.0);
        CHECK(r <= 1.0);
    }
}

TEST_CASE("summaries interpolate quartiles linearly") {
    const auto s = summarize({4, 1, 3, 2});
    CHECK(s.median == 2.5);
    CHECK(s.q1 == 1.75);
    CHECK(s.q3 == 3.25);
    CHECK(s.mean == 2.5);
    CHECK(s.min == 1);
    CHECK(s.max == 4);
    const auto one = summarize({7});
    CHECK(one.q1 == 7);
    CHECK(one.q3 == 7);
}

TEST_CASE("Rademacher proxy matches the half-normal mean on centred scores") {
    // d = |mean_i sigma_i s_i| is approximately |N(0, mean(s^2)/n)|, whose
    // mean is sqrt(2/pi) * sqrt(mean(s^2) / n).
    std::mt19937 gen(11);
    std::normal_distribution<double> nd(0.0, 1.0);
    const int n = 400;
    std::vector<double> s(n);
    double mean = 0;
    for (auto& v : s) mean += (v = 2.0 + 0.5 * nd(gen));
    mean /= n;
    double ss = 0;
    for (auto& v : s) {
        v -= mean;
        ss += v * v;
    }
    const double expected = std::sqrt(2.0 / std::numbers::pi) * std::sqrt(ss / n / n);
    const auto d = rademacher_from_scores(s, 20000, 3);
    CHECK(d.values.size() == 20000);
    CHECK(std::abs(d.mean - expected) <= 0.02 * expected);
    const auto again = rademacher_from_scores(s, 20000, 3);
    CHECK(again.values == d.values);
    CHECK_THROWS_AS(rademacher_from_scores(s, 99, 3), AnalysisError);
}

TEST_CASE("Rademacher distance of the zero function is zero; zero-norm instruments are excluded") {
    const Shape fs{3, 8, 8};
    auto zero = zoo::FeatureNet<float>(FeatureNetKind::Zero, fs, 0);
    auto id = zoo::FeatureNet<float>(FeatureNetKind::Identity, fs, 0);
    Tensor<float> z({5, 3, 8, 8});
    for (std::int64_t i = 0; i < z.size(); ++i) z[i] = static_cast<float>(std::sin(0.37 * i));
    std::fill(z.data() + 2 * 192, z.data() + 3 * 192, 0.0f);
    const auto r = rademacher_distance(zero, z, 200, 1);
    for (double v : r.distance.values) CHECK(v == 0.0);
    CHECK(r.excluded_zero_norm == 1);
    CHECK(r.scores.size() == 4);
    const auto ri = rademacher_distance(id, z, 200, 1);
    for (double sc : ri.scores) CHECK(sc == doctest::Approx(1.0));
    CHECK_THROWS_AS(rademacher_distance(zero, Tensor<float>({2, 3, 8, 8}), 200, 1), AnalysisError);
}

TEST_CASE("Pearson correlation: symmetry, positive rescaling, degeneracy") {
    std::vector<float> a(50), b(50), c(50, 1.5f);
    for (int i = 0; i < 50; ++i) {
        a[static_cast<std::size_t>(i)] = static_cast<float>(std::sin(i * 0.3));
        b[static_cast<std::size_t>(i)] = static_cast<float>(std::sin(i * 0.3) + 0.5 * std::cos(i * 1.7));
    }
    const double r = pearson(a.data(), b.data(), 50);
    CHECK(r == doctest::Approx(pearson(b.data(), a.data(), 50)).epsilon(1e-12));
    std::vector<float> a2(a), b2(b);
    for (auto& v : a2) v *= 3.0f;
    for (auto& v : b2) v *= 0.25f;
    CHECK(pearson(a2.data(), b2.data(), 50) == doctest::Approx(r).epsilon(1e-6));
    CHECK(pearson(a.data(), a.data(), 50) == doctest::Approx(1.0));
    CHECK(r > -1.0);
    CHECK(r < 1.0);
    CHECK_THROWS_AS(pearson(a.data(), c.data(), 50), DegenerateInstrumentError);
}

TEST_CASE("conjunction identities") {
    auto m = testutil::trained_tiny();
    auto h = zoo::FeatureNet<float>(FeatureNetKind::Cnn, m.feature_shape(), 3);
    auto g = zoo::FeatureNet<float>(FeatureNetKind::Cnn, m.feature_shape(), 4);
    auto id = zoo::FeatureNet<float>(FeatureNetKind::Identity, m.feature_shape(), 0);
    h.set_training(false);
    g.set_training(false);
    const auto d = testutil::shapes_test().slice(0, 6);
    const auto xa = attack::attack_dataset(m, d, attack::AttackSpec::named("pgd"), 2);

    const auto same = conjunction_features(m, h, g, d.images, d.images);
    for (float v : same.z.storage()) CHECK(v == 0.0f);
    CHECK(same.adv.storage() == same.f_nat.storage());

    const auto c = conjunction_features(m, h, g, d.images, xa);
    ag::NoGradGuard ng;
    CHECK(c.adv.storage() == m.features(Var<float>(xa)).value().storage());
    const auto gz = g.forward(Var<float>(c.z)).value();
    const auto hz = h.forward(Var<float>(c.z)).value();
    for (std::int64_t k = 0; k < c.cf.size(); ++k) {
        CHECK(c.cf[k] == c.f_nat[k] + gz[k]);
        CHECK(c.ac[k] == c.f_nat[k] + hz[k]);
    }

    const auto ci = conjunction_features(m, h, id, d.images, xa);
    CHECK(ci.cc.storage() == ci.ac.storage());
    for (std::int64_t k = 0; k < ci.cf.size(); ++k) CHECK(ci.cf[k] == doctest::Approx(ci.adv[k]).epsilon(1e-6));
}

TEST_CASE("conjunction robustness table") {
    auto m = testutil::trained_tiny();
    auto h = zoo::FeatureNet<float>(FeatureNetKind::Cnn, m.feature_shape(), 3);
    auto id = zoo::FeatureNet<float>(FeatureNetKind::Identity, m.feature_shape(), 0);
    h.set_training(false);
    const auto d = testutil::shapes_test().slice(0, 30);
    auto cw = attack::AttackSpec::named("cw");
    cw.iters = 10;
    const auto t = conjunction_robustness(m, h, id, d, std::vector<attack::AttackSpec>{attack::AttackSpec::named("fgsm"), cw}, 4);
    CHECK(t.by_attack.size() == 2);
    for (const auto& [k, a] : t.by_attack) {
        for (double v : {a.adv, a.cf, a.cc, a.ac}) {
            CHECK(v >= 0.0);
            CHECK(v <= 100.0);
        }
        CHECK(a.cc == a.ac);
        CHECK(t.cc_predictions.at(k).size() == 30);
    }
    const auto plain = attack::evaluate_robustness(m, d, {attack::AttackSpec::named("fgsm")}, 4);
    CHECK(t.by_attack.at("fgsm").adv == plain.attacked.at("fgsm"));
    CHECK(t.natural == plain.natural);
    auto bad = attack::AttackSpec::named("pgd");
    bad.kind = "dlr";
    CHECK_THROWS_AS(conjunction_robustness(m, h, id, d, {bad}, 4), AnalysisError);
    CHECK_THROWS_AS(conjunction_robustness(m, h, id, data::ImageBatch{}, {cw}, 4), AnalysisError);
}

TEST_CASE("IV diagnostics") {
    auto m = testutil::trained_tiny();
    const auto d = testutil::shapes_test().slice(0, 30);
    for (auto mode : {PearsonMode::PerSample, PearsonMode::Global}) {
        const auto r = iv_diagnostics(m, d, attack::AttackSpec::named("pgd"), 1, mode);
        CHECK(r.acc_T >= 0.0);
        CHECK(r.acc_T <= 100.0);
        CHECK(r.acc_Z >= 0.0);
        CHECK(r.acc_Z <= 100.0);
        CHECK(std::abs(r.pearson_rho) <= 1.0);
        CHECK(r.mode == mode);
    }
    CHECK_THROWS_AS(iv_diagnostics(m, d, attack::AttackSpec::named("fgsm", 0.0), 1), DegenerateInstrumentError);
}

TEST_CASE("confidence profile") {
    auto m = testutil::trained_tiny();
    auto h = zoo::FeatureNet<float>(FeatureNetKind::Cnn, m.feature_shape(), 3);
    h.set_training(false);
    const auto d = testutil::shapes_test().slice(0, 30);
    const auto p = confidence_profile(m, h, d, attack::AttackSpec::named("pgd"), 1);
    CHECK(p.sources.count("inversion") == 0);
    for (const auto& [k, s] : p.sources) {
        CHECK(s.values.size() == 30);
        for (double v : s.values) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    CHECK(p.sources.at("natural").mean > p.sources.at("adversarial").mean);

    inversion::InversionConfig icfg;
    icfg.steps = 3;
    const auto arch = inversion::build_archive(m, h, d, attack::AttackSpec::named("pgd"), icfg, 1);
    const auto q = confidence_profile(m, h, d, attack::AttackSpec::named("pgd"), 1, &arch);
    CHECK(q.sources.count("inversion") == 1);
    CHECK(q.sources.at("ac").values == p.sources.at("ac").values);
}
