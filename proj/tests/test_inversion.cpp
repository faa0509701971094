#include <cmath>

#include "cafe/causal_inversion.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace cafe;
using namespace cafe::inversion;
using zoo::FeatureNetKind;

namespace {

Tensor<float> log_rows(const std::vector<std::vector<double>>& rows) {
    Tensor<float> t({static_cast<int>(rows.size()), static_cast<int>(rows[0].size())});
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t k = 0; k < rows[r].size(); ++k)
            t[static_cast<std::int64_t>(r * rows[r].size() + k)] = static_cast<float>(std::log(rows[r][k]));
    return t;
}

}  // namespace

TEST_CASE("smoothed KL on hand-built two-class rows") {
    // 0.9 ln(0.9/0.5) + 0.1 ln(0.1/0.5)
    const double expected = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
    const auto kl = smoothed_kl_rows(log_rows({{0.9, 0.1}, {0.3, 0.7}}), log_rows({{0.5, 0.5}, {0.3, 0.7}}), 1e-12);
    CHECK(kl[0] == doctest::Approx(expected).epsilon(1e-5));
    CHECK(kl[0] == doctest::Approx(0.368).epsilon(1e-3));
    CHECK(std::abs(kl[1]) < 1e-6);
}

TEST_CASE("config validation") {
    InversionConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(c.resolved_step() == doctest::Approx(8.0 / 255 / 10));
    c.gamma = 0;
    CHECK_THROWS_AS(c.validate(), InversionError);
    c = {};
    c.smoothing = 0;
    CHECK_THROWS_AS(c.validate(), InversionError);
}

TEST_CASE("zero hypothesis: target is the natural prediction, so nothing moves") {
    auto m = testutil::trained_tiny();
    auto h = zoo::FeatureNet<float>(FeatureNetKind::Zero, m.feature_shape(), 0);
    const auto d = testutil::shapes_test().slice(0, 8);
    const auto xa = attack::attack_dataset(m, d, attack::AttackSpec::named("pgd"), 1);
    const auto r = invert_causal(m, h, d.images, xa, {});
    for (std::size_t i = 0; i < r.kl_initial.size(); ++i) {
        CHECK(r.kl_initial[i] < 1e-4);
        CHECK(r.kl_final[i] <= r.kl_initial[i]);
    }
    for (float v : r.delta.storage()) CHECK(v == 0.0f);
    CHECK(r.x_causal.storage() == d.images.storage());
}

TEST_CASE("inversion respects the budget and never ends worse than it started") {
    auto m = testutil::trained_tiny();
    auto h = zoo::FeatureNet<float>(FeatureNetKind::Cnn, m.feature_shape(), 5);
    h.set_training(false);
    const auto d = testutil::shapes_test().slice(0, 24);
    const auto xa = attack::attack_dataset(m, d, attack::AttackSpec::named("pgd"), 1);
    for (bool adv_init : {false, true}) {
        InversionConfig cfg;
        cfg.adversarial_init = adv_init;
        const auto r = invert_causal(m, h, d.images, xa, cfg);
        CHECK(attack::count_violations(d.images, r.x_causal, cfg.gamma) == 0);
        for (std::int64_t k = 0; k < r.delta.size(); ++k) {
            CHECK(std::abs(r.delta[k]) <= cfg.gamma);
            CHECK(r.x_causal[k] - d.images[k] == r.delta[k]);
        }
        double k0 = 0, k1 = 0;
        for (std::size_t i = 0; i < r.kl_initial.size(); ++i) {
            CHECK(r.kl_final[i] <= r.kl_initial[i]);
            k0 += r.kl_initial[i];
            k1 += r.kl_final[i];
        }
        CHECK(k1 < k0);
        for (std::size_t s = 1; s < r.best_kl_trace.size(); ++s) CHECK(r.best_kl_trace[s] <= r.best_kl_trace[s - 1]);
        CHECK(r.steps_used <= cfg.steps);
        CHECK(r.smoothing == cfg.smoothing);
    }
}

TEST_CASE("archive: coverage, lookup errors and round trip") {
    auto m = testutil::trained_tiny();
    auto h = zoo::FeatureNet<float>(FeatureNetKind::Cnn, m.feature_shape(), 5);
    h.set_training(false);
    const auto d = testutil::shapes_test().slice(10, 30);
    InversionConfig cfg;
    cfg.steps = 5;
    const auto a = build_archive(m, h, d, attack::AttackSpec::named("pgd"), cfg, 3, 8);
    const auto b = build_archive(m, h, d, attack::AttackSpec::named("pgd"), cfg, 3, 8);
    CHECK(a.size() == 20);
    CHECK(a.x_causal().storage() == b.x_causal().storage());
    CHECK(a.contains(d.ids[0]));
    CHECK_FALSE(a.contains(0));
    CHECK(attack::count_violations(d.images, a.x_causal(), cfg.gamma) == 0);

    const auto rows = a.causal_images({d.ids[3], d.ids[0]});
    CHECK(std::equal(rows.data(), rows.data() + 3072, a.x_causal().data() + 3 * 3072));
    CHECK(a.target_log_probs({d.ids[1]}).shape() == Shape{1, 3});
    CHECK_THROWS_WITH_AS(a.causal_images({d.ids[0], 424242}), doctest::Contains("424242"), InversionError);

    const auto path = testutil::temp_dir("archive") / "inv.ckpt";
    a.save(path);
    const auto l = InversionArchive::load(path);
    CHECK(l.ids() == a.ids());
    CHECK(l.x_causal().storage() == a.x_causal().storage());
    CHECK(l.delta().storage() == a.delta().storage());
    CHECK(l.kl_final() == a.kl_final());
    CHECK(l.target_log_probs(l.ids()).storage() == a.target_log_probs(a.ids()).storage());
    CHECK_THROWS_AS(InversionArchive::load(path.parent_path() / "absent.ckpt"), InversionError);
    CHECK_THROWS_AS(build_archive(m, h, data::ImageBatch{}, attack::AttackSpec::named("pgd"), cfg, 3), InversionError);
}
