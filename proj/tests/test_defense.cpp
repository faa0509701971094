#include <cmath>

#include "cafe/cafe_defense.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace cafe;
using namespace cafe::defense;

namespace {

Var<float> log_rows(const std::vector<std::vector<double>>& rows) {
    Tensor<float> t({static_cast<int>(rows.size()), static_cast<int>(rows[0].size())});
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t k = 0; k < rows[r].size(); ++k)
            t[static_cast<std::int64_t>(r * rows[r].size() + k)] = static_cast<float>(std::log(rows[r][k]));
    return Var<float>(t);
}

DefenseConfig quick_config() {
    DefenseConfig c;
    c.attack.steps = 2;
    c.attack.step_size = 4.0 / 255;
    c.optim.epochs = 2;
    c.optim.batch_size = 16;
    c.seed = 9;
    return c;
}

bool same_trace(const std::vector<DefenseEpochRecord>& a, const std::vector<DefenseEpochRecord>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].loss_total != b[i].loss_total || a[i].loss_defense != b[i].loss_defense || a[i].loss_cafe != b[i].loss_cafe ||
            a[i].natural_acc != b[i].natural_acc || a[i].robust_acc != b[i].robust_acc || a[i].learning_rate != b[i].learning_rate)
            return false;
    return true;
}

}  // namespace

TEST_CASE("KL on hand-built two-class rows") {
    const auto kl = kl_divergence(log_rows({{0.9, 0.1}}), log_rows({{0.5, 0.5}}));
    CHECK(kl.value()[0] == doctest::Approx(0.368).epsilon(1e-3));
    CHECK(kl.value()[0] == doctest::Approx(0.9 * std::log(1.8) + 0.1 * std::log(0.2)).epsilon(1e-5));
    const auto same = kl_divergence(log_rows({{0.2, 0.8}, {0.6, 0.4}}), log_rows({{0.2, 0.8}, {0.6, 0.4}}));
    CHECK(same.value()[0] == 0.0f);
}

TEST_CASE("defense losses: degenerate weights and identical inputs") {
    auto m = testutil::trained_tiny();
    m.set_training(false);
    const auto d = testutil::shapes_test().slice(0, 12);
    Rng rng(2);
    const auto xa = attack::pgd(m, d.images, d.labels, attack::PerturbationBudget::pgd_train(), rng);
    const double ce_nat = defense_loss(DefenseKind::Adv, m, d.images, d.images, d.labels, 0).value()[0];
    CHECK(defense_loss(DefenseKind::Trades, m, d.images, xa, d.labels, 0.0).value()[0] == ce_nat);
    CHECK(defense_loss(DefenseKind::Trades, m, d.images, d.images, d.labels, 6.0).value()[0] == ce_nat);
    CHECK(defense_loss(DefenseKind::Trades, m, d.images, xa, d.labels, 6.0).value()[0] > ce_nat);
    CHECK(defense_loss(DefenseKind::Adv, m, d.images, xa, d.labels, 0).value()[0] > ce_nat);

    auto confident = zoo::build_classifier<float>({"tiny-cnn", 3}, 1);
    confident.set_training(false);
    auto params = nn::parameters(confident.head_module());
    for (auto& p : params) p.mutable_value().fill(0.0f);
    params.back().mutable_value()[1] = 40.0f;
    CHECK(defense_loss(DefenseKind::Adv, confident, d.images, d.images, std::vector<int>(12, 1), 0).value()[0] < 1e-6);
}

TEST_CASE("CAFE regularizer is nonnegative, zero on identical inputs, and reaches the parameters") {
    auto m = testutil::trained_tiny();
    m.set_training(false);
    const auto d = testutil::shapes_test().slice(0, 8);
    Rng rng(3);
    const auto xa = attack::pgd(m, d.images, d.labels, attack::PerturbationBudget::pgd_train(), rng);
    CHECK(cafe_regularizer(m, xa, xa).value()[0] == 0.0f);
    const auto other = testutil::shapes_test().slice(8, 16);
    const auto reg = cafe_regularizer(m, other.images, xa);
    CHECK(reg.value()[0] > 0.0f);
    for (auto& p : m.parameters()) p.zero_grad();
    reg.backward();
    double norm = 0;
    for (auto& p : m.parameters())
        for (float g : p.grad().storage()) norm += static_cast<double>(g) * g;
    CHECK(norm > 0.0);
}

TEST_CASE("learning-rate schedules") {
    OptimizerConfig c;
    c.epochs = 10;
    const int per = 5;
    CHECK(c.learning_rate(0, per) < 0.01);
    CHECK(c.learning_rate(24, per) == doctest::Approx(0.098));
    CHECK(c.learning_rate(49, per) < 0.01);
    for (int i = 1; i < 25; ++i) CHECK(c.learning_rate(i, per) > c.learning_rate(i - 1, per));
    c.schedule = "step";
    CHECK(c.learning_rate(0, per) == 0.1);
    CHECK(c.learning_rate(25, per) == doctest::Approx(0.01));
    CHECK(c.learning_rate(40, per) == doctest::Approx(0.001));
    const auto p = OptimizerConfig::paper_schedule();
    CHECK(p.epochs == 120);
    CHECK(p.schedule == "cyclic");
    CHECK(p.lr_max == 0.1);
    CHECK(p.momentum == 0.9);
    c.schedule = "cosine";
    CHECK_THROWS_AS(c.learning_rate(0, per), DefenseError);
}

TEST_CASE("config defaults, validation and the attack warm-up") {
    DefenseConfig c;
    CHECK(c.cafe_weight == 1.0);
    CHECK(c.trades_beta == 6.0);
    CHECK(c.optim.epochs == 30);
    CHECK(c.optim.batch_size == 128);
    CHECK(c.uses_cafe());
    c.cafe_target = CafeTarget::Off;
    CHECK_FALSE(c.uses_cafe());
    c.cafe_target = CafeTarget::Inversion;
    c.cafe_weight = 0;
    CHECK_FALSE(c.uses_cafe());
    c.cafe_weight = -1;
    CHECK_THROWS_AS(c.validate(), DefenseError);

    DefenseConfig w;
    w.attack_warmup_epochs = 3;
    CHECK(w.attack_for_epoch(0).eps_max == doctest::Approx(w.attack.eps_max / 4));
    CHECK(w.attack_for_epoch(3).eps_max == w.attack.eps_max);
    CHECK(w.attack_for_epoch(7).step_size == w.attack.step_size);
    CHECK(parse_defense_kind("trades") == DefenseKind::Trades);
    CHECK(parse_cafe_target(to_string(CafeTarget::Direct)) == CafeTarget::Direct);
    CHECK_THROWS_AS(parse_defense_kind("mart"), DefenseError);
}

TEST_CASE("zero CAFE weight is the baseline trainer, bit for bit") {
    const auto train = testutil::shapes_train().slice(0, 32);
    const auto eval = testutil::shapes_test().slice(0, 12);
    const zoo::SplitClassifier<float> init({"tiny-cnn", 3}, 5);
    auto base_cfg = quick_config();
    base_cfg.cafe_target = CafeTarget::Off;
    auto zero_cfg = quick_config();
    zero_cfg.cafe_weight = 0;
    for (auto kind : {DefenseKind::Adv, DefenseKind::Trades}) {
        base_cfg.kind = zero_cfg.kind = kind;
        auto a = train_cafe(init, train, eval, base_cfg);
        auto b = train_cafe(init, train, eval, zero_cfg);
        auto c = train_cafe(init, train, eval, base_cfg);
        CHECK(same_trace(a.trace, b.trace));
        CHECK(same_trace(a.trace, c.trace));
        CHECK(a.model.state_dict() == b.model.state_dict());
        CHECK(a.trace.back().natural_acc.has_value());
        CHECK(a.trace.back().loss_cafe == 0.0);
    }
}

TEST_CASE("CAFE training consumes the archive and checks coverage") {
    auto f0 = testutil::trained_tiny();
    auto h = zoo::FeatureNet<float>(zoo::FeatureNetKind::Cnn, f0.feature_shape(), 5);
    h.set_training(false);
    const auto train = testutil::shapes_train().slice(0, 32);
    const auto eval = testutil::shapes_test().slice(0, 12);
    inversion::InversionConfig icfg;
    icfg.steps = 3;
    const auto archive = inversion::build_archive(f0, h, train, attack::AttackSpec::named("pgd-train"), icfg, 1);
    const zoo::SplitClassifier<float> init({"tiny-cnn", 3}, 5);
    auto cfg = quick_config();
    CHECK_THROWS_WITH_AS(train_cafe(init, train, eval, cfg), doctest::Contains("archive"), DefenseError);

    CausalSource src;
    src.archive = &archive;
    for (auto target : {CafeTarget::Inversion, CafeTarget::Direct}) {
        cfg.cafe_target = target;
        const auto r = train_cafe(init, train, eval, cfg, src);
        CHECK(r.trace.back().loss_cafe > 0.0);
        CHECK(r.trace.back().loss_total ==
              doctest::Approx(r.trace.back().loss_defense + cfg.cafe_weight * r.trace.back().loss_cafe).epsilon(1e-4));
        const auto again = train_cafe(init, train, eval, cfg, src);
        CHECK(same_trace(r.trace, again.trace));
    }

    const auto partial = inversion::build_archive(f0, h, train.slice(0, 16), attack::AttackSpec::named("pgd-train"), icfg, 1);
    src.archive = &partial;
    CHECK_THROWS_WITH_AS(train_cafe(init, train, eval, cfg, src), doctest::Contains("missing sample id"), DefenseError);

    cfg.cafe_target = CafeTarget::Inversion;
    cfg.refresh_inversions = true;
    src.archive = &archive;
    CHECK_THROWS_AS(train_cafe(init, train, eval, cfg, src), DefenseError);
    src.hypothesis = &h;
    CHECK_NOTHROW(train_cafe(init, train, eval, cfg, src));
}
