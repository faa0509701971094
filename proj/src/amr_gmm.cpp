#include "cafe/amr_gmm.hpp"

#include <iostream>

namespace cafe::amr {

std::string to_string(SignConvention s) {
    return s == SignConvention::RoleConsistent ? "role-consistent" : "paper-literal";
}

SignConvention parse_sign_convention(const std::string& s) {
    if (s == "role-consistent") return SignConvention::RoleConsistent;
    if (s == "paper-literal") return SignConvention::PaperLiteral;
    throw AmrError("unknown sign convention '" + s + "'");
}

void AmrFitConfig::validate() const {
    attack.validate();
    if (lambda_reg < 0) throw AmrError("lambda_reg must be non-negative");
    if (!(lr_h > 0) || !(lr_g > 0)) throw AmrError("learning rates must be positive");
    if (g_steps < 1 || h_steps < 1) throw AmrError("steps per alternation must be at least 1");
    if (epochs < 1) throw AmrError("epochs must be at least 1");
    if (batch_size < 1) throw AmrError("batch_size must be positive");
}

namespace {

int argmax_row(const Tensor<float>& lp, int i) {
    const int k = lp.dim(1);
    const float* r = lp.data() + static_cast<std::int64_t>(i) * k;
    return static_cast<int>(std::max_element(r, r + k) - r);
}

void check_moment(double v, int epoch, int batch) {
    if (!std::isfinite(v) || v > 1e6)
        throw AmrDivergenceError("AMR-GMM diverged in epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                                 " (moment " + std::to_string(v) + ")");
}

}  // namespace

AmrFitResult fit_amr_gmm(SplitClassifier<float>& model, const data::ImageBatch& train, const AmrFitConfig& cfg) {
    cfg.validate();
    if (train.empty()) throw AmrError("empty training set");
    const auto& fs = model.feature_shape();
    AmrFitResult out{FeatureNet<float>(cfg.net_kind, fs, derive_seed(cfg.seed, "hypothesis")),
                     FeatureNet<float>(cfg.net_kind, fs, derive_seed(cfg.seed, "test-function")),
                     {},
                     {}};
    auto& h = out.h;
    auto& g = out.g;

    zoo::ModeGuard model_mode(model, false);
    nn::FreezeGuard<float> frozen(model.parameters());

    const double natural = attack::accuracy_percent(attack::predict(model, train.images), train.labels);
    if (natural < 2.0 * 100.0 / model.num_classes()) {
        out.warnings.push_back("classifier natural accuracy " + std::to_string(natural) +
                               "% is below twice chance; is it pretrained?");
        std::cerr << "warning: " << out.warnings.back() << '\n';
    }

    auto hp = h.parameters();
    auto gp = g.parameters();
    nn::RmsProp<float> opt_h(hp), opt_g(gp);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng batch_rng(derive_seed(cfg.seed, "amr-batches", static_cast<std::uint64_t>(epoch)));
        const auto batches = data::minibatches(train.size(), cfg.batch_size, &batch_rng);
        AmrEpochRecord rec;
        rec.epoch = epoch;
        long seen = 0, hit_adv = 0, hit_cf = 0, hit_cc = 0, hit_ac = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const auto mb = train.gather(batches[bi]);
            Rng attack_rng(derive_seed(cfg.seed, "amr-attack", static_cast<std::uint64_t>(epoch) * 1'000'003ULL + bi));
            const Tensor<float> x_adv = attack::pgd(model, mb.images, mb.labels, cfg.attack, attack_rng);
            const AmrBatch<float> batch = compute_instrument(model, mb.images, x_adv, mb.labels);

            h.set_training(true);
            g.set_training(true);
            double reg = 0, moment = 0;
            {
                nn::FreezeGuard<float> hold_h(hp);
                for (int s = 0; s < cfg.g_steps; ++s) {
                    opt_g.zero_grad();
                    const auto terms = amr_terms(model, h, g, batch, cfg.lambda_reg, cfg.sign);
                    check_moment(terms.value.value()[0], epoch, static_cast<int>(bi));
                    terms.objective.backward();
                    opt_g.step(cfg.lr_g, +1);
                    reg = terms.regularizer.value()[0];
                }
            }
            {
                nn::FreezeGuard<float> hold_g(gp);
                for (int s = 0; s < cfg.h_steps; ++s) {
                    opt_h.zero_grad();
                    const auto terms = amr_terms(model, h, g, batch, cfg.lambda_reg, cfg.sign);
                    moment = terms.value.value()[0];
                    check_moment(moment, epoch, static_cast<int>(bi));
                    terms.value.backward();
                    opt_h.step(cfg.lr_h, -1);
                }
            }

            // Conjunction accuracies with the updated pair in evaluation mode.
            h.set_training(false);
            g.set_training(false);
            {
                ag::NoGradGuard ng;
                const Var<float> f_nat(batch.f_nat), z(batch.z);
                const Var<float> gz = g.forward(z);
                const auto lp_adv = model.head(Var<float>(batch.f_adv)).value();
                const auto lp_cf = model.head(ag::add(f_nat, gz)).value();
                const auto lp_cc = model.head(ag::add(f_nat, h.forward(gz))).value();
                const auto lp_ac = model.head(ag::add(f_nat, h.forward(z))).value();
                for (int i = 0; i < mb.size(); ++i) {
                    const int y = mb.labels[static_cast<std::size_t>(i)];
                    hit_adv += argmax_row(lp_adv, i) == y;
                    hit_cf += argmax_row(lp_cf, i) == y;
                    hit_cc += argmax_row(lp_cc, i) == y;
                    hit_ac += argmax_row(lp_ac, i) == y;
                }
            }
            seen += mb.size();
            rec.moment += moment * mb.size();
            rec.regularizer += reg * mb.size();
        }
        const double n = static_cast<double>(seen);
        rec.moment /= n;
        rec.regularizer /= n;
        rec.acc_adv = 100.0 * hit_adv / n;
        rec.acc_cf = 100.0 * hit_cf / n;
        rec.acc_cc = 100.0 * hit_cc / n;
        rec.acc_ac = 100.0 * hit_ac / n;
        out.trace.push_back(rec);
    }
    h.set_training(false);
    g.set_training(false);
    return out;
}

}  // namespace cafe::amr
