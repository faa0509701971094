#include "cafe/cafe_defense.hpp"

#include <cmath>

namespace cafe::defense {

std::string to_string(DefenseKind k) { return k == DefenseKind::Adv ? "adv" : "trades"; }

std::string to_string(CafeTarget t) {
    switch (t) {
        case CafeTarget::Inversion: return "inversion";
        case CafeTarget::Direct: return "direct";
        case CafeTarget::Off: return "off";
    }
    return "off";
}

DefenseKind parse_defense_kind(const std::string& s) {
    if (s == "adv") return DefenseKind::Adv;
    if (s == "trades") return DefenseKind::Trades;
    throw DefenseError("unknown defense kind '" + s + "'");
}

CafeTarget parse_cafe_target(const std::string& s) {
    if (s == "inversion") return CafeTarget::Inversion;
    if (s == "direct") return CafeTarget::Direct;
    if (s == "off") return CafeTarget::Off;
    throw DefenseError("unknown cafe target '" + s + "'");
}

double OptimizerConfig::learning_rate(int iteration, int iterations_per_epoch) const {
    const double total = static_cast<double>(epochs) * iterations_per_epoch;
    if (schedule == "cyclic") {
        const double p = (iteration + 0.5) / total;
        return lr_max * (p < 0.5 ? 2 * p : 2 * (1 - p));
    }
    if (schedule == "step") {
        const double epoch = static_cast<double>(iteration) / iterations_per_epoch;
        if (epoch < 0.5 * epochs) return lr_max;
        if (epoch < 0.75 * epochs) return lr_max * 0.1;
        return lr_max * 0.01;
    }
    throw DefenseError("unknown learning-rate schedule '" + schedule + "'");
}

OptimizerConfig OptimizerConfig::paper_schedule() {
    OptimizerConfig c;
    c.epochs = 120;
    return c;
}

void DefenseConfig::validate() const {
    if (trades_beta < 0) throw DefenseError("trades_beta must be non-negative");
    if (cafe_weight < 0) throw DefenseError("cafe_weight must be non-negative");
    attack.validate();
    if (optim.epochs < 1) throw DefenseError("epochs must be at least 1");
    if (optim.batch_size < 1) throw DefenseError("batch_size must be positive");
    if (!(optim.lr_max > 0)) throw DefenseError("lr_max must be positive");
    if (optim.schedule != "cyclic" && optim.schedule != "step")
        throw DefenseError("unknown learning-rate schedule '" + optim.schedule + "'");
    if (eval_every < 1) throw DefenseError("eval_every must be at least 1");
    if (attack_warmup_epochs < 0) throw DefenseError("attack_warmup_epochs must be non-negative");
}

attack::PerturbationBudget DefenseConfig::attack_for_epoch(int epoch) const {
    if (epoch >= attack_warmup_epochs) return attack;
    const double f = static_cast<double>(epoch + 1) / (attack_warmup_epochs + 1);
    auto b = attack;
    b.eps_max *= f;
    b.step_size *= f;
    return b;
}

Var<float> kl_divergence(const Var<float>& log_p, const Var<float>& log_q) { return ag::mean(ag::kl_rows(log_p, log_q)); }

Var<float> defense_loss(DefenseKind kind, zoo::SplitClassifier<float>& model, const Tensor<float>& x,
                        const Tensor<float>& x_adv, const std::vector<int>& labels, double beta) {
    if (kind == DefenseKind::Adv) return ag::nll(model.forward(Var<float>(x_adv)), labels);
    const Var<float> lp_nat = model.forward(Var<float>(x));
    const Var<float> lp_adv = model.forward(Var<float>(x_adv));
    return ag::add(ag::nll(lp_nat, labels), ag::scale(kl_divergence(lp_nat, lp_adv), static_cast<float>(beta)));
}

Var<float> cafe_regularizer(zoo::SplitClassifier<float>& model, const Tensor<float>& x_causal, const Tensor<float>& x_adv) {
    return kl_divergence(model.forward(Var<float>(x_causal)), model.forward(Var<float>(x_adv)));
}

namespace {

double evaluate_accuracy(zoo::SplitClassifier<float>& model, const data::ImageBatch& eval, const attack::AttackSpec& spec,
                         std::uint64_t seed, double& robust) {
    const auto table = attack::evaluate_robustness(model, eval, {spec}, seed);
    robust = table.attacked.at(spec.kind);
    return table.natural;
}

}  // namespace

DefenseResult train_cafe(zoo::SplitClassifier<float> model, const data::ImageBatch& train, const data::ImageBatch& eval,
                         const DefenseConfig& cfg, const CausalSource& source) {
    cfg.validate();
    if (train.empty()) throw DefenseError("empty training set");
    const bool cafe = cfg.uses_cafe();
    if (cafe && !cfg.refresh_inversions) {
        if (!source.archive) throw DefenseError("CAFE training needs an inversion archive");
        for (auto id : train.ids)
            if (!source.archive->contains(id))
                throw DefenseError("inversion archive does not cover the training set (missing sample id " + std::to_string(id) + ")");
    }
    if (cafe && cfg.refresh_inversions && !source.hypothesis)
        throw DefenseError("refreshing inversions needs the hypothesis model");

    DefenseResult result{std::move(model), {}};
    auto& net = result.model;
    auto params = net.parameters();
    nn::Sgd<float> opt(params, cfg.optim.momentum, cfg.optim.weight_decay);
    const int per_epoch = (train.size() + cfg.optim.batch_size - 1) / cfg.optim.batch_size;
    std::optional<inversion::InversionArchive> refreshed;

    int iteration = 0;
    for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
        if (cafe && cfg.refresh_inversions) {
            refreshed = inversion::build_archive(net, *source.hypothesis, train, {"pgd", cfg.attack},
                                                 source.inversion, derive_seed(cfg.seed, "refresh", static_cast<std::uint64_t>(epoch)));
        }
        const inversion::InversionArchive* archive = refreshed ? &*refreshed : source.archive;

        Rng batch_rng(derive_seed(cfg.seed, "defense-batches", static_cast<std::uint64_t>(epoch)));
        const auto batches = data::minibatches(train.size(), cfg.optim.batch_size, &batch_rng);
        const auto budget = cfg.attack_for_epoch(epoch);
        DefenseEpochRecord rec;
        rec.epoch = epoch;
        double seen = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi, ++iteration) {
            const auto mb = train.gather(batches[bi]);
            Rng attack_rng(derive_seed(cfg.seed, "defense-attack", static_cast<std::uint64_t>(iteration)));
            const Tensor<float> x_adv = attack::pgd(net, mb.images, mb.labels, budget, attack_rng);

            net.set_training(true);
            opt.zero_grad();
            Var<float> loss_def, reg;
            if (cfg.kind == DefenseKind::Adv) {
                const Var<float> lp_adv = net.forward(Var<float>(x_adv));
                loss_def = ag::nll(lp_adv, mb.labels);
                if (cafe) {
                    if (cfg.cafe_target == CafeTarget::Inversion)
                        reg = kl_divergence(net.forward(Var<float>(archive->causal_images(mb.ids))), lp_adv);
                    else
                        reg = kl_divergence(Var<float>(archive->target_log_probs(mb.ids)), lp_adv);
                }
            } else {
                const Var<float> lp_nat = net.forward(Var<float>(mb.images));
                const Var<float> lp_adv = net.forward(Var<float>(x_adv));
                loss_def = ag::add(ag::nll(lp_nat, mb.labels),
                                   ag::scale(kl_divergence(lp_nat, lp_adv), static_cast<float>(cfg.trades_beta)));
                if (cafe) {
                    if (cfg.cafe_target == CafeTarget::Inversion)
                        reg = kl_divergence(net.forward(Var<float>(archive->causal_images(mb.ids))), lp_adv);
                    else
                        reg = kl_divergence(Var<float>(archive->target_log_probs(mb.ids)), lp_adv);
                }
            }
            const Var<float> total = cafe ? ag::add(loss_def, ag::scale(reg, static_cast<float>(cfg.cafe_weight))) : loss_def;
            if (!std::isfinite(total.value()[0]))
                throw DefenseError("training loss became non-finite in epoch " + std::to_string(epoch));
            total.backward();
            rec.learning_rate = cfg.optim.learning_rate(iteration, per_epoch);
            opt.step(rec.learning_rate);
            net.set_training(false);

            const double w = mb.size();
            rec.loss_defense += loss_def.value()[0] * w;
            if (cafe) rec.loss_cafe += reg.value()[0] * w;
            rec.loss_total += total.value()[0] * w;
            seen += w;
        }
        rec.loss_defense /= seen;
        rec.loss_cafe /= seen;
        rec.loss_total /= seen;
        const bool last = epoch + 1 == cfg.optim.epochs;
        if (!eval.empty() && (last || (epoch + 1) % cfg.eval_every == 0)) {
            double robust = 0;
            rec.natural_acc = evaluate_accuracy(net, eval, cfg.eval_attack, derive_seed(cfg.seed, "defense-eval"), robust);
            rec.robust_acc = robust;
        }
        result.trace.push_back(rec);
    }
    net.set_training(false);
    return result;
}

}  // namespace cafe::defense
