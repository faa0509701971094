#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cafe/attack.hpp"
#include "cafe/causal_inversion.hpp"
#include "cafe/data.hpp"
#include "cafe/model_zoo.hpp"

namespace cafe::defense {

using ag::Var;

class DefenseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DefenseKind { Adv, Trades };
enum class CafeTarget { Inversion, Direct, Off };

std::string to_string(DefenseKind k);
std::string to_string(CafeTarget t);
DefenseKind parse_defense_kind(const std::string& s);
CafeTarget parse_cafe_target(const std::string& s);

struct OptimizerConfig {
    double momentum = 0.9;
    double lr_max = 0.1;
    double weight_decay = 5e-4;
    /// "cyclic": linear warm-up to lr_max over the first half of all
    /// iterations, then linear decay to zero. "step": lr_max, divided by 10 at
    /// 50% and again at 75% of the epochs.
    std::string schedule = "cyclic";
    int epochs = 30;
    int batch_size = 128;

    double learning_rate(int iteration, int iterations_per_epoch) const;
    /// The long schedule: 120 epochs of the cyclic schedule.
    static OptimizerConfig paper_schedule();
};

struct DefenseConfig {
    DefenseKind kind = DefenseKind::Adv;
    double trades_beta = 6.0;
    double cafe_weight = 1.0;
    CafeTarget cafe_target = CafeTarget::Inversion;
    attack::PerturbationBudget attack = attack::PerturbationBudget::pgd_train();
    OptimizerConfig optim;
    std::uint64_t seed = 0;
    /// Rebuild the inversions against the current model at every epoch start.
    bool refresh_inversions = false;
    attack::AttackSpec eval_attack = attack::AttackSpec::named("pgd");
    int eval_every = 1;  // epochs; the last epoch is always evaluated
    /// eps and step size ramp linearly from zero over this many epochs.
    int attack_warmup_epochs = 0;

    /// Training attack budget in effect for an epoch.
    attack::PerturbationBudget attack_for_epoch(int epoch) const;

    bool uses_cafe() const { return cafe_weight > 0 && cafe_target != CafeTarget::Off; }
    void validate() const;
};

/// adv:    CE(f(x_adv), y)
/// trades: CE(f(x), y) + beta * mean KL(f(x) || f(x_adv))
Var<float> defense_loss(DefenseKind kind, zoo::SplitClassifier<float>& model, const Tensor<float>& x,
                        const Tensor<float>& x_adv, const std::vector<int>& labels, double beta);

/// mean_i KL(f(x_causal)_i || f(x_adv)_i); gradients reach both terms.
Var<float> cafe_regularizer(zoo::SplitClassifier<float>& model, const Tensor<float>& x_causal, const Tensor<float>& x_adv);
/// Same divergence from already computed row log-probabilities.
Var<float> kl_divergence(const Var<float>& log_p, const Var<float>& log_q);

/// Where the regularizer's causal side comes from.
struct CausalSource {
    const inversion::InversionArchive* archive = nullptr;
    /// Needed only for refresh_inversions.
    zoo::FeatureNet<float>* hypothesis = nullptr;
    inversion::InversionConfig inversion;
};

struct DefenseEpochRecord {
    int epoch = 0;
    double learning_rate = 0;  // at the epoch's last iteration
    double loss_defense = 0;
    double loss_cafe = 0;
    double loss_total = 0;
    std::optional<double> natural_acc;
    std::optional<double> robust_acc;
};

struct DefenseResult {
    zoo::SplitClassifier<float> model;
    std::vector<DefenseEpochRecord> trace;
};

/// Trains `model` in place from its current parameters. Each batch is
/// attacked against the current model (evaluation mode), then the model
/// takes one SGD step on defense_loss + cafe_weight * regularizer.
/// With cafe_weight = 0 or target Off nothing CAFE-related is computed.
DefenseResult train_cafe(zoo::SplitClassifier<float> model, const data::ImageBatch& train, const data::ImageBatch& eval,
                         const DefenseConfig& cfg, const CausalSource& source = {});

}  // namespace cafe::defense
