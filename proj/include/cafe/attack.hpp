#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cafe/data.hpp"
#include "cafe/model_zoo.hpp"

namespace cafe::attack {

class AttackError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr double kDefaultEps = 8.0 / 255.0;

/// L-infinity budget in pixel units of the [0,1] range.
struct PerturbationBudget {
    double eps_max = kDefaultEps;
    int steps = 1;
    double step_size = kDefaultEps;
    bool random_start = false;

    /// Throws AttackError unless 0 <= eps_max < 1, steps >= 1, step_size > 0
    /// (step_size may be 0 when eps_max is 0).
    void validate() const;

    static PerturbationBudget fgsm(double eps = kDefaultEps) { return {eps, 1, eps, false}; }
    /// 30 steps of 0.0023 with a random start.
    static PerturbationBudget pgd_eval(double eps = kDefaultEps) { return {eps, 30, 0.0023, true}; }
    /// 10 steps of 0.0072 with a random start.
    static PerturbationBudget pgd_train(double eps = kDefaultEps) { return {eps, 10, 0.0072, true}; }
};

/// Parses "8/255" or a decimal.
double parse_eps(const std::string& text);

/// Per-pixel interval [max(x - eps, 0), min(x + eps, 1)] in float, tightened
/// with nextafter so every member is within eps of x when compared in double.
struct Box {
    float lo, hi;
};
Box feasible_box(float x, double eps);

/// Elementwise count of pixels outside [0,1] or further than eps from x
/// (compared in double). Zero is the contract of every attack.
long count_violations(const Tensor<float>& x, const Tensor<float>& x_adv, double eps);

/// The model is run in evaluation mode and its parameters receive no gradient.
Tensor<float> fgsm(zoo::SplitClassifier<float>& model, const Tensor<float>& x, const std::vector<int>& labels,
                   const PerturbationBudget& budget);
Tensor<float> pgd(zoo::SplitClassifier<float>& model, const Tensor<float>& x, const std::vector<int>& labels,
                  const PerturbationBudget& budget, Rng& rng);
/// Signed-gradient descent on the margin max(z_y - max_{k != y} z_k, -kappa),
/// step eps/10, projected after every step. Starts at x.
Tensor<float> cw_linf(zoo::SplitClassifier<float>& model, const Tensor<float>& x, const std::vector<int>& labels,
                      double eps, double kappa = 0.0, int iters = 100);

struct AttackSpec {
    std::string kind;  // fgsm | pgd | cw
    PerturbationBudget budget;
    double kappa = 0.0;
    int iters = 100;

    static AttackSpec named(const std::string& kind, double eps = kDefaultEps);
};

/// Dispatch on spec.kind; `rng` feeds random starts.
Tensor<float> run_attack(zoo::SplitClassifier<float>& model, const Tensor<float>& x, const std::vector<int>& labels,
                         const AttackSpec& spec, Rng& rng);

/// Row predictions (argmax) of the full model in evaluation mode.
std::vector<int> predict(zoo::SplitClassifier<float>& model, const Tensor<float>& x, int chunk = 256);
double accuracy_percent(const std::vector<int>& predictions, const std::vector<int>& labels);

struct RobustnessTable {
    double natural = 0;
    std::map<std::string, double> attacked;  // percent accuracy per attack kind
    long violations = 0;                     // summed over every attack output
};

/// Attacks the dataset in chunks; chunk c draws random starts from
/// derive_seed(seed, kind, c), so results do not depend on chunking order.
RobustnessTable evaluate_robustness(zoo::SplitClassifier<float>& model, const data::ImageBatch& dataset,
                                    const std::vector<AttackSpec>& attacks, std::uint64_t seed, int chunk = 256);

/// Attack a whole dataset chunkwise with the same seeding as evaluate_robustness.
Tensor<float> attack_dataset(zoo::SplitClassifier<float>& model, const data::ImageBatch& dataset, const AttackSpec& spec,
                             std::uint64_t seed, int chunk = 256);

}  // namespace cafe::attack
