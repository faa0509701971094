#include "cafe/attack.hpp"

#include <cmath>
#include <limits>

namespace cafe::attack {

using ag::Var;

void PerturbationBudget::validate() const {
    if (!(eps_max >= 0.0 && eps_max < 1.0)) throw AttackError("eps_max must lie in [0, 1), got " + std::to_string(eps_max));
    if (steps < 1) throw AttackError("steps must be at least 1");
    // a zero radius admits a zero step: the attack is then the identity
    if (!(step_size > 0.0 || (eps_max == 0.0 && step_size == 0.0))) throw AttackError("step_size must be positive");
}

double parse_eps(const std::string& text) {
    const auto slash = text.find('/');
    try {
        if (slash == std::string::npos) return std::stod(text);
        return std::stod(text.substr(0, slash)) / std::stod(text.substr(slash + 1));
    } catch (const std::exception&) {
        throw AttackError("cannot parse epsilon '" + text + "'");
    }
}

Box feasible_box(float x, double eps) {
    const double lo_d = std::max(static_cast<double>(x) - eps, 0.0);
    const double hi_d = std::min(static_cast<double>(x) + eps, 1.0);
    float lo = static_cast<float>(lo_d), hi = static_cast<float>(hi_d);
    if (static_cast<double>(lo) < lo_d) lo = std::nextafter(lo, 2.0f);
    if (static_cast<double>(hi) > hi_d) hi = std::nextafter(hi, -1.0f);
    return {lo, hi};
}

long count_violations(const Tensor<float>& x, const Tensor<float>& x_adv, double eps) {
    require_same_shape(x, x_adv, "count_violations");
    long bad = 0;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const double a = x_adv[i], o = x[i];
        if (!(a >= 0.0 && a <= 1.0) || std::abs(a - o) > eps) ++bad;
    }
    return bad;
}

namespace {

enum class Objective { CrossEntropy, Margin };

// d/dx of the summed per-sample objective; parameters receive nothing.
Tensor<float> input_gradient(zoo::SplitClassifier<float>& model, const Tensor<float>& x, const std::vector<int>& labels,
                             Objective objective, double kappa) {
    nn::FreezeGuard<float> freeze(model.parameters());
    Var<float> xv(x, true);
    Var<float> lp = model.forward(xv);
    Var<float> loss;
    if (objective == Objective::CrossEntropy) {
        loss = ag::scale(ag::sum(ag::pick(lp, labels)), -1.0f);
    } else {
        // Log-probabilities differ from logits by a per-row constant, so the margin is the same.
        Var<float> margin = ag::sub(ag::pick(lp, labels), ag::max_other(lp, labels));
        loss = ag::sum(ag::clamp_min(margin, static_cast<float>(-kappa)));
    }
    loss.backward();
    Tensor<float> g = xv.grad();
    const auto rs = g.row_size();
    for (int i = 0; i < g.dim(0); ++i)
        for (std::int64_t k = 0; k < rs; ++k)
            if (!std::isfinite(g[i * rs + k])) throw AttackError("non-finite input gradient for sample index " + std::to_string(i));
    return g;
}

void check_inputs(const Tensor<float>& x, const std::vector<int>& labels) {
    if (x.rank() != 4) throw ShapeError("attack input must be N x C x H x W");
    if (static_cast<int>(labels.size()) != x.dim(0)) throw AttackError("attack needs one label per sample");
}

// One signed step (direction +1 ascends, -1 descends) followed by projection.
void signed_step(Tensor<float>& cur, const Tensor<float>& g, const Tensor<float>& x0, double step, double eps, int direction) {
    for (std::int64_t i = 0; i < cur.size(); ++i) {
        const float s = g[i] > 0 ? 1.0f : (g[i] < 0 ? -1.0f : 0.0f);
        const float moved = static_cast<float>(cur[i] + direction * step * s);
        const Box b = feasible_box(x0[i], eps);
        cur[i] = std::clamp(moved, b.lo, b.hi);
    }
}

}  // namespace

Tensor<float> fgsm(zoo::SplitClassifier<float>& model, const Tensor<float>& x, const std::vector<int>& labels,
                   const PerturbationBudget& budget) {
    budget.validate();
    check_inputs(x, labels);
    zoo::ModeGuard mode(model, false);
    const Tensor<float> g = input_gradient(model, x, labels, Objective::CrossEntropy, 0);
    Tensor<float> out = x;
    signed_step(out, g, x, budget.eps_max, budget.eps_max, +1);
    return out;
}

Tensor<float> pgd(zoo::SplitClassifier<float>& model, const Tensor<float>& x, const std::vector<int>& labels,
                  const PerturbationBudget& budget, Rng& rng) {
    budget.validate();
    check_inputs(x, labels);
    zoo::ModeGuard mode(model, false);
    Tensor<float> cur = x;
    if (budget.random_start) {
        for (std::int64_t i = 0; i < cur.size(); ++i) {
            const Box b = feasible_box(x[i], budget.eps_max);
            const float v = static_cast<float>(x[i] + rng.uniform(-budget.eps_max, budget.eps_max));
            cur[i] = std::clamp(v, b.lo, b.hi);
        }
    }
    for (int s = 0; s < budget.steps; ++s) {
        const Tensor<float> g = input_gradient(model, cur, labels, Objective::CrossEntropy, 0);
        signed_step(cur, g, x, budget.step_size, budget.eps_max, +1);
    }
    return cur;
}

Tensor<float> cw_linf(zoo::SplitClassifier<float>& model, const Tensor<float>& x, const std::vector<int>& labels,
                      double eps, double kappa, int iters) {
    if (kappa < 0) throw AttackError("kappa must be non-negative");
    PerturbationBudget{eps, iters, eps > 0 ? eps / 10 : 1.0, false}.validate();
    check_inputs(x, labels);
    zoo::ModeGuard mode(model, false);
    Tensor<float> cur = x;
    for (int s = 0; s < iters; ++s) {
        const Tensor<float> g = input_gradient(model, cur, labels, Objective::Margin, kappa);
        signed_step(cur, g, x, eps / 10, eps, -1);
    }
    return cur;
}

AttackSpec AttackSpec::named(const std::string& kind, double eps) {
    if (kind == "fgsm") return {kind, PerturbationBudget::fgsm(eps)};
    if (kind == "pgd") return {kind, PerturbationBudget::pgd_eval(eps)};
    if (kind == "pgd-train") return {"pgd", PerturbationBudget::pgd_train(eps)};
    if (kind == "cw") return {kind, {eps, 100, eps / 10, false}, 0.0, 100};
    throw AttackError("unknown attack '" + kind + "'");
}

Tensor<float> run_attack(zoo::SplitClassifier<float>& model, const Tensor<float>& x, const std::vector<int>& labels,
                         const AttackSpec& spec, Rng& rng) {
    if (spec.kind == "fgsm") return fgsm(model, x, labels, spec.budget);
    if (spec.kind == "pgd") return pgd(model, x, labels, spec.budget, rng);
    if (spec.kind == "cw") return cw_linf(model, x, labels, spec.budget.eps_max, spec.kappa, spec.iters);
    throw AttackError("unknown attack '" + spec.kind + "'");
}

std::vector<int> predict(zoo::SplitClassifier<float>& model, const Tensor<float>& x, int chunk) {
    zoo::ModeGuard mode(model, false);
    ag::NoGradGuard ng;
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(x.dim(0)));
    for (int b = 0; b < x.dim(0); b += chunk) {
        const int e = std::min(x.dim(0), b + chunk);
        const Var<float> lp = model.forward(Var<float>(x.slice_rows(b, e)));
        const int k = lp.shape()[1];
        for (int i = 0; i < e - b; ++i) {
            const float* r = lp.value().data() + static_cast<std::int64_t>(i) * k;
            out.push_back(static_cast<int>(std::max_element(r, r + k) - r));
        }
    }
    return out;
}

double accuracy_percent(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.empty()) throw AttackError("accuracy of an empty prediction set");
    if (predictions.size() != labels.size()) throw AttackError("prediction and label counts differ");
    long hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
    return 100.0 * static_cast<double>(hit) / static_cast<double>(labels.size());
}

Tensor<float> attack_dataset(zoo::SplitClassifier<float>& model, const data::ImageBatch& dataset, const AttackSpec& spec,
                             std::uint64_t seed, int chunk) {
    if (dataset.empty()) throw AttackError("cannot attack an empty dataset");
    std::vector<Tensor<float>> parts;
    for (int b = 0, c = 0; b < dataset.size(); b += chunk, ++c) {
        const int e = std::min(dataset.size(), b + chunk);
        Rng rng(derive_seed(seed, spec.kind, static_cast<std::uint64_t>(c)));
        const std::vector<int> labels(dataset.labels.begin() + b, dataset.labels.begin() + e);
        parts.push_back(run_attack(model, dataset.images.slice_rows(b, e), labels, spec, rng));
    }
    return concat_rows(parts);
}

RobustnessTable evaluate_robustness(zoo::SplitClassifier<float>& model, const data::ImageBatch& dataset,
                                    const std::vector<AttackSpec>& attacks, std::uint64_t seed, int chunk) {
    if (dataset.empty()) throw AttackError("cannot evaluate on an empty dataset");
    RobustnessTable t;
    t.natural = accuracy_percent(predict(model, dataset.images), dataset.labels);
    for (const auto& spec : attacks) {
        const Tensor<float> adv = attack_dataset(model, dataset, spec, seed, chunk);
        t.violations += count_violations(dataset.images, adv, spec.budget.eps_max);
        t.attacked[spec.kind] = accuracy_percent(predict(model, adv), dataset.labels);
    }
    return t;
}

}  // namespace cafe::attack
