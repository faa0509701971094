#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cafe/attack.hpp"
#include "cafe/data.hpp"
#include "cafe/iv_core.hpp"
#include "cafe/model_zoo.hpp"

namespace cafe::amr {

using ag::Var;
using zoo::FeatureNet;
using zoo::SplitClassifier;

class AmrError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class AmrDivergenceError : public AmrError {
public:
    using AmrError::AmrError;
};

/// How the test-function weight enters the moment.
///   RoleConsistent: w = -log p_true(head(f_nat + g(z))) >= 0, so g maximising
///                   the moment drives counterfactuals away from the label.
///   PaperLiteral:   w = +log p_true(...) <= 0, the formula read verbatim.
enum class SignConvention { RoleConsistent, PaperLiteral };
std::string to_string(SignConvention s);
SignConvention parse_sign_convention(const std::string& s);

/// Split-layer features of a natural batch and its attacked copy, with the
/// instrument z = f_adv - f_nat.
template <class T>
struct AmrBatch {
    Tensor<T> f_nat;
    Tensor<T> f_adv;
    Tensor<T> z;
    std::vector<int> labels;
};

template <class T>
AmrBatch<T> compute_instrument(SplitClassifier<T>& model, const Tensor<T>& x, const Tensor<T>& x_adv,
                               const std::vector<int>& labels) {
    if (x.shape() != x_adv.shape()) throw ShapeError("compute_instrument: natural and adversarial batches differ in shape");
    if (static_cast<int>(labels.size()) != x.dim(0)) throw ShapeError("compute_instrument: one label per sample required");
    zoo::ModeGuard mode(model, false);
    ag::NoGradGuard ng;
    AmrBatch<T> b;
    b.f_nat = model.features(Var<T>(x)).value();
    b.f_adv = model.features(Var<T>(x_adv)).value();
    b.z = b.f_adv;
    for (std::int64_t i = 0; i < b.z.size(); ++i) b.z[i] -= b.f_nat[i];
    b.labels = labels;
    return b;
}

/// log head(f_nat + edit); every entry is <= 0.
template <class T>
Var<T> log_likelihood_project(SplitClassifier<T>& model, const Var<T>& f_nat, const Var<T>& edit) {
    Var<T> lp = model.head(ag::add(f_nat, edit));
    for (T v : lp.value().storage())
        if (!std::isfinite(v)) throw AmrError("non-finite log-likelihood projection");
    return lp;
}

/// psi_i = -log p_true(head(f_nat + h(t'_i))) >= 0.
template <class T>
Var<T> amr_residual(SplitClassifier<T>& model, FeatureNet<T>& h, const Var<T>& f_nat, const Var<T>& t_prime,
                    const std::vector<int>& labels) {
    return ag::scale(ag::pick(log_likelihood_project(model, f_nat, h.forward(t_prime)), labels), T(-1));
}

/// Differentiable pieces of the game on one batch.
template <class T>
struct MomentTerms {
    Var<T> residuals;    // psi per sample
    Var<T> weights;      // test-function weight per sample
    Var<T> value;        // mean(psi * w)
    Var<T> regularizer;  // || batch mean (z - g(z)) ||^2
    Var<T> objective;    // value - lambda * regularizer
};

template <class T>
MomentTerms<T> amr_terms(SplitClassifier<T>& model, FeatureNet<T>& h, FeatureNet<T>& g, const AmrBatch<T>& batch,
                         double lambda, SignConvention sign) {
    const Var<T> f_nat(batch.f_nat);
    const Var<T> z(batch.z);
    const Var<T> gz = g.forward(z);
    MomentTerms<T> m;
    m.residuals = amr_residual(model, h, f_nat, gz, batch.labels);
    const Var<T> log_p_cf = ag::pick(log_likelihood_project(model, f_nat, gz), batch.labels);
    m.weights = sign == SignConvention::RoleConsistent ? ag::scale(log_p_cf, T(-1)) : log_p_cf;
    m.value = ag::mean(ag::mul(m.residuals, m.weights));
    m.regularizer = ag::sum_squares(ag::batch_mean(ag::sub(z, gz)));
    m.objective = ag::sub(m.value, ag::scale(m.regularizer, static_cast<T>(lambda)));
    return m;
}

/// Values only, h and g in their current modes, no gradient recorded.
template <class T>
iv::MomentEstimate amr_moment(SplitClassifier<T>& model, FeatureNet<T>& h, FeatureNet<T>& g, const AmrBatch<T>& batch,
                              SignConvention sign = SignConvention::RoleConsistent) {
    ag::NoGradGuard ng;
    const auto m = amr_terms(model, h, g, batch, 0.0, sign);
    iv::MomentEstimate e;
    e.value = m.value.value()[0];
    e.regularizer = m.regularizer.value()[0];
    e.batch_size = static_cast<int>(batch.labels.size());
    e.per_sample_residuals.assign(m.residuals.value().storage().begin(), m.residuals.value().storage().end());
    e.weights.assign(m.weights.value().storage().begin(), m.weights.value().storage().end());
    if (!std::isfinite(e.value)) throw AmrError("non-finite moment");
    return e;
}

struct AmrFitConfig {
    attack::PerturbationBudget attack = attack::PerturbationBudget::pgd_train();
    double lr_h = 1e-3;
    double lr_g = 1e-3;
    double lambda_reg = 1.0;
    int g_steps = 1;  // per alternation
    int h_steps = 1;
    int epochs = 20;
    int batch_size = 128;
    std::uint64_t seed = 0;
    SignConvention sign = SignConvention::RoleConsistent;
    zoo::FeatureNetKind net_kind = zoo::FeatureNetKind::Cnn;

    void validate() const;
};

/// Per-epoch averages over the epoch's batches; accuracies in percent.
struct AmrEpochRecord {
    int epoch = 0;
    double moment = 0;
    double regularizer = 0;
    double acc_adv = 0;
    double acc_cf = 0;
    double acc_cc = 0;
    double acc_ac = 0;
};

struct AmrFitResult {
    FeatureNet<float> h;
    FeatureNet<float> g;
    std::vector<AmrEpochRecord> trace;
    std::vector<std::string> warnings;
};

/// Alternating fit on a frozen classifier. Each batch is attacked afresh with
/// cfg.attack; then g takes g_steps RMSprop ascent steps on
/// (moment - lambda * regularizer) and h takes h_steps descent steps on the
/// moment. Throws AmrDivergenceError when the moment exceeds 1e6 or turns
/// non-finite.
AmrFitResult fit_amr_gmm(SplitClassifier<float>& model, const data::ImageBatch& train, const AmrFitConfig& cfg);

}  // namespace cafe::amr
