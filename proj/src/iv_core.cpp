#include "cafe/iv_core.hpp"

#include <cmath>

namespace cafe::iv {

ScalarIVDataset simulate_linear_dgp(const DgpParams& p, int n, std::uint64_t seed) {
    if (n < 2) throw IVError("need at least two samples");
    if (!(p.sigma > 0)) throw IVError("noise scale must be positive");
    ScalarIVDataset ds;
    ds.params = p;
    ds.seed = seed;
    ds.z.resize(static_cast<std::size_t>(n));
    ds.t.resize(ds.z.size());
    ds.y.resize(ds.z.size());
    ds.u.resize(ds.z.size());
    Rng rng(derive_seed(seed, "linear-dgp"));
    for (std::size_t i = 0; i < ds.z.size(); ++i) {
        const double u = rng.normal(), z = rng.normal(), nt = rng.normal(0, p.sigma), ny = rng.normal(0, p.sigma);
        const double t = p.alpha * z + p.beta * u + nt;
        ds.u[i] = u;
        ds.z[i] = z;
        ds.t[i] = t;
        ds.y[i] = p.theta * t + p.gamma * u + ny;
    }
    return ds;
}

namespace {

double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double cov(const std::vector<double>& a, const std::vector<double>& b) {
    const double ma = mean_of(a), mb = mean_of(b);
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - ma) * (b[i] - mb);
    return s / static_cast<double>(a.size() - 1);
}

Tensor<double> column(const std::vector<double>& v) { return Tensor<double>({static_cast<int>(v.size()), 1}, v); }

}  // namespace

double ols_fit(const ScalarIVDataset& ds) {
    const double vt = cov(ds.t, ds.t);
    if (vt <= 0) throw IVError("degenerate treatment variance");
    return cov(ds.t, ds.y) / vt;
}

double twosls_fit(const ScalarIVDataset& ds) {
    const double czt = cov(ds.z, ds.t);
    if (std::abs(czt) < 1e-12) throw IVError("weak instrument: Cov(z, t) is zero");
    return cov(ds.z, ds.y) / czt;
}

std::string to_string(FunctionClass c) { return c == FunctionClass::Linear ? "linear" : "mlp"; }

FunctionClass parse_function_class(const std::string& s) {
    if (s == "linear") return FunctionClass::Linear;
    if (s == "mlp") return FunctionClass::Mlp;
    throw IVError("unknown function class '" + s + "'");
}

std::vector<std::string> registered_function_classes() { return {"linear", "mlp"}; }

ScalarFunction::ScalarFunction(FunctionClass cls, std::uint64_t seed, int hidden) : cls_(cls) {
    if (cls_ == FunctionClass::Linear) {
        params_.emplace_back(Tensor<double>({1, 1}), true);
        params_.emplace_back(Tensor<double>({1}), true);
        return;
    }
    Rng rng(derive_seed(seed, "scalar-mlp-init"));
    auto uniform = [&](Shape s) {
        Tensor<double> t(std::move(s));
        for (auto& v : t.storage()) v = rng.uniform(-0.3, 0.3);
        return Var<double>(std::move(t), true);
    };
    params_.push_back(uniform({hidden, 1}));
    params_.push_back(uniform({hidden}));
    params_.push_back(uniform({1, hidden}));
    params_.push_back(uniform({1}));
}

Var<double> ScalarFunction::forward(const Var<double>& x) const {
    if (cls_ == FunctionClass::Linear) return ag::dense(x, params_[0], params_[1]);
    return ag::dense(ag::relu(ag::dense(x, params_[0], params_[1])), params_[2], params_[3]);
}

double ScalarFunction::operator()(double x) const {
    ag::NoGradGuard ng;
    return forward(Var<double>(Tensor<double>({1, 1}, x))).value()[0];
}

double ScalarFunction::slope() const {
    if (cls_ != FunctionClass::Linear) throw IVError("slope is defined for the linear class only");
    return params_[0].value()[0];
}

double ScalarFunction::intercept() const {
    if (cls_ != FunctionClass::Linear) throw IVError("intercept is defined for the linear class only");
    return params_[1].value()[0];
}

ScalarBatch as_batch(const ScalarIVDataset& ds) {
    return {Var<double>(column(ds.z)), Var<double>(column(ds.t)), Var<double>(column(ds.y))};
}

Var<double> moment_term(const ScalarFunction& h, const ScalarFunction& g, const ScalarBatch& b) {
    return ag::mean(ag::mul(ag::sub(b.y, h.forward(b.t)), g.forward(b.z)));
}

Var<double> minimax_objective(const ScalarFunction& h, const ScalarFunction& g, const ScalarBatch& b, double lambda) {
    const Var<double> gz = g.forward(b.z);
    const Var<double> m = ag::mean(ag::mul(ag::sub(b.y, h.forward(b.t)), gz));
    return ag::sub(m, ag::scale(ag::mean(ag::mul(gz, gz)), lambda));
}

MomentEstimate moment_value(const ScalarFunction& h, const ScalarFunction& g, const ScalarIVDataset& ds) {
    if (ds.size() == 0) throw IVError("empty batch");
    ag::NoGradGuard ng;
    const ScalarBatch b = as_batch(ds);
    const Var<double> r = ag::sub(b.y, h.forward(b.t));
    const Var<double> gz = g.forward(b.z);
    MomentEstimate m;
    m.batch_size = ds.size();
    m.per_sample_residuals = r.value().storage();
    m.weights = gz.value().storage();
    double s = 0, s2 = 0;
    for (int i = 0; i < m.batch_size; ++i) {
        s += m.per_sample_residuals[static_cast<std::size_t>(i)] * m.weights[static_cast<std::size_t>(i)];
        s2 += m.weights[static_cast<std::size_t>(i)] * m.weights[static_cast<std::size_t>(i)];
    }
    m.value = s / m.batch_size;
    m.regularizer = s2 / m.batch_size;
    if (!std::isfinite(m.value)) throw IVError("non-finite moment value");
    return m;
}

GmmFit gmm_minimax_fit(const ScalarIVDataset& ds, FunctionClass h_class, FunctionClass g_class, const GmmConfig& cfg) {
    if (cfg.steps < 1) throw IVError("steps must be positive");
    if (cfg.lambda < 0) throw IVError("lambda must be non-negative");
    GmmFit fit{ScalarFunction(h_class, derive_seed(cfg.seed, "h"), cfg.hidden),
               ScalarFunction(g_class, derive_seed(cfg.seed, "g"), cfg.hidden), {}};
    const ScalarBatch b = as_batch(ds);
    auto hp = fit.h.parameters();
    auto gp = fit.g.parameters();
    auto step = [&](std::vector<Var<double>>& params, double signed_lr) {
        for (auto& p : params) {
            auto& w = p.mutable_value();
            const auto& gr = p.grad();
            for (std::int64_t i = 0; i < w.size(); ++i) w[i] += signed_lr * gr[i];
        }
    };
    for (int s = 0; s < cfg.steps; ++s) {
        if (!cfg.freeze_g) {
            for (auto& p : gp) p.zero_grad();
            // h is held fixed during the g step.
            for (auto& p : hp) p.set_requires_grad(false);
            minimax_objective(fit.h, fit.g, b, cfg.lambda).backward();
            for (auto& p : hp) p.set_requires_grad(true);
            step(gp, +cfg.learning_rate);
        }
        for (auto& p : hp) p.zero_grad();
        for (auto& p : gp) p.set_requires_grad(false);
        const Var<double> obj = minimax_objective(fit.h, fit.g, b, cfg.lambda);
        obj.backward();
        for (auto& p : gp) p.set_requires_grad(true);
        step(hp, -cfg.learning_rate);

        const bool record = cfg.trace_every > 0 && (s % cfg.trace_every == 0 || s + 1 == cfg.steps);
        double moment = 0;
        {
            ag::NoGradGuard ng;
            moment = moment_term(fit.h, fit.g, b).value()[0];
        }
        if (!std::isfinite(moment) || std::abs(moment) > 1e6)
            throw DivergenceError("minimax fit diverged at step " + std::to_string(s) + " (moment " + std::to_string(moment) + ")");
        if (record) fit.trace.push_back({s, moment, obj.value()[0]});
    }
    return fit;
}

}  // namespace cafe::iv
