#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cafe/autograd.hpp"
#include "cafe/random.hpp"

namespace cafe::iv {

using ag::Var;

class IVError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DivergenceError : public IVError {
public:
    using IVError::IVError;
};

/// u, z ~ N(0,1) independent;
/// t = alpha z + beta u + nu_t,  y = theta t + gamma u + nu_y,  nu ~ N(0, sigma^2).
struct DgpParams {
    double alpha = 1.0;
    double beta = 1.0;
    double theta = 1.0;
    double gamma = 1.0;
    double sigma = 0.1;
};

struct ScalarIVDataset {
    std::vector<double> z, t, y;
    std::vector<double> u;  // hidden confounder, diagnostics only
    DgpParams params;
    std::uint64_t seed = 0;

    int size() const { return static_cast<int>(z.size()); }
};

ScalarIVDataset simulate_linear_dgp(const DgpParams& params, int n, std::uint64_t seed);

/// Cov(t, y) / Var(t).
double ols_fit(const ScalarIVDataset& ds);
/// Cov(z, y) / Cov(z, t); throws IVError ("weak instrument") when Cov(z, t) vanishes.
double twosls_fit(const ScalarIVDataset& ds);

/// Aggregate moment violation with its per-sample pieces.
struct MomentEstimate {
    double value = 0;
    std::vector<double> per_sample_residuals;
    std::vector<double> weights;  // test-function values per sample
    double regularizer = 0;
    int batch_size = 0;
};

enum class FunctionClass { Linear, Mlp };
std::string to_string(FunctionClass c);
FunctionClass parse_function_class(const std::string& s);
std::vector<std::string> registered_function_classes();

/// Parametric scalar map R -> R. Linear: a x + b, zero-initialised.
/// Mlp: one hidden ReLU layer, small uniform initialisation.
class ScalarFunction {
public:
    explicit ScalarFunction(FunctionClass cls = FunctionClass::Linear, std::uint64_t seed = 0, int hidden = 16);

    FunctionClass function_class() const { return cls_; }
    /// x is [n, 1]; returns [n, 1].
    Var<double> forward(const Var<double>& x) const;
    double operator()(double x) const;
    std::vector<Var<double>> parameters() const { return params_; }

    /// Linear class only.
    double slope() const;
    double intercept() const;

private:
    FunctionClass cls_;
    std::vector<Var<double>> params_;
};

/// Column views of a dataset as [n, 1] tensors.
struct ScalarBatch {
    Var<double> z, t, y;
};
ScalarBatch as_batch(const ScalarIVDataset& ds);

/// E[(y - h(t)) g(z)]: the moment term alone.
Var<double> moment_term(const ScalarFunction& h, const ScalarFunction& g, const ScalarBatch& b);
/// E[(y - h(t)) g(z)] - lambda E[g(z)^2]: g ascends it, h descends it.
Var<double> minimax_objective(const ScalarFunction& h, const ScalarFunction& g, const ScalarBatch& b, double lambda);

MomentEstimate moment_value(const ScalarFunction& h, const ScalarFunction& g, const ScalarIVDataset& ds);

struct GmmConfig {
    double lambda = 1.0;
    int steps = 2000;
    double learning_rate = 0.01;
    std::uint64_t seed = 0;
    int hidden = 16;
    bool freeze_g = false;  // g stays at initialisation
    int trace_every = 100;
};

struct GmmTracePoint {
    int step = 0;
    double moment = 0;
    double objective = 0;
};

struct GmmFit {
    ScalarFunction h, g;
    std::vector<GmmTracePoint> trace;
};

/// Alternating full-batch gradient steps: one ascent step on g, then one
/// descent step on h, `steps` times. Throws DivergenceError once |moment| > 1e6.
GmmFit gmm_minimax_fit(const ScalarIVDataset& ds, FunctionClass h_class, FunctionClass g_class, const GmmConfig& cfg);

}  // namespace cafe::iv
