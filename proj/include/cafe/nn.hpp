#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cafe/autograd.hpp"
#include "cafe/random.hpp"

namespace cafe::nn {

using ag::Var;

template <class T>
using ParamVisitor = std::function<void(const std::string&, Var<T>&)>;
template <class T>
using BufferVisitor = std::function<void(const std::string&, Tensor<T>&)>;

/// Named tensors in double precision; the interchange form for checkpoints
/// and for copying parameters between precisions.
using StateDict = std::map<std::string, Tensor<double>>;

template <class T>
class Module {
public:
    virtual ~Module() = default;
    virtual Var<T> forward(const Var<T>& x) = 0;
    virtual std::unique_ptr<Module> clone() const = 0;
    virtual void visit_parameters(const std::string&, const ParamVisitor<T>&) {}
    virtual void visit_buffers(const std::string&, const BufferVisitor<T>&) {}
    virtual void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }

protected:
    bool training_ = false;
};

namespace detail {
template <class T>
Var<T> copy_param(const Var<T>& v) {
    return Var<T>(v.value(), v.requires_grad());
}

template <class T>
void kaiming_uniform(Tensor<T>& w, int fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / fan_in);
    for (auto& v : w.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
}
}  // namespace detail

template <class T>
class Conv2d final : public Module<T> {
public:
    Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng, bool bias = true)
        : stride_(stride), pad_(pad) {
        Tensor<T> w({out, in, kernel, kernel});
        detail::kaiming_uniform(w, in * kernel * kernel, rng);
        weight_ = Var<T>(std::move(w), true);
        if (bias) bias_ = Var<T>(Tensor<T>({out}), true);
    }
    Var<T> forward(const Var<T>& x) override { return ag::conv2d(x, weight_, bias_, stride_, pad_); }
    std::unique_ptr<Module<T>> clone() const override {
        auto c = std::unique_ptr<Conv2d>(new Conv2d(*this));
        c->weight_ = detail::copy_param(weight_);
        if (bias_.defined()) c->bias_ = detail::copy_param(bias_);
        return c;
    }
    void visit_parameters(const std::string& prefix, const ParamVisitor<T>& fn) override {
        fn(prefix + "weight", weight_);
        if (bias_.defined()) fn(prefix + "bias", bias_);
    }
    Var<T>& weight() { return weight_; }
    Var<T>& bias() { return bias_; }

private:
    Conv2d(const Conv2d&) = default;
    Var<T> weight_, bias_;
    int stride_, pad_;
};

template <class T>
class BatchNorm2d final : public Module<T> {
public:
    explicit BatchNorm2d(int channels, T momentum = T(0.1), T eps = T(1e-5))
        : gamma_(Tensor<T>({channels}, T(1)), true),
          beta_(Tensor<T>({channels}), true),
          running_mean_({channels}),
          running_var_({channels}, T(1)),
          momentum_(momentum),
          eps_(eps) {}
    Var<T> forward(const Var<T>& x) override {
        return ag::batch_norm(x, gamma_, beta_, running_mean_, running_var_, this->training_, momentum_, eps_);
    }
    std::unique_ptr<Module<T>> clone() const override {
        auto c = std::unique_ptr<BatchNorm2d>(new BatchNorm2d(*this));
        c->gamma_ = detail::copy_param(gamma_);
        c->beta_ = detail::copy_param(beta_);
        return c;
    }
    void visit_parameters(const std::string& prefix, const ParamVisitor<T>& fn) override {
        fn(prefix + "gamma", gamma_);
        fn(prefix + "beta", beta_);
    }
    void visit_buffers(const std::string& prefix, const BufferVisitor<T>& fn) override {
        fn(prefix + "running_mean", running_mean_);
        fn(prefix + "running_var", running_var_);
    }

private:
    BatchNorm2d(const BatchNorm2d&) = default;
    Var<T> gamma_, beta_;
    Tensor<T> running_mean_, running_var_;
    T momentum_, eps_;
};

template <class T>
class Dense final : public Module<T> {
public:
    Dense(int in, int out, Rng& rng) {
        Tensor<T> w({out, in});
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        for (auto& v : w.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
        weight_ = Var<T>(std::move(w), true);
        bias_ = Var<T>(Tensor<T>({out}), true);
    }
    Var<T> forward(const Var<T>& x) override {
        const int n = x.shape()[0];
        const auto flat = x.shape().size() == 2 ? x : ag::reshape(x, {n, static_cast<int>(x.value().row_size())});
        return ag::dense(flat, weight_, bias_);
    }
    std::unique_ptr<Module<T>> clone() const override {
        auto c = std::unique_ptr<Dense>(new Dense(*this));
        c->weight_ = detail::copy_param(weight_);
        c->bias_ = detail::copy_param(bias_);
        return c;
    }
    void visit_parameters(const std::string& prefix, const ParamVisitor<T>& fn) override {
        fn(prefix + "weight", weight_);
        fn(prefix + "bias", bias_);
    }

private:
    Dense(const Dense&) = default;
    Var<T> weight_, bias_;
};

template <class T>
class ReLU final : public Module<T> {
public:
    Var<T> forward(const Var<T>& x) override { return ag::relu(x); }
    std::unique_ptr<Module<T>> clone() const override { return std::make_unique<ReLU>(); }
};

template <class T>
class GlobalAvgPool final : public Module<T> {
public:
    Var<T> forward(const Var<T>& x) override { return ag::global_avg_pool(x); }
    std::unique_ptr<Module<T>> clone() const override { return std::make_unique<GlobalAvgPool>(); }
};

template <class T>
class LogSoftmax final : public Module<T> {
public:
    Var<T> forward(const Var<T>& x) override { return ag::log_softmax(x); }
    std::unique_ptr<Module<T>> clone() const override { return std::make_unique<LogSoftmax>(); }
};

template <class T>
class Sequential final : public Module<T> {
public:
    Sequential() = default;
    Sequential(const Sequential& other) : Module<T>(other) {
        for (const auto& [name, m] : other.layers_) layers_.emplace_back(name, m->clone());
    }
    Sequential& operator=(const Sequential& other) {
        if (this != &other) *this = Sequential(other);
        return *this;
    }
    Sequential(Sequential&&) noexcept = default;
    Sequential& operator=(Sequential&&) noexcept = default;

    Sequential& add(std::string name, std::unique_ptr<Module<T>> layer) {
        layer->set_training(this->training_);
        layers_.emplace_back(std::move(name), std::move(layer));
        return *this;
    }
    Var<T> forward(const Var<T>& x) override {
        Var<T> h = x;
        for (auto& [name, layer] : layers_) h = layer->forward(h);
        return h;
    }
    std::unique_ptr<Module<T>> clone() const override { return std::make_unique<Sequential>(*this); }
    void visit_parameters(const std::string& prefix, const ParamVisitor<T>& fn) override {
        for (auto& [name, layer] : layers_) layer->visit_parameters(prefix + name + ".", fn);
    }
    void visit_buffers(const std::string& prefix, const BufferVisitor<T>& fn) override {
        for (auto& [name, layer] : layers_) layer->visit_buffers(prefix + name + ".", fn);
    }
    void set_training(bool on) override {
        this->training_ = on;
        for (auto& [name, layer] : layers_) layer->set_training(on);
    }
    std::size_t size() const { return layers_.size(); }
    const std::string& name(std::size_t i) const { return layers_[i].first; }
    Module<T>& layer(std::size_t i) { return *layers_[i].second; }

private:
    std::vector<std::pair<std::string, std::unique_ptr<Module<T>>>> layers_;
};

/// relu(body(x) + shortcut(x)); an empty shortcut is the identity.
template <class T>
class Residual final : public Module<T> {
public:
    Residual(Sequential<T> body, Sequential<T> shortcut) : body_(std::move(body)), shortcut_(std::move(shortcut)) {}
    Var<T> forward(const Var<T>& x) override {
        Var<T> skip = shortcut_.size() == 0 ? x : shortcut_.forward(x);
        return ag::relu(ag::add(body_.forward(x), skip));
    }
    std::unique_ptr<Module<T>> clone() const override { return std::make_unique<Residual>(body_, shortcut_); }
    void visit_parameters(const std::string& prefix, const ParamVisitor<T>& fn) override {
        body_.visit_parameters(prefix + "body.", fn);
        shortcut_.visit_parameters(prefix + "shortcut.", fn);
    }
    void visit_buffers(const std::string& prefix, const BufferVisitor<T>& fn) override {
        body_.visit_buffers(prefix + "body.", fn);
        shortcut_.visit_buffers(prefix + "shortcut.", fn);
    }
    void set_training(bool on) override {
        this->training_ = on;
        body_.set_training(on);
        shortcut_.set_training(on);
    }

private:
    Sequential<T> body_, shortcut_;
};

// ---------------------------------------------------------------- state helpers

template <class T>
std::vector<Var<T>> parameters(Module<T>& m) {
    std::vector<Var<T>> out;
    m.visit_parameters("", [&](const std::string&, Var<T>& v) { out.push_back(v); });
    return out;
}

template <class T>
StateDict state_dict(Module<T>& m, const std::string& prefix = "") {
    StateDict sd;
    m.visit_parameters(prefix, [&](const std::string& n, Var<T>& v) { sd[n] = v.value().template cast<double>(); });
    m.visit_buffers(prefix, [&](const std::string& n, Tensor<T>& t) { sd[n] = t.template cast<double>(); });
    return sd;
}

class StateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <class T>
void load_state_dict(Module<T>& m, const StateDict& sd, const std::string& prefix = "") {
    auto take = [&](const std::string& n, Tensor<T>& dst) {
        auto it = sd.find(n);
        if (it == sd.end()) throw StateError("missing tensor '" + n + "'");
        if (it->second.shape() != dst.shape())
            throw StateError("tensor '" + n + "' has shape " + shape_string(it->second.shape()) + ", expected " +
                             shape_string(dst.shape()));
        dst = it->second.template cast<T>();
    };
    m.visit_parameters(prefix, [&](const std::string& n, Var<T>& v) { take(n, v.mutable_value()); });
    m.visit_buffers(prefix, [&](const std::string& n, Tensor<T>& t) { take(n, t); });
}

/// Toggle requires_grad on every parameter; restores the previous flags on exit.
template <class T>
class FreezeGuard {
public:
    explicit FreezeGuard(std::vector<Var<T>> params) : params_(std::move(params)) {
        for (auto& p : params_) {
            previous_.push_back(p.requires_grad());
            p.set_requires_grad(false);
        }
    }
    ~FreezeGuard() {
        for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(previous_[i]);
    }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    std::vector<Var<T>> params_;
    std::vector<bool> previous_;
};

/// Switches a module to evaluation mode for the guard's lifetime.
template <class T>
class EvalGuard {
public:
    explicit EvalGuard(Module<T>& m) : module_(m), previous_(m.training()) { m.set_training(false); }
    ~EvalGuard() { module_.set_training(previous_); }
    EvalGuard(const EvalGuard&) = delete;
    EvalGuard& operator=(const EvalGuard&) = delete;

private:
    Module<T>& module_;
    bool previous_;
};

// ---------------------------------------------------------------- optimizers

template <class T>
void zero_grad(std::vector<Var<T>>& params) {
    for (auto& p : params) p.zero_grad();
}

/// SGD with heavy-ball momentum; L2 weight decay is added to the gradient.
template <class T>
class Sgd {
public:
    Sgd(std::vector<Var<T>> params, double momentum, double weight_decay)
        : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
        for (auto& p : params_) velocity_.emplace_back(p.value().shape());
    }
    void step(double lr) {
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& w = params_[k].mutable_value();
            const auto& g = params_[k].grad();
            auto& v = velocity_[k];
            for (std::int64_t i = 0; i < w.size(); ++i) {
                const T d = g[i] + static_cast<T>(weight_decay_) * w[i];
                v[i] = static_cast<T>(momentum_) * v[i] + d;
                w[i] -= static_cast<T>(lr) * v[i];
            }
        }
    }
    void zero_grad() { nn::zero_grad(params_); }
    std::vector<Var<T>>& params() { return params_; }

private:
    std::vector<Var<T>> params_;
    std::vector<Tensor<T>> velocity_;
    double momentum_, weight_decay_;
};

/// RMSprop: per-coordinate step scaled by a running RMS of the gradient, no momentum.
template <class T>
class RmsProp {
public:
    explicit RmsProp(std::vector<Var<T>> params, double alpha = 0.99, double eps = 1e-8)
        : params_(std::move(params)), alpha_(alpha), eps_(eps) {
        for (auto& p : params_) square_avg_.emplace_back(p.value().shape());
    }
    /// `direction` = -1 descends, +1 ascends.
    void step(double lr, int direction = -1) {
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& w = params_[k].mutable_value();
            const auto& g = params_[k].grad();
            auto& s = square_avg_[k];
            for (std::int64_t i = 0; i < w.size(); ++i) {
                s[i] = static_cast<T>(alpha_) * s[i] + static_cast<T>(1 - alpha_) * g[i] * g[i];
                w[i] += static_cast<T>(direction * lr) * g[i] / (std::sqrt(s[i]) + static_cast<T>(eps_));
            }
        }
    }
    void zero_grad() { nn::zero_grad(params_); }

private:
    std::vector<Var<T>> params_;
    std::vector<Tensor<T>> square_avg_;
    double alpha_, eps_;
};

}  // namespace cafe::nn
