#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <vector>

#include "cafe/kernels.hpp"
#include "cafe/tensor.hpp"

// Minimal reverse-mode autodiff over Tensor<T>. Each op records a closure that
// pushes its output gradient to its inputs; backward() replays closures in
// reverse creation order.

namespace cafe::ag {

namespace detail {
inline std::atomic<std::uint64_t>& node_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::uint64_t order = detail::node_counter().fetch_add(1, std::memory_order_relaxed);
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Tensor<T>&)> backward_fn;

    Tensor<T>& grad_buffer() {
        if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

template <class T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    /// Gradient accumulated by backward(); zeros if nothing reached this node.
    const Tensor<T>& grad() const { return node_->grad_buffer(); }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.fill(T(0));
    }

    /// Reverse pass from a single-element output.
    void backward() const {
        if (node_->value.size() != 1) throw ShapeError("backward() needs a scalar output");
        // Owning pointers: releasing parent links below must not free queued nodes.
        std::vector<std::shared_ptr<Node<T>>> nodes;
        std::unordered_set<Node<T>*> seen;
        std::vector<std::shared_ptr<Node<T>>> stack{node_};
        while (!stack.empty()) {
            auto n = std::move(stack.back());
            stack.pop_back();
            if (!n->requires_grad || !seen.insert(n.get()).second) continue;
            for (auto& p : n->parents) stack.push_back(p);
            nodes.push_back(std::move(n));
        }
        std::sort(nodes.begin(), nodes.end(), [](const auto& a, const auto& b) { return a->order > b->order; });
        node_->grad_buffer()[0] += T(1);
        for (auto& n : nodes) {
            if (!n->backward_fn) continue;
            n->backward_fn(n->grad_buffer());
            // Interior graph is single-use: release closures and parent links.
            n->backward_fn = nullptr;
            n->parents.clear();
        }
    }

    /// Same value, cut from the graph.
    Var detach() const { return Var(node_->value, false); }

    std::shared_ptr<Node<T>> node() const { return node_; }

    /// Build an op result; records the backward closure only when needed.
    static Var make(Tensor<T> value, std::vector<Var> inputs,
                    std::function<void(const Tensor<T>&, std::vector<std::shared_ptr<Node<T>>>&)> backward) {
        Var out(std::move(value));
        if (!grad_enabled()) return out;
        bool any = false;
        for (const auto& in : inputs) any = any || in.requires_grad();
        if (!any) return out;
        out.node_->requires_grad = true;
        for (auto& in : inputs) out.node_->parents.push_back(in.node_);
        Node<T>* self = out.node_.get();
        out.node_->backward_fn = [self, backward = std::move(backward)](const Tensor<T>& g) {
            backward(g, self->parents);
        };
        return out;
    }

private:
    std::shared_ptr<Node<T>> node_;
};

template <class T>
using Parents = std::vector<std::shared_ptr<Node<T>>>;

namespace detail {
template <class T>
bool wants(const std::shared_ptr<Node<T>>& p) {
    return p && p->requires_grad;
}
}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return Var<T>::make(std::move(out), {a, b}, [](const Tensor<T>& g, Parents<T>& p) {
        for (int k = 0; k < 2; ++k)
            if (detail::wants(p[static_cast<std::size_t>(k)])) {
                auto& dst = p[static_cast<std::size_t>(k)]->grad_buffer();
                for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += g[i];
            }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return Var<T>::make(std::move(out), {a, b}, [](const Tensor<T>& g, Parents<T>& p) {
        if (detail::wants(p[0])) {
            auto& dst = p[0]->grad_buffer();
            for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
        if (detail::wants(p[1])) {
            auto& dst = p[1]->grad_buffer();
            for (std::int64_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return Var<T>::make(std::move(out), {a, b}, [](const Tensor<T>& g, Parents<T>& p) {
        if (detail::wants(p[0])) {
            auto& dst = p[0]->grad_buffer();
            const auto& other = p[1]->value;
            for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += g[i] * other[i];
        }
        if (detail::wants(p[1])) {
            auto& dst = p[1]->grad_buffer();
            const auto& other = p[0]->value;
            for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += g[i] * other[i];
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    for (auto& v : out.storage()) v *= s;
    return Var<T>::make(std::move(out), {a}, [s](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += s * g[i];
    });
}

template <class T>
Var<T> relu(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.storage()) v = v > T(0) ? v : T(0);
    return Var<T>::make(std::move(out), {a}, [](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        const auto& x = p[0]->value;
        for (std::int64_t i = 0; i < g.size(); ++i)
            if (x[i] > T(0)) dst[i] += g[i];
    });
}

template <class T>
Var<T> exp(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.storage()) v = std::exp(v);
    Tensor<T> saved = out;
    return Var<T>::make(std::move(out), {a}, [saved = std::move(saved)](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += g[i] * saved[i];
    });
}

/// max(a, floor) elementwise; gradient passes where a > floor.
template <class T>
Var<T> clamp_min(const Var<T>& a, T floor) {
    Tensor<T> out = a.value();
    for (auto& v : out.storage()) v = v > floor ? v : floor;
    return Var<T>::make(std::move(out), {a}, [floor](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        const auto& x = p[0]->value;
        for (std::int64_t i = 0; i < g.size(); ++i)
            if (x[i] > floor) dst[i] += g[i];
    });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return Var<T>::make(std::move(out), {a}, [](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var<T> sum(const Var<T>& a) {
    T acc = T(0);
    for (T v : a.value().storage()) acc += v;
    return Var<T>::make(Tensor<T>({1}, acc), {a}, [](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        for (auto& v : dst.storage()) v += g[0];
    });
}

template <class T>
Var<T> mean(const Var<T>& a) {
    const auto n = static_cast<T>(a.value().size());
    return scale(sum(a), T(1) / n);
}

template <class T>
Var<T> sum_squares(const Var<T>& a) {
    T acc = T(0);
    for (T v : a.value().storage()) acc += v * v;
    return Var<T>::make(Tensor<T>({1}, acc), {a}, [](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        const auto& x = p[0]->value;
        for (std::int64_t i = 0; i < x.size(); ++i) dst[i] += T(2) * x[i] * g[0];
    });
}

/// Sum over every axis but the first: [N, ...] -> [N].
template <class T>
Var<T> row_sum(const Var<T>& a) {
    const int n = a.value().dim(0);
    const auto d = a.value().row_size();
    Tensor<T> out({n});
    for (int i = 0; i < n; ++i) {
        T acc = T(0);
        for (T v : a.value().row(i)) acc += v;
        out[i] = acc;
    }
    return Var<T>::make(std::move(out), {a}, [n, d](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        for (int i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < d; ++j) dst[i * d + j] += g[i];
    });
}

/// Mean over the leading axis: [N, ...] -> [1, ...].
template <class T>
Var<T> batch_mean(const Var<T>& a) {
    const int n = a.value().dim(0);
    const auto d = a.value().row_size();
    Shape s = a.shape();
    s[0] = 1;
    Tensor<T> out(s);
    for (int i = 0; i < n; ++i) {
        auto r = a.value().row(i);
        for (std::int64_t j = 0; j < d; ++j) out[j] += r[static_cast<std::size_t>(j)];
    }
    for (auto& v : out.storage()) v /= static_cast<T>(n);
    return Var<T>::make(std::move(out), {a}, [n, d](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        const T inv = T(1) / static_cast<T>(n);
        for (int i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < d; ++j) dst[i * d + j] += g[j] * inv;
    });
}

// ---------------------------------------------------------------- classification

/// Row-wise log-softmax over [N, K].
template <class T>
Var<T> log_softmax(const Var<T>& a) {
    const int n = a.value().dim(0);
    const int k = a.value().dim(1);
    Tensor<T> out(a.shape());
    for (int i = 0; i < n; ++i) {
        auto r = a.value().row(i);
        const T mx = *std::max_element(r.begin(), r.end());
        T s = T(0);
        for (T v : r) s += std::exp(v - mx);
        const T lse = mx + std::log(s);
        for (int j = 0; j < k; ++j) out[i * k + j] = r[static_cast<std::size_t>(j)] - lse;
    }
    Tensor<T> saved = out;
    return Var<T>::make(std::move(out), {a}, [n, k, saved = std::move(saved)](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        for (int i = 0; i < n; ++i) {
            T gs = T(0);
            for (int j = 0; j < k; ++j) gs += g[i * k + j];
            for (int j = 0; j < k; ++j) dst[i * k + j] += g[i * k + j] - std::exp(saved[i * k + j]) * gs;
        }
    });
}

/// out[i] = a[i, labels[i]] over [N, K].
template <class T>
Var<T> pick(const Var<T>& a, const std::vector<int>& labels) {
    const int n = a.value().dim(0);
    const int k = a.value().dim(1);
    if (static_cast<int>(labels.size()) != n) throw ShapeError("pick: label count does not match batch");
    Tensor<T> out({n});
    for (int i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= k) throw std::out_of_range("label " + std::to_string(y) + " out of range for " + std::to_string(k) + " classes");
        out[i] = a.value()[i * k + y];
    }
    return Var<T>::make(std::move(out), {a}, [n, k, labels](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        for (int i = 0; i < n; ++i) dst[i * k + labels[static_cast<std::size_t>(i)]] += g[i];
    });
}

/// out[i] = max_{j != labels[i]} a[i, j]; gradient goes to the (first) argmax.
template <class T>
Var<T> max_other(const Var<T>& a, const std::vector<int>& labels) {
    const int n = a.value().dim(0);
    const int k = a.value().dim(1);
    Tensor<T> out({n});
    std::vector<int> arg(static_cast<std::size_t>(n), -1);
    for (int i = 0; i < n; ++i) {
        T best = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < k; ++j) {
            if (j == labels[static_cast<std::size_t>(i)]) continue;
            const T v = a.value()[i * k + j];
            if (arg[static_cast<std::size_t>(i)] < 0 || v > best) {
                best = v;
                arg[static_cast<std::size_t>(i)] = j;
            }
        }
        out[i] = best;
    }
    return Var<T>::make(std::move(out), {a}, [n, k, arg](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        for (int i = 0; i < n; ++i) dst[i * k + arg[static_cast<std::size_t>(i)]] += g[i];
    });
}

/// log(exp(a) + eps): log-probabilities with a smooth floor at log(eps).
template <class T>
Var<T> log_add_eps(const Var<T>& a, T eps) {
    Tensor<T> out = a.value();
    Tensor<T> ratio = a.value();  // exp(a) / (exp(a) + eps)
    for (std::int64_t i = 0; i < out.size(); ++i) {
        const T e = std::exp(out[i]);
        out[i] = std::log(e + eps);
        ratio[i] = e / (e + eps);
    }
    return Var<T>::make(std::move(out), {a}, [ratio = std::move(ratio)](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += g[i] * ratio[i];
    });
}

/// Mean negative log-likelihood of the labelled class given row log-probabilities.
template <class T>
Var<T> nll(const Var<T>& log_probs, const std::vector<int>& labels) {
    return scale(mean(pick(log_probs, labels)), T(-1));
}

/// Per-row KL(p || q) from row log-probabilities: sum_k p_k (log p_k - log q_k).
template <class T>
Var<T> kl_rows(const Var<T>& log_p, const Var<T>& log_q) {
    return row_sum(mul(exp(log_p), sub(log_p, log_q)));
}

// ---------------------------------------------------------------- layers

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] || ws[2] != ws[3])
        throw ShapeError("conv2d: incompatible input " + shape_string(xs) + " and weight " + shape_string(ws));
    kernels::ConvGeometry geo{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad};
    Tensor<T> out({geo.batch, geo.out_channels, geo.out_h(), geo.out_w()});
    std::span<const T> bias = b.defined() ? b.value().values() : std::span<const T>{};
    kernels::parallel::conv2d_forward<T>(geo, x.value().values(), w.value().values(), bias, out.values());
    std::vector<Var<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    return Var<T>::make(std::move(out), inputs, [geo](const Tensor<T>& g, Parents<T>& p) {
        if (detail::wants(p[0]))
            kernels::parallel::conv2d_backward_input<T>(geo, g.values(), p[1]->value.values(), p[0]->grad_buffer().values());
        const bool want_b = p.size() > 2 && detail::wants(p[2]);
        if (detail::wants(p[1]) || want_b) {
            Tensor<T> scratch_w;
            std::span<T> dw;
            if (detail::wants(p[1])) {
                dw = p[1]->grad_buffer().values();
            } else {
                scratch_w = Tensor<T>(p[1]->value.shape());
                dw = scratch_w.values();
            }
            std::span<T> db = want_b ? p[2]->grad_buffer().values() : std::span<T>{};
            kernels::parallel::conv2d_backward_params<T>(geo, p[0]->value.values(), g.values(), dw, db);
        }
    });
}

/// x [N, I] times weight [O, I] transposed, plus bias [O].
template <class T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
        throw ShapeError("dense: incompatible input " + shape_string(xs) + " and weight " + shape_string(ws));
    kernels::DenseGeometry geo{xs[0], xs[1], ws[0]};
    Tensor<T> out({geo.batch, geo.out_features});
    std::span<const T> bias = b.defined() ? b.value().values() : std::span<const T>{};
    kernels::parallel::dense_forward<T>(geo, x.value().values(), w.value().values(), bias, out.values());
    std::vector<Var<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    return Var<T>::make(std::move(out), inputs, [geo](const Tensor<T>& g, Parents<T>& p) {
        if (detail::wants(p[0]))
            kernels::parallel::dense_backward_input<T>(geo, g.values(), p[1]->value.values(), p[0]->grad_buffer().values());
        const bool want_b = p.size() > 2 && detail::wants(p[2]);
        if (detail::wants(p[1]) || want_b) {
            Tensor<T> scratch_w;
            std::span<T> dw;
            if (detail::wants(p[1])) {
                dw = p[1]->grad_buffer().values();
            } else {
                scratch_w = Tensor<T>(p[1]->value.shape());
                dw = scratch_w.values();
            }
            std::span<T> db = want_b ? p[2]->grad_buffer().values() : std::span<T>{};
            kernels::parallel::dense_backward_params<T>(geo, p[0]->value.values(), g.values(), dw, db);
        }
    });
}

/// Per-channel normalization of [N, C, H, W]. Training mode normalizes with
/// batch statistics and folds them into the running estimates; evaluation
/// mode applies the running estimates as a fixed affine map.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum, T eps) {
    const auto& xs = x.shape();
    const int n = xs[0], c = xs[1];
    const int hw = xs[2] * xs[3];
    const T count = static_cast<T>(n) * hw;
    Tensor<T> mu({c}), inv_std({c});
    if (training) {
        for (int ch = 0; ch < c; ++ch) {
            T s = T(0);
            for (int i = 0; i < n; ++i)
                for (int p = 0; p < hw; ++p) s += x.value()[(static_cast<std::int64_t>(i) * c + ch) * hw + p];
            const T m = s / count;
            T v = T(0);
            for (int i = 0; i < n; ++i)
                for (int p = 0; p < hw; ++p) {
                    const T d = x.value()[(static_cast<std::int64_t>(i) * c + ch) * hw + p] - m;
                    v += d * d;
                }
            v /= count;
            mu[ch] = m;
            inv_std[ch] = T(1) / std::sqrt(v + eps);
            running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * m;
            const T unbiased = count > T(1) ? v * count / (count - T(1)) : v;
            running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * unbiased;
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            mu[ch] = running_mean[ch];
            inv_std[ch] = T(1) / std::sqrt(running_var[ch] + eps);
        }
    }
    Tensor<T> xhat(xs);
    Tensor<T> out(xs);
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p) {
                const auto idx = (static_cast<std::int64_t>(i) * c + ch) * hw + p;
                xhat[idx] = (x.value()[idx] - mu[ch]) * inv_std[ch];
                out[idx] = gamma.value()[ch] * xhat[idx] + beta.value()[ch];
            }
    return Var<T>::make(
        std::move(out), {x, gamma, beta},
        [n, c, hw, count, training, xhat = std::move(xhat), inv_std](const Tensor<T>& g, Parents<T>& p) {
            const auto& gam = p[1]->value;
            if (detail::wants(p[1]) || detail::wants(p[2])) {
                for (int ch = 0; ch < c; ++ch) {
                    T dg = T(0), db = T(0);
                    for (int i = 0; i < n; ++i)
                        for (int q = 0; q < hw; ++q) {
                            const auto idx = (static_cast<std::int64_t>(i) * c + ch) * hw + q;
                            dg += g[idx] * xhat[idx];
                            db += g[idx];
                        }
                    if (detail::wants(p[1])) p[1]->grad_buffer()[ch] += dg;
                    if (detail::wants(p[2])) p[2]->grad_buffer()[ch] += db;
                }
            }
            if (!detail::wants(p[0])) return;
            auto& dx = p[0]->grad_buffer();
            for (int ch = 0; ch < c; ++ch) {
                const T k = gam[ch] * inv_std[ch];
                if (!training) {
                    for (int i = 0; i < n; ++i)
                        for (int q = 0; q < hw; ++q) {
                            const auto idx = (static_cast<std::int64_t>(i) * c + ch) * hw + q;
                            dx[idx] += k * g[idx];
                        }
                    continue;
                }
                T sg = T(0), sgx = T(0);
                for (int i = 0; i < n; ++i)
                    for (int q = 0; q < hw; ++q) {
                        const auto idx = (static_cast<std::int64_t>(i) * c + ch) * hw + q;
                        sg += g[idx];
                        sgx += g[idx] * xhat[idx];
                    }
                for (int i = 0; i < n; ++i)
                    for (int q = 0; q < hw; ++q) {
                        const auto idx = (static_cast<std::int64_t>(i) * c + ch) * hw + q;
                        dx[idx] += k * (g[idx] - sg / count - xhat[idx] * sgx / count);
                    }
            }
        });
}

/// [N, C, H, W] -> [N, C] spatial mean.
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
    const auto& xs = x.shape();
    const int n = xs[0], c = xs[1], hw = xs[2] * xs[3];
    Tensor<T> out({n, c});
    for (int i = 0; i < n * c; ++i) {
        T s = T(0);
        for (int q = 0; q < hw; ++q) s += x.value()[static_cast<std::int64_t>(i) * hw + q];
        out[i] = s / static_cast<T>(hw);
    }
    return Var<T>::make(std::move(out), {x}, [n, c, hw](const Tensor<T>& g, Parents<T>& p) {
        auto& dst = p[0]->grad_buffer();
        for (int i = 0; i < n * c; ++i)
            for (int q = 0; q < hw; ++q) dst[static_cast<std::int64_t>(i) * hw + q] += g[i] / static_cast<T>(hw);
    });
}

}  // namespace cafe::ag
