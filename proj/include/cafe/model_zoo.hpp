#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cafe/nn.hpp"

namespace cafe::zoo {

using ag::Var;

class ArchitectureError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Registered classifier architecture plus where it is split.
///
/// Text form (stored in checkpoints): `name:classes=K:split=S:input=CxHxW`.
struct ArchSpec {
    std::string name = "tiny-cnn";
    int num_classes = 10;
    std::string split = "last";  // conv block name, or "last"
    int in_channels = 3;
    int height = 32;
    int width = 32;

    std::string to_string() const;
    static ArchSpec parse(const std::string& text);
    bool operator==(const ArchSpec&) const = default;
};

/// Names accepted by build_classifier.
std::vector<std::string> registered_architectures();

/// f = head ∘ feature_extractor, with the cut at a convolutional block.
template <class T>
class SplitClassifier {
public:
    SplitClassifier(ArchSpec spec, std::uint64_t seed);

    const ArchSpec& spec() const { return spec_; }
    /// Resolved name of the block the features are taken from.
    const std::string& split_layer() const { return split_layer_; }
    int num_classes() const { return spec_.num_classes; }
    std::uint64_t seed() const { return seed_; }
    /// Per-sample feature shape C_f x H_f x W_f.
    const Shape& feature_shape() const { return feature_shape_; }
    Shape input_shape() const { return {spec_.in_channels, spec_.height, spec_.width}; }

    Var<T> features(const Var<T>& x) {
        check_input(x.shape());
        return features_.forward(x);
    }
    /// Row log-probabilities from a feature block.
    Var<T> head(const Var<T>& f) {
        check_features(f.shape());
        return head_.forward(f);
    }
    std::pair<Var<T>, Var<T>> forward_split(const Var<T>& x) {
        Var<T> f = features(x);
        Var<T> lp = head_.forward(f);
        return {f, lp};
    }
    Var<T> forward(const Var<T>& x) { return forward_split(x).second; }

    void set_training(bool on) {
        features_.set_training(on);
        head_.set_training(on);
    }
    bool training() const { return features_.training(); }

    std::vector<Var<T>> parameters() {
        auto p = nn::parameters(features_);
        auto q = nn::parameters(head_);
        p.insert(p.end(), q.begin(), q.end());
        return p;
    }
    nn::StateDict state_dict() {
        auto sd = nn::state_dict(features_, "features.");
        auto hd = nn::state_dict(head_, "head.");
        sd.insert(hd.begin(), hd.end());
        return sd;
    }
    void load_state_dict(const nn::StateDict& sd) {
        nn::load_state_dict(features_, sd, "features.");
        nn::load_state_dict(head_, sd, "head.");
    }

    template <class U>
    SplitClassifier<U> cast() const {
        SplitClassifier<U> out(spec_, seed_);
        auto self = *this;
        out.load_state_dict(self.state_dict());
        out.set_training(training());
        return out;
    }

    nn::Sequential<T>& feature_extractor() { return features_; }
    nn::Sequential<T>& head_module() { return head_; }

private:
    void check_input(const Shape& s) const;
    void check_features(const Shape& s) const;

    ArchSpec spec_;
    std::uint64_t seed_;
    std::string split_layer_;
    nn::Sequential<T> features_;
    nn::Sequential<T> head_;
    Shape feature_shape_;
};

/// Build a registered architecture; throws ArchitectureError for unknown
/// names or for a split selector that does not name a convolutional block.
template <class T = float>
SplitClassifier<T> build_classifier(const ArchSpec& spec, std::uint64_t seed) {
    return SplitClassifier<T>(spec, seed);
}

enum class FeatureNetKind { Cnn, Identity, Zero };

std::string to_string(FeatureNetKind kind);
FeatureNetKind parse_feature_net_kind(const std::string& s);

/// Shape-preserving map FeatureMap -> FeatureMap used for both the hypothesis
/// model and the test function. The Cnn kind is three 3x3 convolutions at the
/// feature channel count with batch normalization and ReLU between them and a
/// linear final layer. Identity and Zero are fixed reference maps.
template <class T>
class FeatureNet {
public:
    FeatureNet() = default;
    FeatureNet(FeatureNetKind kind, Shape feature_shape, std::uint64_t seed);

    FeatureNetKind kind() const { return kind_; }
    const Shape& feature_shape() const { return feature_shape_; }
    std::uint64_t seed() const { return seed_; }

    Var<T> forward(const Var<T>& f);

    void set_training(bool on) { net_.set_training(on); }
    bool training() const { return net_.training(); }
    std::vector<Var<T>> parameters() { return nn::parameters(net_); }
    nn::StateDict state_dict() { return nn::state_dict(net_); }
    void load_state_dict(const nn::StateDict& sd) { nn::load_state_dict(net_, sd); }
    nn::Sequential<T>& module() { return net_; }

    template <class U>
    FeatureNet<U> cast() const {
        FeatureNet<U> out(kind_, feature_shape_, seed_);
        auto self = *this;
        out.load_state_dict(self.state_dict());
        out.set_training(training());
        return out;
    }

private:
    FeatureNetKind kind_ = FeatureNetKind::Identity;
    Shape feature_shape_;
    std::uint64_t seed_ = 0;
    nn::Sequential<T> net_;
};

/// Sets training mode on a classifier or feature net for the guard's lifetime.
template <class M>
class ModeGuard {
public:
    ModeGuard(M& m, bool training) : m_(m), previous_(m.training()) { m.set_training(training); }
    ~ModeGuard() { m_.set_training(previous_); }
    ModeGuard(const ModeGuard&) = delete;
    ModeGuard& operator=(const ModeGuard&) = delete;

private:
    M& m_;
    bool previous_;
};

}  // namespace cafe::zoo
