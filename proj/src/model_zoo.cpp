#include "cafe/model_zoo.hpp"

#include <algorithm>
#include <sstream>

namespace cafe::zoo {

std::string ArchSpec::to_string() const {
    std::ostringstream os;
    os << name << ":classes=" << num_classes << ":split=" << split << ":input=" << in_channels << 'x' << height << 'x'
       << width;
    return os.str();
}

ArchSpec ArchSpec::parse(const std::string& text) {
    ArchSpec spec;
    std::istringstream is(text);
    std::string field;
    bool first = true;
    while (std::getline(is, field, ':')) {
        if (first) {
            spec.name = field;
            first = false;
            continue;
        }
        const auto eq = field.find('=');
        if (eq == std::string::npos) throw ArchitectureError("malformed architecture field '" + field + "'");
        const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
        if (key == "classes") {
            spec.num_classes = std::stoi(value);
        } else if (key == "split") {
            spec.split = value;
        } else if (key == "input") {
            char x1 = 0, x2 = 0;
            std::istringstream vs(value);
            vs >> spec.in_channels >> x1 >> spec.height >> x2 >> spec.width;
            if (!vs || x1 != 'x' || x2 != 'x') throw ArchitectureError("malformed input shape '" + value + "'");
        } else {
            throw ArchitectureError("unknown architecture field '" + key + "'");
        }
    }
    if (spec.name.empty()) throw ArchitectureError("empty architecture name");
    return spec;
}

std::vector<std::string> registered_architectures() { return {"tiny-cnn", "vgg-small", "resnet-small"}; }

namespace {

template <class T>
struct Plan {
    // (name, module, is_convolutional)
    std::vector<std::tuple<std::string, std::unique_ptr<nn::Module<T>>, bool>> layers;

    void conv_block(const std::string& name, int in, int out, int stride, Rng& rng) {
        nn::Sequential<T> block;
        block.add("conv", std::make_unique<nn::Conv2d<T>>(in, out, 3, stride, 1, rng, false));
        block.add("bn", std::make_unique<nn::BatchNorm2d<T>>(out));
        block.add("relu", std::make_unique<nn::ReLU<T>>());
        layers.emplace_back(name, std::make_unique<nn::Sequential<T>>(std::move(block)), true);
    }

    void residual_block(const std::string& name, int in, int out, int stride, Rng& rng) {
        nn::Sequential<T> body;
        body.add("conv1", std::make_unique<nn::Conv2d<T>>(in, out, 3, stride, 1, rng, false));
        body.add("bn1", std::make_unique<nn::BatchNorm2d<T>>(out));
        body.add("relu", std::make_unique<nn::ReLU<T>>());
        body.add("conv2", std::make_unique<nn::Conv2d<T>>(out, out, 3, 1, 1, rng, false));
        body.add("bn2", std::make_unique<nn::BatchNorm2d<T>>(out));
        nn::Sequential<T> shortcut;
        if (stride != 1 || in != out) {
            shortcut.add("conv", std::make_unique<nn::Conv2d<T>>(in, out, 1, stride, 0, rng, false));
            shortcut.add("bn", std::make_unique<nn::BatchNorm2d<T>>(out));
        }
        layers.emplace_back(name, std::make_unique<nn::Residual<T>>(std::move(body), std::move(shortcut)), true);
    }

    void other(const std::string& name, std::unique_ptr<nn::Module<T>> m) { layers.emplace_back(name, std::move(m), false); }
};

template <class T>
Plan<T> make_plan(const ArchSpec& spec, Rng& rng) {
    Plan<T> plan;
    const int c = spec.in_channels;
    if (spec.name == "tiny-cnn") {
        plan.conv_block("conv0", c, 16, 2, rng);
        plan.conv_block("conv1", 16, 16, 1, rng);
        plan.conv_block("conv2", 16, 32, 2, rng);
        plan.conv_block("conv3", 32, 3, 1, rng);
    } else if (spec.name == "vgg-small") {
        plan.conv_block("conv0", c, 16, 1, rng);
        plan.conv_block("conv1", 16, 16, 2, rng);
        plan.conv_block("conv2", 16, 32, 1, rng);
        plan.conv_block("conv3", 32, 32, 2, rng);
        plan.conv_block("conv4", 32, 64, 1, rng);
        plan.conv_block("conv5", 64, 64, 2, rng);
    } else if (spec.name == "resnet-small") {
        plan.conv_block("stem", c, 16, 1, rng);
        plan.residual_block("layer1", 16, 16, 1, rng);
        plan.residual_block("layer2", 16, 32, 2, rng);
        plan.residual_block("layer3", 32, 64, 2, rng);
        plan.other("pool", std::make_unique<nn::GlobalAvgPool<T>>());
    } else {
        throw ArchitectureError("unknown architecture '" + spec.name + "'");
    }
    return plan;
}

}  // namespace

template <class T>
SplitClassifier<T>::SplitClassifier(ArchSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
    if (spec_.num_classes < 1) throw ArchitectureError("num_classes must be positive");
    Rng rng(derive_seed(seed_, "init"));
    Plan<T> plan = make_plan<T>(spec_, rng);

    int last_conv = -1;
    for (std::size_t i = 0; i < plan.layers.size(); ++i)
        if (std::get<2>(plan.layers[i])) last_conv = static_cast<int>(i);
    int split_index = -1;
    if (spec_.split.empty() || spec_.split == "last") {
        split_index = last_conv;
    } else {
        for (std::size_t i = 0; i < plan.layers.size(); ++i)
            if (std::get<0>(plan.layers[i]) == spec_.split) split_index = static_cast<int>(i);
        if (spec_.split == "fc" || spec_.split == "logsoftmax")
            throw ArchitectureError("split selector '" + spec_.split + "' is not a convolutional layer");
        if (split_index < 0) throw ArchitectureError("split selector '" + spec_.split + "' names no layer of " + spec_.name);
        if (!std::get<2>(plan.layers[static_cast<std::size_t>(split_index)]))
            throw ArchitectureError("split selector '" + spec_.split + "' is not a convolutional layer");
    }
    split_layer_ = std::get<0>(plan.layers[static_cast<std::size_t>(split_index)]);

    for (std::size_t i = 0; i < plan.layers.size(); ++i) {
        auto& [name, module, conv] = plan.layers[i];
        if (static_cast<int>(i) <= split_index)
            features_.add(name, std::move(module));
        else
            head_.add(name, std::move(module));
    }

    // Shapes follow from a zero image through the cut; the head's dense layer
    // width depends on them.
    Shape head_in;
    {
        ag::NoGradGuard ng;
        Var<T> zero(Tensor<T>({1, spec_.in_channels, spec_.height, spec_.width}));
        Var<T> f = features_.forward(zero);
        feature_shape_ = Shape(f.shape().begin() + 1, f.shape().end());
        Var<T> h = head_.forward(f);
        head_in = Shape(h.shape().begin() + 1, h.shape().end());
    }
    head_.add("fc", std::make_unique<nn::Dense<T>>(static_cast<int>(numel(head_in)), spec_.num_classes, rng));
    head_.add("logsoftmax", std::make_unique<nn::LogSoftmax<T>>());
    set_training(false);
}

template <class T>
void SplitClassifier<T>::check_input(const Shape& s) const {
    if (s.size() != 4 || s[1] != spec_.in_channels || s[2] != spec_.height || s[3] != spec_.width)
        throw ShapeError("input shape " + shape_string(s) + " does not match model input " +
                         shape_string(input_shape()));
}

template <class T>
void SplitClassifier<T>::check_features(const Shape& s) const {
    if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != feature_shape_)
        throw ShapeError("feature shape " + shape_string(s) + " does not match split layer shape " +
                         shape_string(feature_shape_));
}

std::string to_string(FeatureNetKind kind) {
    switch (kind) {
        case FeatureNetKind::Cnn: return "cnn";
        case FeatureNetKind::Identity: return "identity";
        case FeatureNetKind::Zero: return "zero";
    }
    return "cnn";
}

FeatureNetKind parse_feature_net_kind(const std::string& s) {
    if (s == "cnn") return FeatureNetKind::Cnn;
    if (s == "identity") return FeatureNetKind::Identity;
    if (s == "zero") return FeatureNetKind::Zero;
    throw ArchitectureError("unknown feature-net kind '" + s + "'");
}

template <class T>
FeatureNet<T>::FeatureNet(FeatureNetKind kind, Shape feature_shape, std::uint64_t seed)
    : kind_(kind), feature_shape_(std::move(feature_shape)), seed_(seed) {
    if (feature_shape_.size() != 3) throw ShapeError("feature-net needs a CxHxW feature shape");
    if (kind_ != FeatureNetKind::Cnn) return;
    Rng rng(derive_seed(seed, "feature-net-init"));
    const int c = feature_shape_[0];
    net_.add("conv0", std::make_unique<nn::Conv2d<T>>(c, c, 3, 1, 1, rng));
    net_.add("bn0", std::make_unique<nn::BatchNorm2d<T>>(c));
    net_.add("relu0", std::make_unique<nn::ReLU<T>>());
    net_.add("conv1", std::make_unique<nn::Conv2d<T>>(c, c, 3, 1, 1, rng));
    net_.add("bn1", std::make_unique<nn::BatchNorm2d<T>>(c));
    net_.add("relu1", std::make_unique<nn::ReLU<T>>());
    net_.add("conv2", std::make_unique<nn::Conv2d<T>>(c, c, 3, 1, 1, rng));
}

template <class T>
Var<T> FeatureNet<T>::forward(const Var<T>& f) {
    if (f.shape().size() != 4 || Shape(f.shape().begin() + 1, f.shape().end()) != feature_shape_)
        throw ShapeError("feature-net input " + shape_string(f.shape()) + " does not match " +
                         shape_string(feature_shape_));
    switch (kind_) {
        case FeatureNetKind::Identity: return f;
        case FeatureNetKind::Zero: return Var<T>(Tensor<T>(f.shape()));
        case FeatureNetKind::Cnn: break;
    }
    return net_.forward(f);
}

template class SplitClassifier<float>;
template class SplitClassifier<double>;
template class FeatureNet<float>;
template class FeatureNet<double>;

}  // namespace cafe::zoo
