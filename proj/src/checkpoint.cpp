#include "cafe/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <sstream>

namespace cafe::ckpt {
namespace {

constexpr char kMagic[8] = {'C', 'A', 'F', 'E', 'C', 'K', 'P', 'T'};

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    const std::vector<char>& buffer() const { return buf_; }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    Reader(const std::vector<char>& buf, std::size_t end) : buf_(buf), end_(end) {}
    void bytes(void* p, std::size_t n) {
        if (pos_ + n > end_) throw CheckpointError("checkpoint truncated");
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        bytes(&v, 4);
        return v;
    }
    std::string str() {
        const auto n = u32();
        if (pos_ + n > end_) throw CheckpointError("checkpoint truncated");
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == end_; }

private:
    const std::vector<char>& buf_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

std::uint32_t crc_of(const char* data, std::size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n));
    return static_cast<std::uint32_t>(crc);
}

std::string feature_net_arch(const zoo::FeatureNet<float>& net) {
    const auto& s = net.feature_shape();
    std::ostringstream os;
    os << "feature-net:" << zoo::to_string(net.kind()) << ':' << s[0] << 'x' << s[1] << 'x' << s[2];
    return os.str();
}

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    Writer w;
    w.bytes(kMagic, sizeof kMagic);
    w.u32(ckpt.header.format_version);
    nlohmann::json h = {{"kind", ckpt.header.kind},
                        {"arch", ckpt.header.arch},
                        {"split", ckpt.header.split},
                        {"num_classes", ckpt.header.num_classes},
                        {"seed", ckpt.header.seed},
                        {"metadata", ckpt.header.metadata}};
    w.str(h.dump());
    w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        for (double v : t.storage()) {
            const float f = static_cast<float>(v);
            w.bytes(&f, 4);
        }
    }
    const auto crc = crc_of(w.buffer().data(), w.buffer().size());
    w.u32(crc);

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw CheckpointError("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < sizeof kMagic + 12) throw CheckpointError("checksum mismatch: checkpoint " + path.string() + " is truncated");
    if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
    const std::size_t body = buf.size() - 4;
    std::uint32_t stored = 0;
    std::memcpy(&stored, buf.data() + body, 4);
    if (stored != crc_of(buf.data(), body))
        throw CheckpointError("checksum mismatch in " + path.string() + " (corrupt or truncated file)");

    Reader r(buf, body);
    char magic[8];
    r.bytes(magic, 8);
    Checkpoint ckpt;
    ckpt.header.format_version = r.u32();
    if (ckpt.header.format_version != kFormatVersion)
        throw CheckpointError("unsupported checkpoint format version " + std::to_string(ckpt.header.format_version) +
                              " (expected " + std::to_string(kFormatVersion) + ")");
    const auto h = nlohmann::json::parse(r.str());
    ckpt.header.kind = h.at("kind").get<std::string>();
    ckpt.header.arch = h.at("arch").get<std::string>();
    ckpt.header.split = h.at("split").get<std::string>();
    ckpt.header.num_classes = h.at("num_classes").get<int>();
    ckpt.header.seed = h.at("seed").get<std::uint64_t>();
    ckpt.header.metadata = h.at("metadata");
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        const auto rank = r.u32();
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.u32()));
        Tensor<double> t(shape);
        for (auto& v : t.storage()) {
            float f = 0;
            r.bytes(&f, 4);
            v = f;
        }
        ckpt.tensors.emplace(std::move(name), std::move(t));
    }
    if (!r.done()) throw CheckpointError("trailing bytes in checkpoint " + path.string());
    return ckpt;
}

void save_classifier(zoo::SplitClassifier<float>& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata) {
    Checkpoint c;
    c.header.kind = "classifier";
    c.header.arch = model.spec().to_string();
    c.header.split = model.split_layer();
    c.header.num_classes = model.num_classes();
    c.header.seed = model.seed();
    c.header.metadata = metadata;
    c.header.metadata["feature_shape"] = model.feature_shape();
    c.tensors = model.state_dict();
    write_checkpoint(c, path);
}

zoo::SplitClassifier<float> load_classifier(const std::filesystem::path& path) {
    const Checkpoint c = read_checkpoint(path);
    if (c.header.kind != "classifier")
        throw CheckpointError(path.string() + " holds a " + c.header.kind + ", not a classifier");
    zoo::SplitClassifier<float> model(zoo::ArchSpec::parse(c.header.arch), c.header.seed);
    try {
        model.load_state_dict(c.tensors);
    } catch (const nn::StateError& e) {
        throw CheckpointError("checkpoint " + path.string() + " does not match its architecture: " + e.what());
    }
    return model;
}

zoo::SplitClassifier<float> load_classifier(const std::filesystem::path& path, const zoo::ArchSpec& expected) {
    const Checkpoint c = read_checkpoint(path);
    const auto stored = zoo::ArchSpec::parse(c.header.arch);
    if (!(stored == expected))
        throw CheckpointError("architecture mismatch: checkpoint has '" + c.header.arch + "', expected '" +
                              expected.to_string() + "'");
    return load_classifier(path);
}

void save_feature_net(zoo::FeatureNet<float>& net, const std::string& role, const std::filesystem::path& path,
                      const nlohmann::json& metadata) {
    if (role != "hypothesis" && role != "test_function") throw CheckpointError("unknown feature-net role '" + role + "'");
    Checkpoint c;
    c.header.kind = role;
    c.header.arch = feature_net_arch(net);
    c.header.split = "";
    c.header.seed = net.seed();
    c.header.metadata = metadata;
    c.tensors = net.state_dict();
    write_checkpoint(c, path);
}

zoo::FeatureNet<float> load_feature_net(const std::filesystem::path& path, const std::string& role) {
    const Checkpoint c = read_checkpoint(path);
    if (c.header.kind != role) throw CheckpointError(path.string() + " holds a " + c.header.kind + ", not a " + role);
    // feature-net:<kind>:CxHxW
    const auto& a = c.header.arch;
    const auto p1 = a.find(':'), p2 = a.find(':', p1 + 1);
    if (a.substr(0, p1) != "feature-net" || p2 == std::string::npos)
        throw CheckpointError("malformed feature-net architecture '" + a + "'");
    const auto kind = zoo::parse_feature_net_kind(a.substr(p1 + 1, p2 - p1 - 1));
    Shape shape(3);
    char x1 = 0, x2 = 0;
    std::istringstream is(a.substr(p2 + 1));
    is >> shape[0] >> x1 >> shape[1] >> x2 >> shape[2];
    if (!is || x1 != 'x' || x2 != 'x') throw CheckpointError("malformed feature shape in '" + a + "'");
    zoo::FeatureNet<float> net(kind, shape, c.header.seed);
    try {
        net.load_state_dict(c.tensors);
    } catch (const nn::StateError& e) {
        throw CheckpointError("checkpoint " + path.string() + " does not match its architecture: " + e.what());
    }
    return net;
}

}  // namespace cafe::ckpt
