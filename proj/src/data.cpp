#include "cafe/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace cafe::data {

ImageBatch ImageBatch::slice(int begin, int end) const {
    if (begin < 0 || end > size() || begin > end) throw DataError("batch slice out of range");
    ImageBatch out;
    out.images = images.slice_rows(begin, end);
    out.labels.assign(labels.begin() + begin, labels.begin() + end);
    out.ids.assign(ids.begin() + begin, ids.begin() + end);
    return out;
}

ImageBatch ImageBatch::gather(const std::vector<int>& rows) const {
    ImageBatch out;
    Shape s = images.shape();
    s[0] = static_cast<int>(rows.size());
    out.images = Tensor<float>(s);
    const auto rs = images.row_size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const int r = rows[i];
        if (r < 0 || r >= size()) throw DataError("batch row " + std::to_string(r) + " out of range");
        std::copy_n(images.data() + r * rs, rs, out.images.data() + static_cast<std::int64_t>(i) * rs);
        out.labels.push_back(labels[static_cast<std::size_t>(r)]);
        out.ids.push_back(ids[static_cast<std::size_t>(r)]);
    }
    return out;
}

ImageBatch ImageBatch::with_images(Tensor<float> imgs) const {
    require_same_shape(imgs, images, "with_images");
    ImageBatch out;
    out.images = std::move(imgs);
    out.labels = labels;
    out.ids = ids;
    return out;
}

namespace {

constexpr int kSize = 32;
constexpr int kMaxShapes = 10;

struct Pt {
    double x, y;
};

// Signed side of p relative to a->b.
double edge(Pt a, Pt b, Pt p) { return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x); }

bool in_triangle(Pt p, const std::array<Pt, 3>& t) {
    const double d0 = edge(t[0], t[1], p), d1 = edge(t[1], t[2], p), d2 = edge(t[2], t[0], p);
    return (d0 >= 0 && d1 >= 0 && d2 >= 0) || (d0 <= 0 && d1 <= 0 && d2 <= 0);
}

// Point in the shape's own frame: centred, unrotated, unit radius.
bool inside(int shape, double u, double v) {
    const double r = std::hypot(u, v);
    switch (shape) {
        case 0: return in_triangle({u, v}, {{{0, -1}, {0.87, 0.5}, {-0.87, 0.5}}});
        case 1: return std::abs(u) <= 0.75 && std::abs(v) <= 0.75;
        case 2: return r <= 0.85;
        case 3: return (std::abs(u) <= 0.28 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.28 && std::abs(u) <= 0.95);
        case 4: return r <= 0.9 && r >= 0.55;
        case 5: return std::abs(u) + std::abs(v) <= 0.95;
        case 6: return (std::abs(u - v) <= 0.35 || std::abs(u + v) <= 0.35) && std::abs(u) <= 0.75 && std::abs(v) <= 0.75;
        case 7: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8 && (std::abs(u) >= 0.45 || std::abs(v) >= 0.45);
        case 8:
            return in_triangle({u, v}, {{{0, -1}, {0.87, 0.5}, {-0.87, 0.5}}}) &&
                   !in_triangle({u, v}, {{{0, -0.45}, {0.39, 0.22}, {-0.39, 0.22}}});
        case 9: return r <= 0.9 && v >= 0.0;
        default: return false;
    }
}

void draw_shape(int shape, std::uint64_t seed, float* img) {
    Rng rng(seed);
    std::array<double, 3> bg, fg, grad;
    for (auto& c : bg) c = rng.uniform(0.3, 0.7);
    // One polarity per image with per-channel colour jitter, so colour alone says nothing about the class.
    const double polarity = rng.coin() ? 1.0 : -1.0;
    for (int c = 0; c < 3; ++c) {
        fg[c] = std::clamp(bg[c] + polarity * rng.uniform(0.3, 0.5), 0.0, 1.0);
        grad[c] = rng.uniform(-0.1, 0.1);
    }
    const double angle_g = rng.uniform(0, 2 * std::numbers::pi);
    const double radius = rng.uniform(8.0, 12.0);
    const double cx = 15.5 + rng.uniform(-3.0, 3.0);
    const double cy = 15.5 + rng.uniform(-3.0, 3.0);
    const double tilt = rng.uniform(-0.3, 0.3);
    const double noise = rng.uniform(0.01, 0.03);
    const double ct = std::cos(tilt), st = std::sin(tilt);
    const double gx = std::cos(angle_g), gy = std::sin(angle_g);

    for (int y = 0; y < kSize; ++y) {
        for (int x = 0; x < kSize; ++x) {
            // 4x4 supersampled coverage for soft edges.
            int hits = 0;
            for (int sy = 0; sy < 4; ++sy)
                for (int sx = 0; sx < 4; ++sx) {
                    const double px = x + (sx + 0.5) / 4 - cx, py = y + (sy + 0.5) / 4 - cy;
                    const double u = (ct * px + st * py) / radius, v = (-st * px + ct * py) / radius;
                    hits += inside(shape, u, v);
                }
            const double cover = hits / 16.0;
            const double ramp = ((x - 15.5) * gx + (y - 15.5) * gy) / 16.0;
            for (int c = 0; c < 3; ++c) {
                double val = (1 - cover) * (bg[c] + grad[c] * ramp) + cover * fg[c] + rng.normal(0, noise);
                img[(c * kSize + y) * kSize + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
            }
        }
    }
}

std::uint32_t file_crc(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size()));
    return static_cast<std::uint32_t>(crc);
}

ImageBatch read_cifar_files(const std::filesystem::path& root, const std::vector<std::string>& files, int num_classes,
                            std::int64_t id_offset) {
    constexpr int kRecord = 1 + 3 * kSize * kSize;
    std::vector<unsigned char> all;
    for (const auto& f : files) {
        const auto p = root / f;
        std::ifstream in(p, std::ios::binary);
        if (!in) throw DataError("missing dataset file " + p.string());
        std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (buf.size() % kRecord != 0) throw DataError("dataset file " + p.string() + " has a partial record");
        all.insert(all.end(), buf.begin(), buf.end());
    }
    const int n = static_cast<int>(all.size() / kRecord);
    ImageBatch b;
    b.images = Tensor<float>({n, 3, kSize, kSize});
    for (int i = 0; i < n; ++i) {
        const unsigned char* r = all.data() + static_cast<std::size_t>(i) * kRecord;
        if (r[0] >= num_classes)
            throw DataError("label " + std::to_string(r[0]) + " out of range for " + std::to_string(num_classes) + " classes");
        b.labels.push_back(r[0]);
        b.ids.push_back(id_offset + i);
        for (int k = 0; k < 3 * kSize * kSize; ++k) b.images[static_cast<std::int64_t>(i) * 3 * kSize * kSize + k] = r[1 + k] / 255.0f;
    }
    return b;
}

ImageBatch shuffled_prefix(const ImageBatch& b, int keep, Rng& rng) {
    std::vector<int> order(static_cast<std::size_t>(b.size()));
    for (int i = 0; i < b.size(); ++i) order[static_cast<std::size_t>(i)] = i;
    std::shuffle(order.begin(), order.end(), rng.engine());
    if (keep > 0 && keep < b.size()) order.resize(static_cast<std::size_t>(keep));
    return b.gather(order);
}

}  // namespace

ImageBatch synthetic_shapes(int num_classes, int n, std::uint64_t seed, std::int64_t id_offset) {
    if (num_classes < 2 || num_classes > kMaxShapes)
        throw DataError("synthetic-shapes supports 2.." + std::to_string(kMaxShapes) + " classes");
    if (n < 1) throw DataError("synthetic-shapes needs at least one image");
    // Balanced labels in a seeded order.
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % num_classes;
    Rng order_rng(derive_seed(seed, "shapes-order"));
    std::shuffle(labels.begin(), labels.end(), order_rng.engine());

    ImageBatch b;
    b.images = Tensor<float>({n, 3, kSize, kSize});
    b.labels = labels;
    const auto rs = b.images.row_size();
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i)
        draw_shape(labels[static_cast<std::size_t>(i)], derive_seed(seed, "shapes-image", static_cast<std::uint64_t>(i)),
                   b.images.data() + i * rs);
    for (int i = 0; i < n; ++i) b.ids.push_back(id_offset + i);
    return b;
}

Dataset load_cifar_binary(const DatasetSpec& spec) {
    const std::filesystem::path root(spec.root);
    std::vector<std::string> train_files;
    for (int i = 1; i <= 5; ++i) train_files.push_back("data_batch_" + std::to_string(i) + ".bin");
    const std::vector<std::string> test_files{"test_batch.bin"};
    for (const auto& f : train_files)
        if (!std::filesystem::exists(root / f)) throw DataError("missing dataset file " + (root / f).string());
    if (!std::filesystem::exists(root / test_files[0]))
        throw DataError("missing dataset file " + (root / test_files[0]).string());

    const auto manifest = root / "checksums.crc32";
    if (spec.verify_checksums && std::filesystem::exists(manifest)) {
        std::ifstream in(manifest);
        std::string line;
        while (std::getline(in, line)) {
            std::istringstream ls(line);
            std::string hex, file;
            if (!(ls >> hex >> file)) continue;
            const auto expected = static_cast<std::uint32_t>(std::stoul(hex, nullptr, 16));
            if (!std::filesystem::exists(root / file)) throw DataError("missing dataset file " + (root / file).string());
            if (file_crc(root / file) != expected) throw DataError("checksum mismatch for dataset file " + (root / file).string());
        }
    }

    Dataset ds;
    ds.name = spec.name;
    ds.num_classes = spec.num_classes;
    Rng rng(derive_seed(spec.seed, "cifar-order"));
    ds.train = shuffled_prefix(read_cifar_files(root, train_files, spec.num_classes, 0), spec.train_size, rng);
    ds.test = shuffled_prefix(read_cifar_files(root, test_files, spec.num_classes, 1'000'000), spec.test_size, rng);
    return ds;
}

Dataset load_dataset(const DatasetSpec& spec) {
    if (spec.normalization != "none")
        throw DataError("unsupported normalization '" + spec.normalization + "' (attacks operate on raw [0,1] pixels)");
    if (spec.name == "synthetic-shapes") {
        Dataset ds;
        ds.name = spec.name;
        ds.num_classes = spec.num_classes;
        ds.train = synthetic_shapes(spec.num_classes, spec.train_size, derive_seed(spec.seed, "train"), 0);
        ds.test = synthetic_shapes(spec.num_classes, spec.test_size, derive_seed(spec.seed, "test"), 1'000'000);
        return ds;
    }
    if (spec.name == "cifar-binary") return load_cifar_binary(spec);
    throw DataError("unknown dataset '" + spec.name + "'");
}

std::vector<std::vector<int>> minibatches(int n, int batch_size, Rng* rng) {
    if (batch_size < 1) throw DataError("batch size must be positive");
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    if (rng) std::shuffle(order.begin(), order.end(), rng->engine());
    std::vector<std::vector<int>> out;
    for (int b = 0; b < n; b += batch_size)
        out.emplace_back(order.begin() + b, order.begin() + std::min(n, b + batch_size));
    return out;
}

}  // namespace cafe::data
