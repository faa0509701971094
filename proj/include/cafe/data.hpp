#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cafe/random.hpp"
#include "cafe/tensor.hpp"

namespace cafe::data {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Images in [0,1] as N x C x H x W with one label and one stable id per row.
struct ImageBatch {
    Tensor<float> images;
    std::vector<int> labels;
    std::vector<std::int64_t> ids;

    int size() const { return static_cast<int>(labels.size()); }
    bool empty() const { return labels.empty(); }
    ImageBatch slice(int begin, int end) const;
    ImageBatch gather(const std::vector<int>& rows) const;
    /// Same rows and ids with different pixels.
    ImageBatch with_images(Tensor<float> images) const;
};

struct Dataset {
    std::string name;
    int num_classes = 0;
    ImageBatch train;
    ImageBatch test;
};

/// Where data comes from. `name` is "synthetic-shapes" or "cifar-binary".
struct DatasetSpec {
    std::string name = "synthetic-shapes";
    std::string root;
    int num_classes = 3;
    int train_size = 600;  // 0 keeps everything a file-backed source provides
    int test_size = 300;
    std::uint64_t seed = 7;
    std::string normalization = "none";
    bool verify_checksums = true;
};

/// Procedural 32x32 RGB shapes. Class k draws shape k (triangle, square,
/// disk, plus, ring, diamond, cross, frame, hollow triangle, half disk) at a
/// random position, size and tilt, in a random colour over a noisy gradient
/// background. Labels are balanced: counts differ by at most one. Ids are
/// `id_offset + i`.
ImageBatch synthetic_shapes(int num_classes, int n, std::uint64_t seed, std::int64_t id_offset = 0);

/// CIFAR-10 binary layout: data_batch_1.bin .. data_batch_5.bin and
/// test_batch.bin, records of one label byte followed by 3072 pixel bytes.
/// An optional `checksums.crc32` file lists `<crc32 hex> <file name>` lines;
/// listed files are verified when `spec.verify_checksums` is set.
Dataset load_cifar_binary(const DatasetSpec& spec);

/// Dispatch on spec.name. Ordering is deterministic given spec.seed.
Dataset load_dataset(const DatasetSpec& spec);

/// Row indices of each minibatch in one epoch; shuffled when `rng` is given.
std::vector<std::vector<int>> minibatches(int n, int batch_size, Rng* rng);

}  // namespace cafe::data
