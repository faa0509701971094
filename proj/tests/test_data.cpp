#include <zlib.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "cafe/data.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace cafe;
using namespace cafe::data;

namespace {

void write_cifar_file(const std::filesystem::path& p, int records, int label_mod, std::uint8_t fill) {
    std::ofstream out(p, std::ios::binary);
    for (int r = 0; r < records; ++r) {
        out.put(static_cast<char>(r % label_mod));
        for (int k = 0; k < 3072; ++k) out.put(static_cast<char>((fill + r + k) & 0xff));
    }
}

std::filesystem::path make_cifar_layout(const std::string& name) {
    auto root = testutil::temp_dir(name);
    for (int b = 1; b <= 5; ++b) write_cifar_file(root / ("data_batch_" + std::to_string(b) + ".bin"), 4, 10, static_cast<std::uint8_t>(b));
    write_cifar_file(root / "test_batch.bin", 6, 10, 200);
    return root;
}

std::uint32_t crc_of(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::string s((std::istreambuf_iterator<char>(in)), {});
    return static_cast<std::uint32_t>(crc32(crc32(0, nullptr, 0), reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
}

}  // namespace

TEST_CASE("synthetic shapes: balanced labels, pixel range, ids") {
    const auto b = synthetic_shapes(3, 600, 7);
    CHECK(b.size() == 600);
    CHECK(b.images.shape() == Shape{600, 3, 32, 32});
    int counts[3] = {0, 0, 0};
    for (int l : b.labels) counts[l]++;
    CHECK(counts[0] == 200);
    CHECK(counts[1] == 200);
    CHECK(counts[2] == 200);
    const auto [lo, hi] = std::minmax_element(b.images.storage().begin(), b.images.storage().end());
    CHECK(*lo >= 0.0f);
    CHECK(*hi <= 1.0f);
    CHECK(b.ids.front() == 0);
    CHECK(b.ids.back() == 599);
    const auto shifted = synthetic_shapes(3, 10, 7, 1000);
    CHECK(shifted.ids.front() == 1000);

    const auto odd = synthetic_shapes(4, 10, 1);
    int c4[4] = {0, 0, 0, 0};
    for (int l : odd.labels) c4[l]++;
    CHECK(*std::max_element(c4, c4 + 4) - *std::min_element(c4, c4 + 4) <= 1);
}

TEST_CASE("synthetic shapes are deterministic in the seed") {
    const auto a = synthetic_shapes(3, 20, 7), b = synthetic_shapes(3, 20, 7), c = synthetic_shapes(3, 20, 8);
    CHECK(a.images.storage() == b.images.storage());
    CHECK(a.labels == b.labels);
    CHECK_FALSE(a.images.storage() == c.images.storage());
    CHECK_THROWS_AS(synthetic_shapes(1, 10, 1), DataError);
    CHECK_THROWS_AS(synthetic_shapes(3, 0, 1), DataError);
}

TEST_CASE("load_dataset: synthetic spec and error paths") {
    DatasetSpec spec;
    const auto ds = load_dataset(spec);
    CHECK(ds.num_classes == 3);
    CHECK(ds.train.size() == 600);
    CHECK(ds.test.size() == 300);
    const auto again = load_dataset(spec);
    CHECK(ds.train.images.storage() == again.train.images.storage());
    std::set<std::int64_t> train_ids(ds.train.ids.begin(), ds.train.ids.end());
    for (auto id : ds.test.ids) CHECK(train_ids.count(id) == 0);

    spec.normalization = "imagenet";
    CHECK_THROWS_AS(load_dataset(spec), DataError);
    spec.normalization = "none";
    spec.name = "mnist";
    CHECK_THROWS_AS(load_dataset(spec), DataError);
}

TEST_CASE("cifar binary layout loads, and a missing batch file is named") {
    const auto root = make_cifar_layout("cifar_ok");
    DatasetSpec spec;
    spec.name = "cifar-binary";
    spec.root = root.string();
    spec.num_classes = 10;
    spec.train_size = 0;
    spec.test_size = 0;
    const auto ds = load_dataset(spec);
    CHECK(ds.train.size() == 20);
    CHECK(ds.test.size() == 6);
    CHECK(ds.train.images.shape() == Shape{20, 3, 32, 32});
    for (auto id : ds.test.ids) CHECK(id >= 1'000'000);

    std::filesystem::remove(root / "data_batch_3.bin");
    CHECK_THROWS_WITH_AS(load_dataset(spec), doctest::Contains("data_batch_3.bin"), DataError);
}

TEST_CASE("cifar checksums manifest is verified") {
    const auto root = make_cifar_layout("cifar_crc");
    DatasetSpec spec;
    spec.name = "cifar-binary";
    spec.root = root.string();
    spec.num_classes = 10;
    spec.train_size = 8;
    spec.test_size = 3;
    {
        std::ofstream m(root / "checksums.crc32");
        char buf[16];
        std::snprintf(buf, sizeof buf, "%08x", crc_of(root / "test_batch.bin"));
        m << buf << " test_batch.bin\n";
    }
    const auto ds = load_dataset(spec);
    CHECK(ds.train.size() == 8);
    CHECK(ds.test.size() == 3);

    write_cifar_file(root / "test_batch.bin", 6, 10, 201);
    CHECK_THROWS_WITH_AS(load_dataset(spec), doctest::Contains("checksum mismatch"), DataError);
    spec.verify_checksums = false;
    CHECK_NOTHROW(load_dataset(spec));
}

TEST_CASE("cifar labels beyond K are rejected") {
    const auto root = make_cifar_layout("cifar_labels");
    DatasetSpec spec;
    spec.name = "cifar-binary";
    spec.root = root.string();
    spec.num_classes = 3;
    CHECK_THROWS_WITH_AS(load_dataset(spec), doctest::Contains("out of range"), DataError);
}

TEST_CASE("minibatches cover every row once") {
    Rng rng(4);
    const auto batches = minibatches(10, 4, &rng);
    CHECK(batches.size() == 3);
    CHECK(batches.back().size() == 2);
    std::vector<int> all;
    for (const auto& b : batches) all.insert(all.end(), b.begin(), b.end());
    std::sort(all.begin(), all.end());
    for (int i = 0; i < 10; ++i) CHECK(all[static_cast<std::size_t>(i)] == i);
    const auto ordered = minibatches(5, 2, nullptr);
    CHECK(ordered[0] == std::vector<int>{0, 1});
    CHECK_THROWS_AS(minibatches(5, 0, nullptr), DataError);
}

TEST_CASE("batch slicing and gathering keep ids aligned") {
    const auto b = synthetic_shapes(3, 12, 5);
    const auto s = b.slice(2, 5);
    CHECK(s.size() == 3);
    CHECK(s.ids == std::vector<std::int64_t>{2, 3, 4});
    const auto g = b.gather({7, 1});
    CHECK(g.labels == std::vector<int>{b.labels[7], b.labels[1]});
    CHECK(std::equal(g.images.data(), g.images.data() + 3072, b.images.data() + 7 * 3072));
    CHECK_THROWS_AS(b.slice(3, 13), DataError);
    CHECK_THROWS_AS(b.gather({12}), DataError);
}
