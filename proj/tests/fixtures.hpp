#pragma once

#include <filesystem>
#include <string>

#include "cafe/cafe_defense.hpp"
#include "cafe/data.hpp"
#include "cafe/model_zoo.hpp"

namespace testutil {

inline std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "cafe_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline const cafe::data::ImageBatch& shapes_train() {
    static const auto b = cafe::data::synthetic_shapes(3, 300, 21);
    return b;
}

inline const cafe::data::ImageBatch& shapes_test() {
    static const auto b = cafe::data::synthetic_shapes(3, 90, 22, 1'000'000);
    return b;
}

// Naturally trained tiny-cnn on 3-class shapes; trained once per process.
// A zero-radius training attack turns the adversarial trainer into plain
// cross-entropy training.
inline cafe::zoo::SplitClassifier<float> trained_tiny() {
    static const cafe::zoo::SplitClassifier<float> model = [] {
        cafe::defense::DefenseConfig cfg;
        cfg.cafe_weight = 0;
        cfg.attack = {0.0, 1, 1e-3, false};
        cfg.optim.epochs = 6;
        cfg.optim.batch_size = 32;
        cfg.optim.lr_max = 0.05;
        cfg.eval_every = 1000;
        cfg.seed = 3;
        return cafe::defense::train_cafe(cafe::zoo::SplitClassifier<float>({"tiny-cnn", 3}, 11), shapes_train(),
                                         shapes_test(), cfg)
            .model;
    }();
    return model;
}

}  // namespace testutil
