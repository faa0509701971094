#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cafe/canvas.hpp"
#include "cafe/model_zoo.hpp"

namespace cafe::viz {

enum class VizInit { Noise, Natural };

struct VizConfig {
    int steps = 200;
    double step_size = 0.01;  // Adam learning rate on pixels
    double tv_weight = 1e-3;
    VizInit init = VizInit::Noise;
    int jitter = 2;  // max random roll in pixels per step
    std::uint64_t seed = 0;

    void validate() const;
};

struct VizResult {
    Tensor<float> images;             // N x C x H x W, best iterate per sample
    std::vector<double> initial_loss;  // per sample, at the starting image
    std::vector<double> final_loss;    // per sample, at the returned image
    std::vector<double> loss_trace;    // mean loss of the current iterate per step
};

/// Squared-difference total variation per sample.
std::vector<double> total_variation(const Tensor<float>& images);

/// Minimises ||f_l(x') - target||^2 + tv_weight * TV(x') over x' in [0, 1]
/// with Adam on the pixels. Each step sees the image rolled by a random
/// offset of up to cfg.jitter pixels; the per-sample loss used to pick the
/// best iterate is measured without jitter. `natural` is the start point for
/// VizInit::Natural.
VizResult invert_feature(zoo::SplitClassifier<float>& model, const Tensor<float>& target, const VizConfig& cfg,
                         const Tensor<float>* natural = nullptr);

struct PanelColumn {
    std::string title;
    std::vector<Tensor<float>> images;  // each 3 x H x W
};

/// Grid with one titled column per source; rows are samples.
Canvas render_panel_canvas(const std::vector<PanelColumn>& columns, int scale = 3);
void render_panel(const std::vector<PanelColumn>& columns, const std::filesystem::path& path, int scale = 3);

}  // namespace cafe::viz
