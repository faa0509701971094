#include "cafe/feature_viz.hpp"

#include <algorithm>
#include <cmath>

namespace cafe::viz {

using ag::Var;

void VizConfig::validate() const {
    if (steps < 1) throw RenderError("visualization needs at least one step");
    if (!(step_size > 0)) throw RenderError("visualization step size must be positive");
    if (tv_weight < 0) throw RenderError("tv_weight must be non-negative");
    if (jitter < 0) throw RenderError("jitter must be non-negative");
}

namespace {

// out[c, y, x] = in[c, (y - dy) mod H, (x - dx) mod W] for every sample.
Tensor<float> roll(const Tensor<float>& in, int dx, int dy) {
    const int n = in.dim(0), ch = in.dim(1), h = in.dim(2), w = in.dim(3);
    Tensor<float> out(in.shape());
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < ch; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(i) * ch + c) * h * w;
            for (int y = 0; y < h; ++y) {
                const int sy = ((y - dy) % h + h) % h;
                for (int x = 0; x < w; ++x) {
                    const int sx = ((x - dx) % w + w) % w;
                    out[base + y * w + x] = in[base + sy * w + sx];
                }
            }
        }
    return out;
}

// Adds tv_weight * d TV / d x into grad.
void add_tv_gradient(const Tensor<float>& x, double weight, Tensor<float>& grad) {
    const int n = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < ch; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(i) * ch + c) * h * w;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    const auto k = base + y * w + xx;
                    if (xx + 1 < w) {
                        const double d = 2.0 * (x[k + 1] - x[k]) * weight;
                        grad[k] -= static_cast<float>(d);
                        grad[k + 1] += static_cast<float>(d);
                    }
                    if (y + 1 < h) {
                        const double d = 2.0 * (x[k + w] - x[k]) * weight;
                        grad[k] -= static_cast<float>(d);
                        grad[k + w] += static_cast<float>(d);
                    }
                }
        }
}

std::vector<double> feature_loss(zoo::SplitClassifier<float>& model, const Tensor<float>& x, const Tensor<float>& target) {
    ag::NoGradGuard ng;
    const Tensor<float> f = model.features(Var<float>(x)).value();
    const int n = f.dim(0);
    const auto rs = f.row_size();
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i)
        for (std::int64_t k = i * rs; k < (i + 1) * rs; ++k) {
            const double d = static_cast<double>(f[k]) - target[k];
            out[static_cast<std::size_t>(i)] += d * d;
        }
    return out;
}

}  // namespace

std::vector<double> total_variation(const Tensor<float>& images) {
    const int n = images.dim(0), ch = images.dim(1), h = images.dim(2), w = images.dim(3);
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < ch; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(i) * ch + c) * h * w;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const auto k = base + y * w + x;
                    if (x + 1 < w) out[static_cast<std::size_t>(i)] += std::pow(images[k + 1] - images[k], 2);
                    if (y + 1 < h) out[static_cast<std::size_t>(i)] += std::pow(images[k + w] - images[k], 2);
                }
        }
    return out;
}

VizResult invert_feature(zoo::SplitClassifier<float>& model, const Tensor<float>& target, const VizConfig& cfg,
                         const Tensor<float>* natural) {
    cfg.validate();
    if (target.rank() != 4 || Shape(target.shape().begin() + 1, target.shape().end()) != model.feature_shape())
        throw ShapeError("visualization target " + shape_string(target.shape()) + " does not match split layer shape " +
                         shape_string(model.feature_shape()));
    const int n = target.dim(0);
    Shape in_shape = model.input_shape();
    in_shape.insert(in_shape.begin(), n);

    zoo::ModeGuard mode(model, false);
    nn::FreezeGuard<float> frozen(model.parameters());
    Rng rng(derive_seed(cfg.seed, "feature-viz"));

    Tensor<float> x(in_shape);
    if (cfg.init == VizInit::Natural) {
        if (!natural) throw RenderError("natural initialisation needs the natural images");
        if (natural->shape() != in_shape) throw ShapeError("natural images do not match the visualization batch");
        x = *natural;
    } else {
        for (auto& v : x.storage()) v = static_cast<float>(rng.uniform(0.4, 0.6));
    }

    auto total_loss = [&](const Tensor<float>& img) {
        auto l = feature_loss(model, img, target);
        const auto tv = total_variation(img);
        for (std::size_t i = 0; i < l.size(); ++i) l[i] += cfg.tv_weight * tv[i];
        return l;
    };

    VizResult r;
    r.initial_loss = total_loss(x);
    r.images = x;
    std::vector<double> best = r.initial_loss;
    const auto rs = x.row_size();

    Tensor<float> m1(in_shape), m2(in_shape);
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int s = 0; s < cfg.steps; ++s) {
        const int dx = cfg.jitter > 0 ? rng.uniform_int(-cfg.jitter, cfg.jitter) : 0;
        const int dy = cfg.jitter > 0 ? rng.uniform_int(-cfg.jitter, cfg.jitter) : 0;
        Var<float> xv(roll(x, dx, dy), true);
        const Var<float> loss = ag::sum_squares(ag::sub(model.features(xv), Var<float>(target)));
        if (!std::isfinite(loss.value()[0])) throw RenderError("non-finite feature loss at step " + std::to_string(s));
        loss.backward();
        Tensor<float> g = roll(xv.grad(), -dx, -dy);
        add_tv_gradient(x, cfg.tv_weight, g);

        const double c1 = 1 - std::pow(b1, s + 1), c2 = 1 - std::pow(b2, s + 1);
        for (std::int64_t k = 0; k < x.size(); ++k) {
            m1[k] = static_cast<float>(b1 * m1[k] + (1 - b1) * g[k]);
            m2[k] = static_cast<float>(b2 * m2[k] + (1 - b2) * static_cast<double>(g[k]) * g[k]);
            const double step = cfg.step_size * (m1[k] / c1) / (std::sqrt(m2[k] / c2) + eps);
            x[k] = std::clamp(static_cast<float>(x[k] - step), 0.0f, 1.0f);
        }

        const auto cur = total_loss(x);
        double mean = 0;
        for (int i = 0; i < n; ++i) {
            mean += cur[static_cast<std::size_t>(i)];
            if (cur[static_cast<std::size_t>(i)] < best[static_cast<std::size_t>(i)]) {
                best[static_cast<std::size_t>(i)] = cur[static_cast<std::size_t>(i)];
                std::copy_n(x.data() + i * rs, rs, r.images.data() + i * rs);
            }
        }
        r.loss_trace.push_back(mean / n);
    }
    r.final_loss = best;
    return r;
}

Canvas render_panel_canvas(const std::vector<PanelColumn>& columns, int scale) {
    if (columns.empty()) throw RenderError("panel needs at least one column");
    if (scale < 1) throw RenderError("panel scale must be positive");
    std::size_t rows = 0;
    int cell_w = 0, cell_h = 0;
    for (const auto& col : columns) {
        if (col.images.empty()) throw RenderError("panel column '" + col.title + "' has no images");
        rows = std::max(rows, col.images.size());
        for (const auto& im : col.images) {
            if (im.rank() != 3 || im.dim(0) != 3) throw RenderError("panel images must be 3xHxW");
            cell_w = std::max(cell_w, im.dim(2) * scale);
            cell_h = std::max(cell_h, im.dim(1) * scale);
        }
    }
    int title_w = 0;
    for (const auto& col : columns) title_w = std::max(title_w, Canvas::text_width(col.title));
    const int pad = 8, header = 20;
    const int col_w = std::max(cell_w, title_w) + pad;
    Canvas c(pad + static_cast<int>(columns.size()) * col_w, header + static_cast<int>(rows) * (cell_h + pad) + pad);
    for (std::size_t j = 0; j < columns.size(); ++j) {
        const int x0 = pad + static_cast<int>(j) * col_w;
        c.text(x0 + (col_w - pad - Canvas::text_width(columns[j].title)) / 2, 6, columns[j].title, colors::black);
        for (std::size_t i = 0; i < columns[j].images.size(); ++i)
            c.image(x0 + (col_w - pad - cell_w) / 2, header + static_cast<int>(i) * (cell_h + pad), columns[j].images[i], scale);
    }
    return c;
}

void render_panel(const std::vector<PanelColumn>& columns, const std::filesystem::path& path, int scale) {
    render_panel_canvas(columns, scale).save_png(path);
}

}  // namespace cafe::viz
