#include <fstream>

#include "cafe/feature_viz.hpp"
#include "cafe/plots.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace cafe;
using namespace cafe::viz;
using ag::Var;

namespace {

// Width and height from the IHDR chunk of a PNG file.
std::pair<int, int> png_size(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    unsigned char b[24];
    in.read(reinterpret_cast<char*>(b), 24);
    REQUIRE(in.gcount() == 24);
    const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    REQUIRE(std::equal(sig, sig + 8, b));
    auto be = [&](int o) { return (b[o] << 24) | (b[o + 1] << 16) | (b[o + 2] << 8) | b[o + 3]; };
    return {be(16), be(20)};
}

Tensor<float> image_of(const data::ImageBatch& d, int i) {
    Tensor<float> t({3, 32, 32});
    std::copy_n(d.images.data() + static_cast<std::int64_t>(i) * 3072, 3072, t.data());
    return t;
}

}  // namespace

TEST_CASE("total variation") {
    Tensor<float> flat({1, 3, 4, 4});
    flat.fill(0.3f);
    CHECK(total_variation(flat)[0] == 0.0);
    Tensor<float> t({1, 1, 2, 2});
    t[0] = 0;
    t[1] = 1;
    t[2] = 0.5f;
    t[3] = 0;
    // horizontal (1-0)^2 + (0-0.5)^2, vertical (0.5-0)^2 + (0-1)^2
    CHECK(total_variation(t)[0] == doctest::Approx(1 + 0.25 + 0.25 + 1));
}

TEST_CASE("feature inversion from noise lowers the loss and stays in range") {
    auto m = testutil::trained_tiny();
    const auto d = testutil::shapes_test().slice(0, 3);
    Tensor<float> target;
    {
        ag::NoGradGuard ng;
        m.set_training(false);
        target = m.features(Var<float>(d.images)).value();
    }
    VizConfig cfg;
    cfg.steps = 60;
    cfg.step_size = 0.02;
    const auto r = invert_feature(m, target, cfg);
    CHECK(r.images.shape() == d.images.shape());
    CHECK(r.loss_trace.size() == 60);
    for (float v : r.images.storage()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    for (std::size_t i = 0; i < 3; ++i) CHECK(r.final_loss[i] < 0.9 * r.initial_loss[i]);
    const auto again = invert_feature(m, target, cfg);
    CHECK(again.images.storage() == r.images.storage());
}

TEST_CASE("feature inversion started at the answer stays there") {
    auto m = testutil::trained_tiny();
    const auto d = testutil::shapes_test().slice(0, 2);
    Tensor<float> target;
    {
        ag::NoGradGuard ng;
        m.set_training(false);
        target = m.features(Var<float>(d.images)).value();
    }
    VizConfig cfg;
    cfg.steps = 5;
    cfg.jitter = 0;
    cfg.init = VizInit::Natural;
    const auto r = invert_feature(m, target, cfg, &d.images);
    double dev = 0;
    for (std::int64_t k = 0; k < r.images.size(); ++k) dev = std::max(dev, static_cast<double>(std::abs(r.images[k] - d.images[k])));
    CHECK(dev <= 0.05);
    for (std::size_t i = 0; i < 2; ++i) CHECK(r.final_loss[i] <= r.initial_loss[i]);
    CHECK_THROWS_AS(invert_feature(m, target, cfg), RenderError);
    CHECK_THROWS_AS(invert_feature(m, Tensor<float>({2, 4, 8, 8}), cfg, &d.images), ShapeError);
    cfg.steps = 0;
    CHECK_THROWS_AS(invert_feature(m, target, cfg, &d.images), RenderError);
}

TEST_CASE("panel rendering") {
    const auto& d = testutil::shapes_test();
    const auto dir = testutil::temp_dir("panels");
    std::vector<PanelColumn> cols;
    for (const char* title : {"natural", "adv", "ac", "cf"}) cols.push_back({title, {image_of(d, 0), image_of(d, 1), image_of(d, 2)}});
    render_panel(cols, dir / "grid.png");
    REQUIRE(std::filesystem::exists(dir / "grid.png"));
    CHECK(std::filesystem::file_size(dir / "grid.png") > 0);
    const auto [w, h] = png_size(dir / "grid.png");
    const auto one = render_panel_canvas({{"natural", {image_of(d, 0)}}});
    CHECK(w == 8 + 4 * (one.width() - 8));
    CHECK(h > 3 * 96);

    render_panel({{"x", {image_of(d, 0)}}}, dir / "single.png");
    CHECK(png_size(dir / "single.png").first == one.width());
    CHECK_THROWS_AS(render_panel({}, dir / "empty.png"), RenderError);
    CHECK_THROWS_AS(render_panel(cols, dir / "missing" / "grid.png"), RenderError);
    // layout is a pure function of the inputs
    CHECK(render_panel_canvas(cols).pixels() == render_panel_canvas(cols).pixels());
}

TEST_CASE("canvas drawing primitives") {
    Canvas c(20, 10);
    CHECK(c.pixel(0, 0) == colors::white);
    c.fill_rect(2, 2, 3, 3, colors::black);
    CHECK(c.pixel(3, 3) == colors::black);
    CHECK(c.pixel(5, 5) == colors::white);
    c.fill_rect(18, 8, 10, 10, colors::black);  // clipped, no throw
    CHECK(c.pixel(19, 9) == colors::black);
    CHECK_THROWS_AS(c.pixel(20, 0), RenderError);
    CHECK(Canvas::text_width("ab") == 11);
    CHECK(Canvas::text_width("ab", 2) == 22);
    CHECK_THROWS_AS(Canvas(0, 5), RenderError);
}

TEST_CASE("charts render and validate their inputs") {
    const auto dir = testutil::temp_dir("charts");
    BarChart bc{"conjunctions", "acc %", {"fgsm", "pgd"}, {"adv", "cf", "cc", "ac"}, {{50, 30, 60, 70}, {40, 20, 55, 65}}};
    render_bar_chart(bc).save_png(dir / "bars.png");
    CHECK(std::filesystem::file_size(dir / "bars.png") > 0);
    bc.values.pop_back();
    CHECK_THROWS_AS(render_bar_chart(bc), RenderError);

    BoxPlot bp{"rademacher", "d", {{"lambda 0", 0.1, 0.2, 0.3, 0.4, 0.5}, {"lambda 1", 0.05, 0.1, 0.12, 0.2, 0.3}}};
    render_box_plot(bp).save_png(dir / "box.png");
    CHECK(std::filesystem::file_size(dir / "box.png") > 0);
    CHECK_THROWS_AS(render_box_plot(BoxPlot{}), RenderError);

    render_table("diagnostics", {{"acc_T", "acc_Z", "rho"}, {"55.3", "0.3", "0.51"}}).save_png(dir / "table.png");
    CHECK(std::filesystem::file_size(dir / "table.png") > 0);
    CHECK_THROWS_AS(render_table("empty", {}), RenderError);
}
