#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cafe/tensor.hpp"

namespace cafe::viz {

class RenderError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Rgb = std::array<std::uint8_t, 3>;

namespace colors {
inline constexpr Rgb white{255, 255, 255};
inline constexpr Rgb black{0, 0, 0};
inline constexpr Rgb grey{150, 150, 150};
inline constexpr Rgb light{225, 225, 225};
}  // namespace colors

/// A palette of distinguishable series colours, cycled by index.
Rgb series_color(std::size_t i);

/// RGB raster with a 5x7 bitmap font. Drawing clips at the edges.
class Canvas {
public:
    Canvas(int width, int height, Rgb background = colors::white);

    int width() const { return width_; }
    const std::vector<std::uint8_t>& pixels() const { return rgb_; }  // row-major RGB
    int height() const { return height_; }
    Rgb pixel(int x, int y) const;

    void set(int x, int y, Rgb c);
    void fill_rect(int x, int y, int w, int h, Rgb c);
    void rect(int x, int y, int w, int h, Rgb c);
    void hline(int x0, int x1, int y, Rgb c);
    void vline(int x, int y0, int y1, Rgb c);
    /// Text with its top-left corner at (x, y); lowercase renders as uppercase.
    void text(int x, int y, const std::string& s, Rgb c, int scale = 1);
    static int text_width(const std::string& s, int scale = 1);
    static int text_height(int scale = 1) { return 7 * scale; }
    /// Blit a 3xHxW image with values in [0, 1], each pixel drawn as scale x scale.
    void image(int x, int y, const Tensor<float>& chw, int scale = 1);

    void save_png(const std::filesystem::path& path) const;

private:
    int width_, height_;
    std::vector<std::uint8_t> rgb_;
};

}  // namespace cafe::viz
