#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cafe/canvas.hpp"

namespace cafe::viz {

/// values[g][s] is series s within group g. Bars start at zero.
struct BarChart {
    std::string title;
    std::string y_label;
    std::vector<std::string> groups;
    std::vector<std::string> series;
    std::vector<std::vector<double>> values;
    double y_max = 0;  // 0 picks the data maximum
};

Canvas render_bar_chart(const BarChart& chart);

/// One box per entry: whiskers at min/max, box at the quartiles, median line.
struct BoxStats {
    std::string label;
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

struct BoxPlot {
    std::string title;
    std::string y_label;
    std::vector<BoxStats> boxes;
};

Canvas render_box_plot(const BoxPlot& plot);

/// Plain text table drawn on a canvas; the first row is the header.
Canvas render_table(const std::string& title, const std::vector<std::vector<std::string>>& rows);

}  // namespace cafe::viz
