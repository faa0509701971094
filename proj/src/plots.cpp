#include "cafe/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace cafe::viz {

namespace {

constexpr int kMarginLeft = 60;
constexpr int kMarginRight = 20;
constexpr int kMarginTop = 40;
constexpr int kMarginBottom = 50;
constexpr int kPlotHeight = 240;

std::string tick_label(double v) {
    char buf[32];
    if (std::abs(v) >= 100 || v == std::floor(v))
        std::snprintf(buf, sizeof buf, "%.0f", v);
    else if (std::abs(v) >= 1)
        std::snprintf(buf, sizeof buf, "%.1f", v);
    else
        std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

// Rounds up to 1, 2 or 5 times a power of ten.
double nice_ceiling(double v) {
    if (!(v > 0)) return 1;
    const double p = std::pow(10.0, std::floor(std::log10(v)));
    for (double m : {1.0, 2.0, 5.0, 10.0})
        if (m * p >= v) return m * p;
    return 10 * p;
}

struct Axes {
    int x0, y0, width, height;
    double lo, hi;
    int y_of(double v) const {
        const double t = (std::clamp(v, lo, hi) - lo) / (hi - lo);
        return y0 + height - static_cast<int>(std::lround(t * height));
    }
};

// Wide enough for the content and the scaled title.
int frame_width(int content, const std::string& title) { return std::max(content, Canvas::text_width(title, 2) + 20); }

void draw_axes(Canvas& c, const Axes& a, const std::string& title, const std::string& y_label) {
    c.text((c.width() - Canvas::text_width(title, 2)) / 2, 10, title, colors::black, 2);
    for (int i = 0; i <= 5; ++i) {
        const double v = a.lo + (a.hi - a.lo) * i / 5.0;
        const int y = a.y_of(v);
        c.hline(a.x0, a.x0 + a.width, y, colors::light);
        const auto s = tick_label(v);
        c.text(a.x0 - 6 - Canvas::text_width(s), y - 3, s, colors::black);
    }
    c.vline(a.x0, a.y0, a.y0 + a.height, colors::black);
    c.hline(a.x0, a.x0 + a.width, a.y0 + a.height, colors::black);
    c.text(4, a.y0 - 14, y_label, colors::black);
}

}  // namespace

Canvas render_bar_chart(const BarChart& chart) {
    if (chart.groups.empty() || chart.series.empty()) throw RenderError("bar chart needs at least one group and one series");
    if (chart.values.size() != chart.groups.size()) throw RenderError("bar chart needs one value row per group");
    double top = chart.y_max;
    for (const auto& row : chart.values) {
        if (row.size() != chart.series.size()) throw RenderError("bar chart needs one value per series in every group");
        if (chart.y_max <= 0)
            for (double v : row) top = std::max(top, v);
    }
    top = chart.y_max > 0 ? chart.y_max : nice_ceiling(top);

    const int bar_w = 18, gap = 24;
    const int bars_w = static_cast<int>(chart.series.size()) * bar_w;
    int group_w = bars_w;
    for (const auto& g : chart.groups) group_w = std::max(group_w, Canvas::text_width(g) - gap / 2);
    const int plot_w = static_cast<int>(chart.groups.size()) * (group_w + gap) + gap;
    const int legend_w = 20 + [&] {
        int w = 0;
        for (const auto& s : chart.series) w = std::max(w, Canvas::text_width(s));
        return w + 20;
    }();
    Canvas c(frame_width(kMarginLeft + plot_w + legend_w + kMarginRight, chart.title), kMarginTop + kPlotHeight + kMarginBottom);
    const Axes a{kMarginLeft, kMarginTop, plot_w, kPlotHeight, 0.0, top};
    draw_axes(c, a, chart.title, chart.y_label);

    for (std::size_t g = 0; g < chart.groups.size(); ++g) {
        const int gx = a.x0 + gap + static_cast<int>(g) * (group_w + gap);
        for (std::size_t s = 0; s < chart.series.size(); ++s) {
            const int x = gx + (group_w - bars_w) / 2 + static_cast<int>(s) * bar_w;
            const int y = a.y_of(chart.values[g][s]);
            c.fill_rect(x + 1, y, bar_w - 2, a.y0 + a.height - y, series_color(s));
        }
        c.text(gx + (group_w - Canvas::text_width(chart.groups[g])) / 2, a.y0 + a.height + 8, chart.groups[g], colors::black);
    }
    const int lx = a.x0 + plot_w + 20;
    for (std::size_t s = 0; s < chart.series.size(); ++s) {
        const int ly = a.y0 + static_cast<int>(s) * 14;
        c.fill_rect(lx, ly, 10, 7, series_color(s));
        c.text(lx + 14, ly, chart.series[s], colors::black);
    }
    return c;
}

Canvas render_box_plot(const BoxPlot& plot) {
    if (plot.boxes.empty()) throw RenderError("box plot needs at least one box");
    double lo = plot.boxes.front().min, hi = plot.boxes.front().max;
    for (const auto& b : plot.boxes) {
        lo = std::min(lo, b.min);
        hi = std::max(hi, b.max);
    }
    lo = lo >= 0 ? 0.0 : -nice_ceiling(-lo);
    hi = nice_ceiling(hi);
    if (hi <= lo) hi = lo + 1;

    const int box_w = 40, gap = 40;
    int label_w = box_w;
    for (const auto& b : plot.boxes) label_w = std::max(label_w, Canvas::text_width(b.label));
    const int slot = std::max(box_w, label_w) + gap;
    const int plot_w = static_cast<int>(plot.boxes.size()) * slot + gap;
    Canvas c(frame_width(kMarginLeft + plot_w + kMarginRight, plot.title), kMarginTop + kPlotHeight + kMarginBottom);
    const Axes a{kMarginLeft, kMarginTop, plot_w, kPlotHeight, lo, hi};
    draw_axes(c, a, plot.title, plot.y_label);

    for (std::size_t i = 0; i < plot.boxes.size(); ++i) {
        const auto& b = plot.boxes[i];
        const int cx = a.x0 + gap + static_cast<int>(i) * slot + (slot - gap) / 2;
        const Rgb col = series_color(i);
        c.vline(cx, a.y_of(b.max), a.y_of(b.q3), colors::black);
        c.vline(cx, a.y_of(b.q1), a.y_of(b.min), colors::black);
        c.hline(cx - box_w / 4, cx + box_w / 4, a.y_of(b.max), colors::black);
        c.hline(cx - box_w / 4, cx + box_w / 4, a.y_of(b.min), colors::black);
        const int top = a.y_of(b.q3), bottom = a.y_of(b.q1);
        c.fill_rect(cx - box_w / 2, top, box_w, std::max(1, bottom - top), col);
        c.rect(cx - box_w / 2, top, box_w, std::max(1, bottom - top + 1), colors::black);
        const int my = a.y_of(b.median);
        c.hline(cx - box_w / 2, cx + box_w / 2 - 1, my, colors::black);
        c.hline(cx - box_w / 2, cx + box_w / 2 - 1, my + 1, colors::black);
        c.text(cx - Canvas::text_width(b.label) / 2, a.y0 + a.height + 8, b.label, colors::black);
    }
    return c;
}

Canvas render_table(const std::string& title, const std::vector<std::vector<std::string>>& rows) {
    if (rows.empty()) throw RenderError("table needs at least a header row");
    std::vector<int> widths;
    for (const auto& r : rows)
        for (std::size_t j = 0; j < r.size(); ++j) {
            if (widths.size() <= j) widths.push_back(0);
            widths[j] = std::max(widths[j], Canvas::text_width(r[j]));
        }
    const int pad = 12, row_h = 18;
    int total_w = pad;
    for (int w : widths) total_w += w + pad;
    total_w = std::max(total_w, Canvas::text_width(title, 2) + 2 * pad);
    Canvas c(total_w, 40 + static_cast<int>(rows.size()) * row_h + pad);
    c.text(pad, 10, title, colors::black, 2);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const int y = 40 + static_cast<int>(i) * row_h;
        if (i == 0) c.fill_rect(0, y - 5, c.width(), row_h, colors::light);
        int x = pad;
        for (std::size_t j = 0; j < rows[i].size(); ++j) {
            c.text(x, y, rows[i][j], colors::black);
            x += widths[j] + pad;
        }
    }
    return c;
}

}  // namespace cafe::viz
