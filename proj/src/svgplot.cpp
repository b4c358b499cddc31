#include "nr2d3/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace nr2d3 {
namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr int kLeft = 64;
constexpr int kRight = 24;
constexpr int kTop = 36;
constexpr int kBottom = 48;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string fmt(double v, const char* spec = "%.6g") {
    char buf[40];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '&')
            out += "&amp;";
        else if (c == '<')
            out += "&lt;";
        else if (c == '>')
            out += "&gt;";
        else
            out += c;
    }
    return out;
}

struct Range {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();

    void include(double v) {
        if (!std::isfinite(v)) return;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    void finalize() {
        if (lo > hi) {
            lo = 0.0;
            hi = 1.0;
        }
        if (lo == hi) {
            lo -= 1.0;
            hi += 1.0;
        }
        const double pad = 0.05 * (hi - lo);
        lo -= pad;
        hi += pad;
    }
    double unit(double v) const { return (v - lo) / (hi - lo); }
};

}  // namespace

std::string svg_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                      const std::vector<PlotSeries>& series, bool scatter) {
    Range rx, ry;
    for (const PlotSeries& s : series) {
        if (s.x.size() != s.y.size()) throw std::invalid_argument("svg_chart: series '" + s.label + "' x/y mismatch");
        for (double v : s.x) rx.include(v);
        for (double v : s.y) ry.include(v);
    }
    rx.finalize();
    ry.finalize();

    auto px = [&](double v) { return kLeft + rx.unit(v) * (kWidth - kLeft - kRight); };
    auto py = [&](double v) { return kHeight - kBottom - ry.unit(v) * (kHeight - kTop - kBottom); };

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(kWidth) + "\" height=\"" +
           std::to_string(kHeight) + "\" viewBox=\"0 0 " + std::to_string(kWidth) + " " + std::to_string(kHeight) +
           "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<text x=\"" + std::to_string(kWidth / 2) + "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\""
           " font-size=\"15\">" + escape(title) + "</text>\n";

    // Frame and ticks.
    out += "<rect x=\"" + std::to_string(kLeft) + "\" y=\"" + std::to_string(kTop) + "\" width=\"" +
           std::to_string(kWidth - kLeft - kRight) + "\" height=\"" + std::to_string(kHeight - kTop - kBottom) +
           "\" fill=\"none\" stroke=\"#888\"/>\n";
    const int ticks = 5;
    for (int i = 0; i <= ticks; ++i) {
        const double fx = rx.lo + (rx.hi - rx.lo) * i / ticks;
        const double fy = ry.lo + (ry.hi - ry.lo) * i / ticks;
        const double cx = px(fx);
        const double cy = py(fy);
        out += "<line x1=\"" + fmt(cx, "%.2f") + "\" y1=\"" + std::to_string(kHeight - kBottom) + "\" x2=\"" +
               fmt(cx, "%.2f") + "\" y2=\"" + std::to_string(kHeight - kBottom + 5) + "\" stroke=\"#888\"/>\n";
        out += "<text x=\"" + fmt(cx, "%.2f") + "\" y=\"" + std::to_string(kHeight - kBottom + 18) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + fmt(fx, "%.4g") +
               "</text>\n";
        out += "<line x1=\"" + std::to_string(kLeft - 5) + "\" y1=\"" + fmt(cy, "%.2f") + "\" x2=\"" +
               std::to_string(kLeft) + "\" y2=\"" + fmt(cy, "%.2f") + "\" stroke=\"#888\"/>\n";
        out += "<text x=\"" + std::to_string(kLeft - 8) + "\" y=\"" + fmt(cy + 4, "%.2f") +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + fmt(fy, "%.4g") + "</text>\n";
    }
    out += "<text x=\"" + std::to_string((kLeft + kWidth - kRight) / 2) + "\" y=\"" + std::to_string(kHeight - 12) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + escape(x_label) + "</text>\n";
    out += "<text x=\"16\" y=\"" + std::to_string((kTop + kHeight - kBottom) / 2) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 " +
           std::to_string((kTop + kHeight - kBottom) / 2) + ")\">" + escape(y_label) + "</text>\n";

    for (std::size_t si = 0; si < series.size(); ++si) {
        const PlotSeries& s = series[si];
        const char* color = kPalette[si % (sizeof kPalette / sizeof kPalette[0])];
        if (scatter) {
            for (std::size_t i = 0; i < s.x.size(); ++i) {
                if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
                out += "<circle cx=\"" + fmt(px(s.x[i]), "%.2f") + "\" cy=\"" + fmt(py(s.y[i]), "%.2f") +
                       "\" r=\"3\" fill=\"" + color + "\"/>\n";
            }
        } else {
            std::string pts;
            for (std::size_t i = 0; i < s.x.size(); ++i) {
                if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
                if (!pts.empty()) pts += " ";
                pts += fmt(px(s.x[i]), "%.2f") + "," + fmt(py(s.y[i]), "%.2f");
            }
            out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\"/>\n";
        }
        const int ly = kTop + 14 + 16 * static_cast<int>(si);
        out += "<rect x=\"" + std::to_string(kWidth - kRight - 130) + "\" y=\"" + std::to_string(ly - 9) +
               "\" width=\"10\" height=\"10\" fill=\"" + color + "\"/>\n";
        out += "<text x=\"" + std::to_string(kWidth - kRight - 115) + "\" y=\"" + std::to_string(ly) +
               "\" font-family=\"sans-serif\" font-size=\"11\">" + escape(s.label) + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw std::runtime_error("short write to '" + path + "'");
}

}  // namespace nr2d3
