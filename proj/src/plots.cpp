#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "latentsub/harness.hpp"

namespace latentsub {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 70, kRight = 160, kTop = 40, kBottom = 55;
constexpr std::array<const char*, 8> kPalette = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                                 "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string escape(const std::string& s)
{
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<':
            out += "&lt;";
            break;
        case '>':
            out += "&gt;";
            break;
        case '&':
            out += "&amp;";
            break;
        case '"':
            out += "&quot;";
            break;
        default:
            out += c;
        }
    }
    return out;
}

std::string fmt(double v)
{
    std::ostringstream s;
    if (v != 0.0 && (std::abs(v) >= 1e5 || std::abs(v) < 1e-2))
        s << std::setprecision(2) << std::scientific << v;
    else
        s << std::setprecision(4) << v;
    return s.str();
}

struct Frame {
    double x0, x1, y0, y1;
    double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
    double py(double y) const { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); }
};

void open_svg(std::ostringstream& svg, const std::string& title)
{
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
        << "</text>\n";
}

void axes(std::ostringstream& svg, const Frame& f, const std::string& x_label, const std::string& y_label,
          bool x_ticks)
{
    const double bx = kHeight - kBottom;
    svg << "<line x1=\"" << kLeft << "\" y1=\"" << bx << "\" x2=\"" << kWidth - kRight << "\" y2=\"" << bx
        << "\" stroke=\"black\"/>\n"
        << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << bx
        << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double y = f.y0 + (f.y1 - f.y0) * i / 4.0;
        svg << "<line x1=\"" << kLeft - 4 << "\" y1=\"" << f.py(y) << "\" x2=\"" << kWidth - kRight << "\" y2=\""
            << f.py(y) << "\" stroke=\"#ddd\"/>\n"
            << "<text x=\"" << kLeft - 8 << "\" y=\"" << f.py(y) + 4 << "\" text-anchor=\"end\">" << fmt(y)
            << "</text>\n";
        if (x_ticks) {
            const double x = f.x0 + (f.x1 - f.x0) * i / 4.0;
            svg << "<text x=\"" << f.px(x) << "\" y=\"" << bx + 18 << "\" text-anchor=\"middle\">" << fmt(x)
                << "</text>\n";
        }
    }
    svg << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\"" << kHeight - 12
        << "\" text-anchor=\"middle\">" << escape(x_label) << "</text>\n"
        << "<text x=\"16\" y=\"" << (kTop + bx) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
        << (kTop + bx) / 2 << ")\">" << escape(y_label) << "</text>\n";
}

void save(const std::ostringstream& svg, const std::filesystem::path& path)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out)
        throw IoError("cannot write plot " + path.string());
    out << svg.str() << "</svg>\n";
}

} // namespace

void write_line_chart(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                      const std::string& y_label, const std::filesystem::path& path)
{
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size())
            throw InvalidArgument("series '" + s.name + "' has mismatched x and y lengths");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]))
                continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    if (!std::isfinite(x0)) {
        x0 = 0;
        x1 = 1;
        y0 = 0;
        y1 = 1;
    }
    if (x1 == x0)
        x1 = x0 + 1;
    y0 = std::min(y0, 0.0);
    if (y1 == y0)
        y1 = y0 + 1;
    const Frame f{x0, x1, y0, y1 + 0.05 * (y1 - y0)};

    std::ostringstream svg;
    open_svg(svg, title);
    axes(svg, f, x_label, y_label, true);
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto* color = kPalette[k % kPalette.size()];
        const auto& s = series[k];
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            if (std::isfinite(s.x[i]) && std::isfinite(s.y[i]))
                svg << f.px(s.x[i]) << "," << f.py(s.y[i]) << " ";
        svg << "\"/>\n";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            if (std::isfinite(s.x[i]) && std::isfinite(s.y[i]))
                svg << "<circle cx=\"" << f.px(s.x[i]) << "\" cy=\"" << f.py(s.y[i]) << "\" r=\"3\" fill=\"" << color
                    << "\"/>\n";
        const double ly = kTop + 14 + 18.0 * static_cast<double>(k);
        svg << "<rect x=\"" << kWidth - kRight + 12 << "\" y=\"" << ly - 9 << "\" width=\"12\" height=\"12\" fill=\""
            << color << "\"/>\n<text x=\"" << kWidth - kRight + 30 << "\" y=\"" << ly + 2 << "\">" << escape(s.name)
            << "</text>\n";
    }
    save(svg, path);
}

void write_bar_chart(const std::vector<std::string>& labels, const std::vector<double>& values,
                     const std::string& title, const std::string& y_label, const std::filesystem::path& path)
{
    if (labels.size() != values.size())
        throw InvalidArgument("bar chart needs one value per label");
    double top = 0.0;
    for (double v : values)
        if (std::isfinite(v))
            top = std::max(top, v);
    if (top == 0.0)
        top = 1.0;
    const Frame f{0.0, static_cast<double>(std::max<std::size_t>(labels.size(), 1)), 0.0, top * 1.05};
    std::ostringstream svg;
    open_svg(svg, title);
    axes(svg, f, "", y_label, false);
    const double slot = (kWidth - kLeft - kRight) / f.x1;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double v = std::isfinite(values[i]) ? values[i] : 0.0;
        const double x = f.px(static_cast<double>(i)) + slot * 0.15;
        svg << "<rect x=\"" << x << "\" y=\"" << f.py(v) << "\" width=\"" << slot * 0.7 << "\" height=\""
            << f.py(0.0) - f.py(v) << "\" fill=\"" << kPalette[i % kPalette.size()] << "\"/>\n"
            << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << f.py(v) - 4 << "\" text-anchor=\"middle\">"
            << (std::isfinite(values[i]) ? fmt(values[i]) : std::string("n/a")) << "</text>\n"
            << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << kHeight - kBottom + 16
            << "\" text-anchor=\"middle\" font-size=\"10\">" << escape(labels[i]) << "</text>\n";
    }
    save(svg, path);
}

} // namespace latentsub
