#include "protos/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include <openssl/evp.h>

#include "protos/errors.hpp"

namespace protos {

using nlohmann::json;

namespace {

std::string fmt(double v, int digits = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string hex_color(const std::array<std::uint8_t, 3>& c) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        switch (ch) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += ch;
        }
    }
    return out;
}

std::string png_data_uri(const Image& image) {
    const std::vector<std::uint8_t> png = encode_png(image);
    return "data:image/png;base64," + base64_encode(png);
}

const char* kSvgHeader = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";

}  // namespace

std::vector<RadarAxis> radar_axes(const json& report, std::vector<std::string>& missing) {
    std::vector<RadarAxis> axes;
    const double j = std::max(1.0, report.value("num_prototypes", 0.0));
    auto size_axis = [&](const char* key, const char* label) {
        if (report.contains(key) && report[key].is_number())
            axes.push_back({label, 1.0 - std::min(report[key].get<double>() / j, 1.0)});
        else
            missing.emplace_back(key);
    };
    auto plain = [&](const json* obj, const char* key, const char* label, const std::string& name) {
        if (obj && obj->contains(key) && (*obj)[key].is_number())
            axes.push_back({label, std::clamp((*obj)[key].get<double>(), 0.0, 1.0)});
        else
            missing.push_back(name);
    };
    const json* radar = report.contains("radar") ? &report["radar"] : nullptr;
    plain(&report, "accuracy", "Acc.", "accuracy");
    size_axis("global_size", "Glob. Size");
    size_axis("local_size", "Loc. Size");
    plain(radar, "completeness", "Compl.", "radar.completeness");
    plain(radar, "correctness", "Correct.", "radar.correctness");
    plain(radar, "contrastivity", "Contrast.", "radar.contrastivity");
    plain(&report, "consistency", "Consist.", "consistency");
    plain(&report, "stability", "Stabil.", "stability");
    return axes;
}

std::string radar_svg(std::span<const RadarAxis> axes, const std::string& title) {
    if (axes.size() < 3) throw RejectedInput("a radar plot needs at least three axes");
    constexpr double cx = 250, cy = 260, radius = 170;
    std::ostringstream s;
    s << kSvgHeader << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"500\" height=\"520\" viewBox=\"0 0 500 520\">\n";
    s << "<rect width=\"500\" height=\"520\" fill=\"white\"/>\n";
    s << "<text x=\"250\" y=\"30\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"18\">" << escape(title)
      << "</text>\n";
    const std::size_t n = axes.size();
    auto point = [&](std::size_t i, double r) {
        const double a = -std::numbers::pi / 2 + 2 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
        return std::pair{cx + r * std::cos(a), cy + r * std::sin(a)};
    };
    for (int ring = 1; ring <= 4; ++ring) {
        s << "<polygon fill=\"none\" stroke=\"#cccccc\" points=\"";
        for (std::size_t i = 0; i < n; ++i) {
            auto [x, y] = point(i, radius * ring / 4.0);
            s << fmt(x) << ',' << fmt(y) << ' ';
        }
        s << "\"/>\n";
    }
    for (std::size_t i = 0; i < n; ++i) {
        auto [x, y] = point(i, radius);
        s << "<line x1=\"" << fmt(cx) << "\" y1=\"" << fmt(cy) << "\" x2=\"" << fmt(x) << "\" y2=\"" << fmt(y)
          << "\" stroke=\"#999999\"/>\n";
        auto [lx, ly] = point(i, radius + 28);
        s << "<text x=\"" << fmt(lx) << "\" y=\"" << fmt(ly + 5)
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" << escape(axes[i].label) << " "
          << fmt(100.0 * axes[i].value, 0) << "</text>\n";
    }
    s << "<polygon fill=\"#3b7dd8\" fill-opacity=\"0.35\" stroke=\"#1f4e99\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < n; ++i) {
        auto [x, y] = point(i, radius * std::clamp(axes[i].value, 0.0, 1.0));
        s << fmt(x) << ',' << fmt(y) << ' ';
    }
    s << "\"/>\n</svg>\n";
    return s.str();
}

std::string correlation_svg(const Eigen::MatrixXd& c, const std::string& title) {
    if (c.rows() != c.cols() || c.rows() == 0) throw RejectedInput("correlation matrix must be square and non-empty");
    const Eigen::Index k = c.rows();
    const double cell = std::max(4.0, std::min(24.0, 480.0 / static_cast<double>(k)));
    const double size = cell * static_cast<double>(k);
    const double margin = 50;
    std::ostringstream s;
    s << kSvgHeader << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(size + 2 * margin + 60)
      << "\" height=\"" << fmt(size + 2 * margin) << "\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << fmt(margin) << "\" y=\"30\" font-family=\"sans-serif\" font-size=\"16\">" << escape(title)
      << "</text>\n";
    auto color = [](double v) {
        v = std::clamp(v, -1.0, 1.0);
        // blue (-1) .. white (0) .. red (+1)
        const auto lerp = [](double a, double b, double t) { return static_cast<std::uint8_t>(std::lround(a + (b - a) * t)); };
        if (v >= 0) return std::array<std::uint8_t, 3>{255, lerp(255, 40, v), lerp(255, 40, v)};
        return std::array<std::uint8_t, 3>{lerp(255, 40, -v), lerp(255, 40, -v), 255};
    };
    for (Eigen::Index r = 0; r < k; ++r)
        for (Eigen::Index col = 0; col < k; ++col)
            s << "<rect x=\"" << fmt(margin + cell * col) << "\" y=\"" << fmt(margin + cell * r) << "\" width=\""
              << fmt(cell) << "\" height=\"" << fmt(cell) << "\" fill=\"" << hex_color(color(c(r, col)))
              << "\"><title>" << r << "," << col << ": " << fmt(c(r, col), 3) << "</title></rect>\n";
    for (int t = 0; t <= 4; ++t) {
        const double v = 1.0 - t * 0.5;
        s << "<rect x=\"" << fmt(margin + size + 15) << "\" y=\"" << fmt(margin + t * size / 5) << "\" width=\"15\" height=\""
          << fmt(size / 5) << "\" fill=\"" << hex_color(color(v)) << "\"/>\n";
        s << "<text x=\"" << fmt(margin + size + 34) << "\" y=\"" << fmt(margin + t * size / 5 + 12)
          << "\" font-family=\"sans-serif\" font-size=\"10\">" << fmt(v, 1) << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

std::string metric_tables_markdown(const json& r) {
    std::ostringstream s;
    auto num = [&](const json& obj, const char* key, int digits) {
        return obj.contains(key) && obj[key].is_number() ? fmt(obj[key].get<double>(), digits) : std::string("-");
    };
    s << "# Metric report\n\n";
    s << "| Acc. | Global size | Local size | Consistency | Stability |\n|---|---|---|---|---|\n";
    s << "| " << num(r, "accuracy", 3) << " | " << num(r, "global_size", 0) << " | " << num(r, "local_size", 2) << " | "
      << num(r, "consistency", 3) << " | " << num(r, "stability", 3) << " |\n\n";
    if (r.contains("funnybirds")) {
        const json& f = r["funnybirds"];
        s << "| CSDC | PC | DC | D | BI | SD | TS | mX |\n|---|---|---|---|---|---|---|---|\n|";
        for (const char* k : {"CSDC", "PC", "DC", "D", "BI", "SD", "TS", "mX"}) s << ' ' << num(f, k, 3) << " |";
        s << "\n\n";
    }
    if (r.contains("radar")) {
        const json& q = r["radar"];
        s << "| Completeness | Correctness | Contrastivity |\n|---|---|---|\n";
        s << "| " << num(q, "completeness", 3) << " | " << num(q, "correctness", 3) << " | "
          << num(q, "contrastivity", 3) << " |\n\n";
    }
    if (r.contains("warnings") && !r["warnings"].empty()) {
        s << "Warnings:\n\n";
        for (const auto& w : r["warnings"]) s << "- " << w.get<std::string>() << "\n";
    }
    return s.str();
}

std::array<std::uint8_t, 3> prototype_color(int prototype) {
    // Hash the id, then use it as a hue so distinct ids get well-separated, saturated colors.
    const std::string key = "prototype:" + std::to_string(prototype);
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(key.data(), key.size(), digest, &len, EVP_sha256(), nullptr);
    const double hue = ((digest[0] << 8) | digest[1]) / 65536.0 * 6.0;
    const double x = 1.0 - std::abs(std::fmod(hue, 2.0) - 1.0);
    std::array<double, 3> rgb{};
    switch (static_cast<int>(hue)) {
        case 0: rgb = {1, x, 0}; break;
        case 1: rgb = {x, 1, 0}; break;
        case 2: rgb = {0, 1, x}; break;
        case 3: rgb = {0, x, 1}; break;
        case 4: rgb = {x, 0, 1}; break;
        default: rgb = {1, 0, x}; break;
    }
    std::array<std::uint8_t, 3> out{};
    for (int c = 0; c < 3; ++c) out[c] = static_cast<std::uint8_t>(std::lround(40 + 200 * rgb[c]));
    return out;
}

Image heatmap_overlay(const Image& image, std::span<const float> map, const std::array<std::uint8_t, 3>& color) {
    if (map.size() != static_cast<std::size_t>(image.height) * image.width) throw RejectedInput("heatmap size mismatch");
    const float peak = map.empty() ? 0.0f : *std::max_element(map.begin(), map.end());
    Image out = image;
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            const float w = peak > 0.0f ? 0.75f * map[static_cast<std::size_t>(y) * image.width + x] / peak : 0.0f;
            for (int c = 0; c < image.channels && c < 3; ++c) {
                const float gray = 0.5f * image.at(y, x, c) + 0.25f;
                out.at(y, x, c) = (1.0f - w) * gray + w * (color[c] / 255.0f);
            }
        }
    quantize_8bit(out);
    return out;
}

std::string score_sheet_svg(const Image& image, const Explanation& e) {
    constexpr int panel = 192, gap = 16, top = 70, caption = 40;
    const int panels = 1 + static_cast<int>(e.items.size());
    const int width = gap + panels * (panel + gap);
    const int height = top + panel + caption + gap;
    std::ostringstream s;
    s << kSvgHeader << "<svg xmlns=\"http://www.w3.org/2000/svg\" xmlns:xlink=\"http://www.w3.org/1999/xlink\" width=\""
      << width << "\" height=\"" << height << "\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << gap << "\" y=\"28\" font-family=\"sans-serif\" font-size=\"18\">Predicted class "
      << e.predicted_class << " (score " << fmt(e.class_score, 3) << ")</text>\n";
    s << "<text x=\"" << gap << "\" y=\"52\" font-family=\"sans-serif\" font-size=\"14\">" << e.items.size()
      << " of " << e.local_size << " active prototypes shown, explaining " << fmt(100.0 * e.coverage, 1)
      << "% of the score</text>\n";

    const double sx = static_cast<double>(panel) / image.width, sy = static_cast<double>(panel) / image.height;
    s << "<image x=\"" << gap << "\" y=\"" << top << "\" width=\"" << panel << "\" height=\"" << panel
      << "\" preserveAspectRatio=\"none\" style=\"image-rendering:pixelated\" xlink:href=\"" << png_data_uri(image)
      << "\"/>\n";
    for (const auto& item : e.items) {
        const auto it = std::max_element(item.map.begin(), item.map.end());
        if (it == item.map.end()) continue;
        const auto at = static_cast<int>(it - item.map.begin());
        const int py = at / image.width, px = at % image.width;
        s << "<circle cx=\"" << fmt(gap + (px + 0.5) * sx) << "\" cy=\"" << fmt(top + (py + 0.5) * sy)
          << "\" r=\"9\" fill=\"none\" stroke-width=\"3\" stroke=\"" << hex_color(prototype_color(item.prototype))
          << "\"/>\n";
    }
    s << "<text x=\"" << gap << "\" y=\"" << top + panel + 24 << "\" font-family=\"sans-serif\" font-size=\"13\">input</text>\n";

    for (std::size_t n = 0; n < e.items.size(); ++n) {
        const auto& item = e.items[n];
        const int x = gap + static_cast<int>(n + 1) * (panel + gap);
        const auto color = prototype_color(item.prototype);
        const Image overlay = heatmap_overlay(image, item.map, color);
        s << "<image x=\"" << x << "\" y=\"" << top << "\" width=\"" << panel << "\" height=\"" << panel
          << "\" preserveAspectRatio=\"none\" style=\"image-rendering:pixelated\" xlink:href=\"" << png_data_uri(overlay)
          << "\"/>\n";
        s << "<rect x=\"" << x << "\" y=\"" << top << "\" width=\"" << panel << "\" height=\"" << panel
          << "\" fill=\"none\" stroke-width=\"4\" stroke=\"" << hex_color(color) << "\"/>\n";
        s << "<text x=\"" << x << "\" y=\"" << top + panel + 24 << "\" font-family=\"sans-serif\" font-size=\"13\">prototype "
          << item.prototype << ": " << fmt(item.importance, 3) << " ("
          << fmt(e.class_score > 0 ? 100.0 * item.importance / e.class_score : 0.0, 1) << "%)</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

}  // namespace protos
