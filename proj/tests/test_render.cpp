#include <doctest.h>

#include "protos/errors.hpp"
#include "protos/render.hpp"

using namespace protos;

namespace {

int count(const std::string& text, const std::string& needle) {
    int n = 0;
    for (std::size_t p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) ++n;
    return n;
}

nlohmann::json sample_report() {
    return {{"num_prototypes", 300},
            {"accuracy", 0.95},
            {"global_size", 30},
            {"local_size", 6.0},
            {"radar", {{"completeness", 0.9}, {"correctness", 0.6}, {"contrastivity", 0.99}}},
            {"consistency", 0.8},
            {"stability", 0.7}};
}

}  // namespace

TEST_CASE("radar axes: sizes are inverted against the prototype budget") {
    std::vector<std::string> missing;
    const auto axes = radar_axes(sample_report(), missing);
    REQUIRE(axes.size() == 8u);
    CHECK(missing.empty());
    CHECK(axes[0].value == 0.95);
    CHECK(axes[1].value == doctest::Approx(0.9));
    CHECK(axes[2].value == doctest::Approx(0.98));

    nlohmann::json big = sample_report();
    big["global_size"] = 900;
    CHECK(radar_axes(big, missing)[1].value == 0.0);

    nlohmann::json partial = sample_report();
    partial.erase("stability");
    partial.erase("radar");
    missing.clear();
    CHECK(radar_axes(partial, missing).size() == 4u);
    CHECK(missing.size() == 4u);
}

TEST_CASE("radar svg: deterministic and rejects too few axes") {
    std::vector<std::string> missing;
    const auto axes = radar_axes(sample_report(), missing);
    const std::string a = radar_svg(axes, "run"), b = radar_svg(axes, "run");
    CHECK(a == b);
    CHECK(a.find("Glob. Size") != std::string::npos);
    CHECK(a.find("<svg") != std::string::npos);
    CHECK_THROWS_AS(radar_svg(std::span(axes).first(2), "x"), RejectedInput);
}

TEST_CASE("prototype colors are stable and mostly distinct") {
    CHECK(prototype_color(17) == prototype_color(17));
    int same = 0;
    for (int j = 0; j < 50; ++j) same += prototype_color(j) == prototype_color(j + 1);
    CHECK(same == 0);
}

TEST_CASE("score sheet: one overview panel plus one per item") {
    Image img(24, 24);
    Explanation e;
    e.predicted_class = 3;
    e.class_score = 1.5f;
    e.height = e.width = 24;
    e.items.push_back({4, 1.0f, std::vector<float>(24 * 24, 0.5f)});
    e.items.push_back({9, 0.5f, std::vector<float>(24 * 24, 0.1f)});
    const std::string svg = score_sheet_svg(img, e);
    CHECK(count(svg, "<image ") == 3);
    CHECK(svg.find("prototype 4") != std::string::npos);
    CHECK(svg == score_sheet_svg(img, e));
}

TEST_CASE("heatmap overlay: dimmed image where the map is zero, full tint at the peak") {
    Image img(4, 4);
    for (auto& v : img.data) v = 0.25f;
    std::vector<float> map(16, 0.0f);
    map[5] = 2.0f;
    const Image out = heatmap_overlay(img, map, {255, 0, 0});
    CHECK(out.at(0, 0, 0) == doctest::Approx(96.0f / 255.0f));  // 0.5 * 0.25 + 0.25, on the 8-bit grid
    CHECK(out.at(0, 0, 1) == out.at(0, 0, 0));
    CHECK(out.at(1, 1, 0) > 0.8f);
    CHECK(out.at(1, 1, 1) < 0.2f);
}

TEST_CASE("metric tables list the present metrics") {
    const std::string md = metric_tables_markdown(sample_report());
    CHECK(md.find("| 0.950 | 30 | 6.00 | 0.800 | 0.700 |") != std::string::npos);
    CHECK(md.find("Contrastivity") != std::string::npos);
    CHECK(md.find("CSDC") == std::string::npos);
}
