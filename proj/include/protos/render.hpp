#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "protos/image.hpp"
#include "protos/model.hpp"

namespace protos {

struct RadarAxis {
    std::string label;
    double value = 0.0;  // in [0, 1], outward is better
};

/// The eight radar axes from a metric report. Size axes map to 1 - min(size / J, 1).
/// Names of absent metrics go to `missing`; their axes are omitted.
std::vector<RadarAxis> radar_axes(const nlohmann::json& report, std::vector<std::string>& missing);

std::string radar_svg(std::span<const RadarAxis> axes, const std::string& title);
std::string correlation_svg(const Eigen::MatrixXd& correlation, const std::string& title);
std::string metric_tables_markdown(const nlohmann::json& report);

/// Stable color for a prototype id, identical across images and runs.
std::array<std::uint8_t, 3> prototype_color(int prototype);

/// Blends `map` (normalized to its own maximum) over the image in the given color.
Image heatmap_overlay(const Image& image, std::span<const float> map, const std::array<std::uint8_t, 3>& color);

/// Header with prediction and coverage, an overview panel with the top-k prototype locations, then one
/// heatmap panel per explanation item with its importance.
std::string score_sheet_svg(const Image& image, const Explanation& explanation);

}  // namespace protos
