#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "mast/eval.hpp"

namespace mast {

/// CSV with a header row; the first column holds the row labels.
void write_matrix_csv(const std::filesystem::path& path, const Matrix& m,
                      const std::vector<std::string>& row_labels,
                      const std::vector<std::string>& col_labels);

/// One row per magnitude: magnitude, unmasked, then one column per mask.
void write_curve_csv(const std::filesystem::path& path, const InvarianceCurve& curve,
                     const std::vector<std::string>& mask_labels);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);

struct Series {
  std::string name;
  std::vector<double> y;
};

/// Line chart of several series over a shared x axis.
void render_curves_svg(const std::filesystem::path& path, const std::vector<double>& x,
                       const std::vector<Series>& series, const std::string& title);

/// Heatmap over [lo, hi] with the fixed colormap and cell labels.
void render_heatmap_svg(const std::filesystem::path& path, const Matrix& m,
                        const std::vector<std::string>& labels, double lo, double hi);
void render_heatmap_ppm(const std::filesystem::path& path, const Matrix& m, double lo, double hi,
                        std::size_t cell = 16);

/// Fixed five-stop colormap (dark blue to yellow); t is clamped to [0,1].
std::array<unsigned char, 3> colormap(double t);

}  // namespace mast
