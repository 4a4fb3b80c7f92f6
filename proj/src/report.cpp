#include "mast/report.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mast {

namespace {

std::ofstream open_out(const std::filesystem::path& path, bool binary = false) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

void check(std::ofstream& os, const std::filesystem::path& path) {
  os.flush();
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::string number(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string hex(const std::array<unsigned char, 3>& rgb) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
  return buf;
}

const std::array<std::array<unsigned char, 3>, 8> kPalette = {{{31, 119, 180},
                                                               {255, 127, 14},
                                                               {44, 160, 44},
                                                               {214, 39, 40},
                                                               {148, 103, 189},
                                                               {140, 86, 75},
                                                               {227, 119, 194},
                                                               {127, 127, 127}}};

}  // namespace

std::array<unsigned char, 3> colormap(double t) {
  static constexpr double stops[5][3] = {
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  if (std::isnan(t)) return {128, 128, 128};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(t));
  const double f = t - i;
  std::array<unsigned char, 3> out{};
  for (int c = 0; c < 3; ++c) {
    out[c] = static_cast<unsigned char>(std::lround(stops[i][c] + f * (stops[i + 1][c] - stops[i][c])));
  }
  return out;
}

void write_matrix_csv(const std::filesystem::path& path, const Matrix& m,
                      const std::vector<std::string>& row_labels,
                      const std::vector<std::string>& col_labels) {
  if (row_labels.size() != m.rows || col_labels.size() != m.cols) {
    throw ContractError("write_matrix_csv: label count does not match the matrix");
  }
  auto os = open_out(path);
  os << "row";
  for (const auto& c : col_labels) os << ',' << c;
  os << '\n';
  for (std::size_t r = 0; r < m.rows; ++r) {
    os << row_labels[r];
    for (std::size_t c = 0; c < m.cols; ++c) os << ',' << number(m(r, c));
    os << '\n';
  }
  check(os, path);
}

void write_curve_csv(const std::filesystem::path& path, const InvarianceCurve& curve,
                     const std::vector<std::string>& mask_labels) {
  if (mask_labels.size() != curve.subspace.size()) {
    throw ContractError("write_curve_csv: one label per mask column required");
  }
  auto os = open_out(path);
  os << "magnitude,unmasked";
  for (const auto& l : mask_labels) os << ',' << l;
  os << '\n';
  for (std::size_t i = 0; i < curve.magnitudes.size(); ++i) {
    os << number(curve.magnitudes[i]) << ',' << number(curve.unmasked[i]);
    for (const auto& s : curve.subspace) os << ',' << number(s[i]);
    os << '\n';
  }
  check(os, path);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  auto os = open_out(path);
  os << j.dump(2) << '\n';
  check(os, path);
}

void render_curves_svg(const std::filesystem::path& path, const std::vector<double>& x,
                       const std::vector<Series>& series, const std::string& title) {
  constexpr double W = 640, H = 420, left = 60, right = 160, top = 40, bottom = 50;
  double x0 = x.empty() ? 0.0 : *std::min_element(x.begin(), x.end());
  double x1 = x.empty() ? 1.0 : *std::max_element(x.begin(), x.end());
  double y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (double v : s.y)
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
  if (y0 > y1) y0 = 0.0, y1 = 1.0;
  if (x1 == x0) x1 = x0 + 1.0;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const auto px = [&](double v) { return left + (v - x0) / (x1 - x0) * (W - left - right); };
  const auto py = [&](double v) { return H - bottom - (v - y0) / (y1 - y0) * (H - top - bottom); };

  auto os = open_out(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
     << "</text>\n"
     << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
     << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4.0, yv = y0 + (y1 - y0) * t / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - bottom + 18 << "\" text-anchor=\"middle\" font-size=\"11\">"
       << number(std::round(xv * 1000) / 1000) << "</text>\n"
       << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
       << number(std::round(yv * 1000) / 1000) << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const std::string color = hex(kPalette[s % kPalette.size()]);
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < std::min(x.size(), series[s].y.size()); ++i) {
      if (std::isfinite(series[s].y[i])) os << px(x[i]) << ',' << py(series[s].y[i]) << ' ';
    }
    os << "\"/>\n";
    const double ly = top + 18.0 * static_cast<double>(s);
    os << "<rect x=\"" << W - right + 12 << "\" y=\"" << ly << "\" width=\"12\" height=\"12\" fill=\"" << color
       << "\"/>\n<text x=\"" << W - right + 30 << "\" y=\"" << ly + 10 << "\" font-size=\"12\">"
       << escape(series[s].name) << "</text>\n";
  }
  os << "</svg>\n";
  check(os, path);
}

void render_heatmap_svg(const std::filesystem::path& path, const Matrix& m,
                        const std::vector<std::string>& labels, double lo, double hi) {
  constexpr double cell = 28, margin = 130;
  const double span = hi > lo ? hi - lo : 1.0;
  auto os = open_out(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << margin + cell * m.cols + 10 << "\" height=\""
     << margin + cell * m.rows + 10 << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      os << "<rect x=\"" << margin + cell * c << "\" y=\"" << margin + cell * r << "\" width=\"" << cell
         << "\" height=\"" << cell << "\" fill=\"" << hex(colormap((m(r, c) - lo) / span)) << "\"><title>"
         << number(m(r, c)) << "</title></rect>\n";
    }
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::string l = escape(labels[i]);
    if (i < m.rows) {
      os << "<text x=\"" << margin - 6 << "\" y=\"" << margin + cell * i + cell * 0.65
         << "\" text-anchor=\"end\" font-size=\"11\">" << l << "</text>\n";
    }
    if (i < m.cols) {
      const double x = margin + cell * i + cell * 0.6;
      os << "<text x=\"" << x << "\" y=\"" << margin - 6 << "\" font-size=\"11\" transform=\"rotate(-60 " << x
         << ' ' << margin - 6 << ")\">" << l << "</text>\n";
    }
  }
  os << "</svg>\n";
  check(os, path);
}

void render_heatmap_ppm(const std::filesystem::path& path, const Matrix& m, double lo, double hi,
                        std::size_t cell) {
  const double span = hi > lo ? hi - lo : 1.0;
  const std::size_t w = m.cols * cell, h = m.rows * cell;
  auto os = open_out(path, true);
  os << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto rgb = colormap((m(y / cell, x / cell) - lo) / span);
      os.write(reinterpret_cast<const char*>(rgb.data()), 3);
    }
  }
  check(os, path);
}

}  // namespace mast
