#include "gridcode.hpp"

#include <cmath>

namespace gridattn {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kHalfSqrt3 = 0.86602540378443864676;  // sin(pi/3)

bool is_perfect_square(std::size_t n, std::size_t& root) {
  root = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  return root * root == n;
}
}  // namespace

void GridCodeConfig::validate() const {
  std::size_t root;
  if (num_frequencies < 1) throw CliError("config_error", "num_frequencies must be >= 1");
  if (num_phases < 1 || !is_perfect_square(num_phases, root))
    throw CliError("config_error", "num_phases must be a positive perfect square");
  if (!(base_frequency > 0.0)) throw CliError("config_error", "base_frequency must be positive");
  if (!(frequency_scaling > 0.0))
    throw CliError("config_error", "frequency_scaling must be positive");
  if (coverage_extent < 1) throw CliError("config_error", "coverage_extent must be >= 1");
}

json GridCodeConfig::to_json() const {
  return {{"num_frequencies", num_frequencies},
          {"num_phases", num_phases},
          {"base_frequency", base_frequency},
          {"frequency_scaling", frequency_scaling},
          {"coverage_extent", coverage_extent}};
}

GridCodeConfig GridCodeConfig::from_json(const json& j) {
  GridCodeConfig c;
  c.num_frequencies = j.at("num_frequencies").get<std::size_t>();
  c.num_phases = j.at("num_phases").get<std::size_t>();
  c.base_frequency = j.at("base_frequency").get<double>();
  c.frequency_scaling = j.at("frequency_scaling").get<double>();
  c.coverage_extent = j.at("coverage_extent").get<std::int64_t>();
  c.validate();
  return c;
}

json GridCodebook::to_json() const {
  json offs = json::array();
  for (const auto& o : offsets) offs.push_back({o[0], o[1]});
  return {{"version", 1},
          {"config", config.to_json()},
          {"frequencies", frequencies},
          {"offsets", offs},
          {"basis_angles", {0.0, kPi / 3.0, 2.0 * kPi / 3.0}}};
}

GridCodebook GridCodebook::from_json(const json& j) {
  GridCodebook cb;
  cb.config = GridCodeConfig::from_json(j.at("config"));
  cb.frequencies = j.at("frequencies").get<std::vector<double>>();
  for (const auto& o : j.at("offsets")) cb.offsets.push_back({o[0].get<double>(), o[1].get<double>()});
  return cb;
}

GridCodebook build_codebook(const GridCodeConfig& config) {
  config.validate();
  GridCodebook cb;
  cb.config = config;
  cb.frequencies.resize(config.num_frequencies);
  double f = config.base_frequency;
  for (std::size_t i = 0; i < config.num_frequencies; ++i) {
    cb.frequencies[i] = f;
    f *= config.frequency_scaling;
  }
  std::size_t root;
  is_perfect_square(config.num_phases, root);
  cb.offsets.reserve(config.num_phases);
  for (std::size_t i = 0; i < root; ++i)
    for (std::size_t j = 0; j < root; ++j)
      cb.offsets.push_back({2.0 * kPi * static_cast<double>(i) / static_cast<double>(root),
                            2.0 * kPi * static_cast<double>(j) / static_cast<double>(root)});
  return cb;
}

namespace {
void encode_into(const GridCodebook& cb, Point a, double* out) {
  const auto& cfg = cb.config;
  if (a.x < 0 || a.y < 0 || a.x >= cfg.coverage_extent || a.y >= cfg.coverage_extent)
    throw CliError("coverage_error", "point outside coverage extent",
                   {{"x", a.x}, {"y", a.y}, {"coverage_extent", cfg.coverage_extent}});
  std::size_t np = cfg.num_phases;
  for (std::size_t f = 0; f < cfg.num_frequencies; ++f) {
    double u0 = cb.frequencies[f] * static_cast<double>(a.x);
    double v0 = cb.frequencies[f] * static_cast<double>(a.y);
    for (std::size_t p = 0; p < np; ++p) {
      double u = u0 + cb.offsets[p][0];
      double v = v0 + cb.offsets[p][1];
      // basis directions at 0, pi/3, 2*pi/3
      double s = std::cos(u) + std::cos(0.5 * u + kHalfSqrt3 * v) + std::cos(-0.5 * u + kHalfSqrt3 * v);
      out[f * np + p] = s > 0.0 ? s : 0.0;
    }
  }
}
}  // namespace

std::vector<double> encode(const GridCodebook& cb, Point a) {
  std::vector<double> out(cb.num_cells());
  encode_into(cb, a, out.data());
  return out;
}

Matrix encode_batch(const GridCodebook& cb, const std::vector<Point>& pts) {
  Matrix out(pts.size(), cb.num_cells());
  // Validate serially so the error is deterministic, then fill in parallel.
  const auto& cfg = cb.config;
  for (const Point& p : pts)
    if (p.x < 0 || p.y < 0 || p.x >= cfg.coverage_extent || p.y >= cfg.coverage_extent)
      throw CliError("coverage_error", "point outside coverage extent",
                     {{"x", p.x}, {"y", p.y}, {"coverage_extent", cfg.coverage_extent}});
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(pts.size()); ++i)
    encode_into(cb, pts[static_cast<std::size_t>(i)], out.row(static_cast<std::size_t>(i)));
  return out;
}

std::vector<Point> lattice_points(std::int64_t lo, std::int64_t hi) {
  std::vector<Point> pts;
  pts.reserve(static_cast<std::size_t>((hi - lo + 1) * (hi - lo + 1)));
  for (std::int64_t x = lo; x <= hi; ++x)
    for (std::int64_t y = lo; y <= hi; ++y) pts.push_back({x, y});
  return pts;
}

}  // namespace gridattn
