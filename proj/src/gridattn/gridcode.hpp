#pragma once
#include <array>
#include <cstdint>
#include <vector>

#include "io.hpp"
#include "matrix.hpp"

namespace gridattn {

struct Point {
  std::int64_t x = 0, y = 0;
  bool operator==(const Point&) const = default;
};

struct GridCodeConfig {
  std::size_t num_frequencies = 9;
  std::size_t num_phases = 100;  // must be a perfect square
  double base_frequency = 0.0028 * 2.0 * 3.14159265358979323846;  // radians per unit
  double frequency_scaling = 1.4142135623730950488;               // sqrt(2)
  std::int64_t coverage_extent = 1000;  // points live in [0, coverage_extent)^2

  void validate() const;  // throws CliError on violation
  json to_json() const;
  static GridCodeConfig from_json(const json& j);
};

// One cell = (frequency band, phase offset). Offsets are stored in phase
// space: the square sub-lattice 2*pi*(i,j)/sqrt(N_p), identical across bands,
// which corresponds to a sqrt(N_p) x sqrt(N_p) lattice spanning one spatial
// period of each band, anchored at the origin.
struct GridCodebook {
  GridCodeConfig config;
  std::vector<double> frequencies;              // per band
  std::vector<std::array<double, 2>> offsets;   // per phase index, shared across bands

  std::size_t num_cells() const { return config.num_frequencies * config.num_phases; }
  json to_json() const;
  static GridCodebook from_json(const json& j);
  std::uint64_t hash() const { return json_hash(to_json()); }
};

GridCodebook build_codebook(const GridCodeConfig& config);

// Activation of every cell at an integer point; components in [0,3].
/// Cells are ordered band-major: cell (f,p) sits at index f*N_p + p.
std::vector<double> encode(const GridCodebook& cb, Point a);

// Rows follow the input order. Parallelized over points.
Matrix encode_batch(const GridCodebook& cb, const std::vector<Point>& pts);

// All integer points of [lo, hi]^2 in row-major (x-major) order.
std::vector<Point> lattice_points(std::int64_t lo, std::int64_t hi);

}  // namespace gridattn
