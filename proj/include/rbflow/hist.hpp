#pragma once

// Two-dimensional histograms of quaternion components, as plot-ready CSV.

#include <array>
#include <string>
#include <vector>

#include "rbflow/sampling.hpp"

namespace rbflow {

struct Histogram2D {
  std::array<int, 2> pair{0, 1};  // component indices in (x, y, z, w) order
  int bins = 64;
  std::array<double, 2> lo{-1.0, -1.0}, hi{1.0, 1.0};
  std::vector<long long> counts;  // row-major, first component slowest

  long long at(int i, int j) const { return counts[static_cast<std::size_t>(i) * bins + j]; }
  long long total() const;
  /// Header line then one row per bin: i, j, edges of both axes, count.
  std::string csv() const;
};

/// Histograms every body of every frame after sign canonicalization (w >= 0).
/// The w axis spans [0, 1]; x, y and z span [-1, 1].
std::vector<Histogram2D> hist_emit(const Dataset& data, const std::vector<std::array<int, 2>>& pairs,
                                   int bins = 64);

/// "hist_xy.csv" style file name for a component pair.
std::string hist_file_name(const std::array<int, 2>& pair);

}  // namespace rbflow
