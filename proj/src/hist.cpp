#include "rbflow/hist.hpp"

#include <algorithm>
#include <cmath>

#include "rbflow/errors.hpp"

namespace rbflow {

namespace {
constexpr char kNames[4] = {'x', 'y', 'z', 'w'};

int bin_of(double v, double lo, double hi, int bins) {
  const int b = static_cast<int>(std::floor((v - lo) / (hi - lo) * bins));
  return std::clamp(b, 0, bins - 1);
}
}  // namespace

long long Histogram2D::total() const {
  long long s = 0;
  for (long long c : counts) s += c;
  return s;
}

std::string Histogram2D::csv() const {
  std::string out = "i,j,";
  out += kNames[pair[0]];
  out += "_lo,";
  out += kNames[pair[0]];
  out += "_hi,";
  out += kNames[pair[1]];
  out += "_lo,";
  out += kNames[pair[1]];
  out += "_hi,count\n";
  auto edge = [&](int axis, int k) { return lo[axis] + (hi[axis] - lo[axis]) * k / bins; };
  for (int i = 0; i < bins; ++i) {
    for (int j = 0; j < bins; ++j) {
      out += std::to_string(i) + "," + std::to_string(j) + "," + format_double(edge(0, i)) + "," +
             format_double(edge(0, i + 1)) + "," + format_double(edge(1, j)) + "," +
             format_double(edge(1, j + 1)) + "," + std::to_string(at(i, j)) + "\n";
    }
  }
  return out;
}

std::vector<Histogram2D> hist_emit(const Dataset& data, const std::vector<std::array<int, 2>>& pairs,
                                   int bins) {
  if (bins < 8) throw ValidationError("histograms need at least 8 bins");
  if (data.frames.empty()) throw ValidationError("cannot histogram an empty dataset");
  std::vector<Histogram2D> out;
  for (const auto& pr : pairs) {
    if (pr[0] < 0 || pr[0] > 3 || pr[1] < 0 || pr[1] > 3 || pr[0] == pr[1])
      throw ValidationError("component pairs need two distinct indices in 0..3");
    Histogram2D h;
    h.pair = pr;
    h.bins = bins;
    for (int a = 0; a < 2; ++a) h.lo[a] = pr[a] == 3 ? 0.0 : -1.0;
    h.counts.assign(static_cast<std::size_t>(bins) * bins, 0);
    for (const auto& f : data.frames) {
      for (const auto& p : f.poses) {
        const Vec4 q = canonical(p.q).coeffs();
        const int i = bin_of(q[pr[0]], h.lo[0], h.hi[0], bins);
        const int j = bin_of(q[pr[1]], h.lo[1], h.hi[1], bins);
        ++h.counts[static_cast<std::size_t>(i) * bins + j];
      }
    }
    out.push_back(std::move(h));
  }
  return out;
}

std::string hist_file_name(const std::array<int, 2>& pair) {
  return std::string("hist_") + kNames[pair[0]] + kNames[pair[1]] + ".csv";
}

}  // namespace rbflow
