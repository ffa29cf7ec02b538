#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <vector>

#include "tsgdebias/corpus.hpp"
#include "tsgdebias/errors.hpp"
#include "tsgdebias/synthgen.hpp"

namespace tsgdb {

/// 2-D histogram of normalized (start, end); row = start bin, column = end bin.
struct DensityGrid {
  std::size_t bins = 0;
  std::vector<std::size_t> counts;  // row-major bins x bins
  std::size_t total = 0;

  std::size_t at(std::size_t s_bin, std::size_t e_bin) const { return counts[s_bin * bins + e_bin]; }
  std::size_t& at(std::size_t s_bin, std::size_t e_bin) { return counts[s_bin * bins + e_bin]; }

  DensityGrid& operator+=(const DensityGrid& o) {
    if (o.bins != bins) throw UsageError("DensityGrid: bin counts differ");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    total += o.total;
    return *this;
  }
  friend bool operator==(const DensityGrid&, const DensityGrid&) = default;
};

/// Union of closed rectangles in normalized (start, end) space.
struct BiasRegion {
  std::vector<Rect> rectangles;

  bool contains(const NormalizedMoment& m) const {
    return std::any_of(rectangles.begin(), rectangles.end(),
                       [&](const Rect& r) { return r.contains(m.s_norm, m.e_norm); });
  }
};

inline std::size_t normalized_bin(double x, std::size_t bins) {
  const double b = std::floor(x * static_cast<double>(bins));
  if (b <= 0.0) return 0;
  return std::min(bins - 1, static_cast<std::size_t>(b));
}

inline DensityGrid density_grid(const Dataset& ds, std::size_t bins = 40) {
  if (bins == 0) throw DomainError("density_grid: bins must be >= 1");
  DensityGrid g{bins, std::vector<std::size_t>(bins * bins, 0), 0};
  for (const Sample& s : ds.samples) {
    const NormalizedMoment m = normalize_moment(s);
    g.at(normalized_bin(m.s_norm, bins), normalized_bin(m.e_norm, bins)) += 1;
    ++g.total;
  }
  return g;
}

/// Fraction of samples whose normalized moment lies in any rectangle.
inline double biased_proportion(const Dataset& ds, const BiasRegion& region) {
  if (ds.empty()) return 0.0;
  std::size_t hits = 0;
  for (const Sample& s : ds.samples) hits += region.contains(normalize_moment(s)) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(ds.size());
}

/// KL(empirical || uniform over the bins*(bins+1)/2 cells with s_bin <= e_bin).
inline double kl_to_uniform(const DensityGrid& g) {
  if (g.total == 0) throw DomainError("kl_to_uniform: empty grid");
  const double cells = static_cast<double>(g.bins * (g.bins + 1) / 2);
  const double total = static_cast<double>(g.total);
  double kl = 0.0;
  for (std::size_t c : g.counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    kl += p * std::log(p * cells);
  }
  return std::max(0.0, kl);
}

/// |s_ood - s_iid| / s_iid * 100.
inline double p_gap(double s_iid, double s_ood) {
  if (!(s_iid > 0.0)) throw DomainError("p_gap: iid score must be positive");
  return std::abs(s_ood - s_iid) / s_iid * 100.0;
}

/// bins lines of bins comma-separated counts.
inline void write_grid_csv(std::ostream& os, const DensityGrid& g) {
  for (std::size_t r = 0; r < g.bins; ++r) {
    for (std::size_t c = 0; c < g.bins; ++c) {
      if (c) os << ',';
      os << g.at(r, c);
    }
    os << '\n';
  }
}

}  // namespace tsgdb
