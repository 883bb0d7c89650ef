#pragma once

// High points and the fractal observables built on them: maxima, cluster
// and pair counts, the biggest uniformly high box, and power-law fits.

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <set>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "membrane/gaussian.hpp"
#include "membrane/lattice.hpp"
#include "membrane/theory.hpp"

namespace membrane {

/// sqrt(2 d g) * level * log N: the level-eta threshold of a field whose
/// variance grows like g log N on a box of N^d sites.
struct LevelThreshold {
  double level = 0;
  int N = 1;
  double rate = 0;

  double value() const { return rate * level * std::log(double(N)); }

  static LevelThreshold for_model(Model model, int d, double level, int N) {
    if (!(level > -1 && level < 1)) throw std::domain_error("level must lie in (-1, 1)");
    const double g = model == Model::membrane ? theory::g_const() : theory::dgff_g_const();
    return {level, N, theory::max_rate(d, g)};
  }
  static LevelThreshold membrane(double level, int N) {
    return for_model(Model::membrane, 4, level, N);
  }
};

namespace detail {

template <class F>
void for_each_site(const LatticeBox& region, F&& f) {
  for (Index i = 0; i < region.size(); ++i) f(region.site(i));
}
template <class F>
void for_each_site(const Region& region, F&& f) {
  for (const Site& x : region.members) f(x);
}

inline std::int64_t squared_distance(const Site& a, const Site& b) {
  std::int64_t s = 0;
  for (int k = 0; k < kMaxDim; ++k) s += std::int64_t(a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

/// |y - x|_2 <= radius on integer points, robust to radius = N^beta landing
/// on an integer up to round-off.
inline bool within(std::int64_t dist2, double radius) {
  return double(dist2) <= radius * radius * (1 + 1e-12) + 1e-12;
}

}  // namespace detail

/// All sites of the region whose value is at or above the threshold, in
/// lexicographic order.
template <class Domain>
std::vector<Site> high_points(const FieldSample& s, double threshold, const Domain& region) {
  std::vector<Site> out;
  detail::for_each_site(region, [&](const Site& x) {
    if (s.at(x) >= threshold) out.push_back(x);
  });
  return out;
}

/// Argmax over the region; ties go to the lowest site index.
template <class Domain>
std::pair<Site, double> max_in_region(const FieldSample& s, const Domain& region) {
  std::optional<std::pair<Site, double>> best;
  detail::for_each_site(region, [&](const Site& x) {
    const double v = s.at(x);
    if (!best || v > best->second) best = {x, v};
  });
  if (!best) throw EmptyRegionError("max over an empty region");
  return *best;
}

/// |{y in bulk : phi_y >= threshold, r_inner < |y - x|_2 <= r_outer}|.
/// r_inner < 0 includes the center.
inline std::int64_t annulus_count(const FieldSample& s, double threshold, const LatticeBox& bulk,
                                  const Site& x, double r_inner, double r_outer) {
  const int reach = int(std::floor(r_outer + 1e-9));
  Site lo{}, hi{};
  for (int k = 0; k < bulk.dim(); ++k) {
    lo[k] = std::max(bulk.lo()[k], x[k] - reach);
    hi[k] = std::min(bulk.hi()[k], x[k] + reach);
    if (lo[k] > hi[k]) return 0;
  }
  const LatticeBox window = LatticeBox::from_corners(bulk.dim(), lo, hi, std::numeric_limits<Index>::max());
  std::int64_t count = 0;
  for (Index i = 0; i < window.size(); ++i) {
    const Site y = window.site(i);
    const auto d2 = detail::squared_distance(x, y);
    if (!detail::within(d2, r_outer)) continue;
    if (r_inner >= 0 && detail::within(d2, r_inner)) continue;
    if (s.at(y) >= threshold) ++count;
  }
  return count;
}

/// |H_N(alpha) ∩ D(x, N^beta)| with H restricted to the bulk and D the
/// Euclidean ball.
inline std::int64_t cluster_count(const FieldSample& s, const LevelThreshold& alpha,
                                  const LatticeBox& bulk, const Site& x, double beta) {
  return annulus_count(s, alpha.value(), bulk, x, -1, std::pow(double(alpha.N), beta));
}

/// For each point, the number of points (itself included) within Euclidean
/// distance radius. Uses a uniform cell grid of side ceil(radius), so only
/// the 3^d neighbouring cells are scanned.
inline std::vector<std::int64_t> neighbour_counts(const std::vector<Site>& points, double radius) {
  const int cell = std::max(1, int(std::ceil(radius - 1e-9)));
  auto key_of = [cell](const Site& x) {
    Site c{};
    for (int k = 0; k < kMaxDim; ++k) c[k] = int(std::floor(double(x[k]) / cell));
    return c;
  };
  struct Hash {
    std::size_t operator()(const Site& c) const {
      std::size_t h = 1469598103934665603ull;
      for (int v : c) h = (h ^ std::size_t(std::uint32_t(v))) * 1099511628211ull;
      return h;
    }
  };
  std::unordered_map<Site, std::vector<std::size_t>, Hash> cells;
  for (std::size_t i = 0; i < points.size(); ++i) cells[key_of(points[i])].push_back(i);

  int d = 1;
  for (const Site& x : points)
    for (int k = kMaxDim - 1; k >= d; --k)
      if (x[k] != 0) d = k + 1;

  std::vector<std::int64_t> out(points.size(), 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Site c = key_of(points[i]);
    Site off{};
    for (int k = 0; k < d; ++k) off[k] = -1;
    while (true) {
      auto it = cells.find(c + off);
      if (it != cells.end())
        for (std::size_t j : it->second)
          if (detail::within(detail::squared_distance(points[i], points[j]), radius)) ++out[i];
      int k = 0;
      while (k < d && off[k] == 1) off[k++] = -1;
      if (k == d) break;
      ++off[k];
    }
  }
  return out;
}

/// Ordered pairs (x, y) of high points with |x - y|_2 <= N^beta; pairs with
/// x = y are counted unless include_diagonal is false.
inline std::int64_t pair_count(const std::vector<Site>& high, double radius, bool include_diagonal = true) {
  std::int64_t total = 0;
  for (auto c : neighbour_counts(high, radius)) total += c;
  return include_diagonal ? total : total - std::int64_t(high.size());
}

inline std::int64_t pair_count(const FieldSample& s, const LevelThreshold& alpha, const LatticeBox& bulk,
                               double beta, bool include_diagonal = true) {
  return pair_count(high_points(s, alpha.value(), bulk), std::pow(double(alpha.N), beta),
                    include_diagonal);
}

namespace detail {

/// In-place min over a centered window of half-width r along one axis;
/// windows reaching outside the box give -inf.
inline void sliding_min_axis(const LatticeBox& box, int axis, int r, std::vector<double>& v) {
  const int len = box.side(axis);
  const Index stride = box.stride(axis);
  constexpr double lowest = -std::numeric_limits<double>::infinity();
  std::vector<double> line(static_cast<std::size_t>(len)), out(static_cast<std::size_t>(len));
  std::deque<int> dq;
  for (Index base = 0; base < box.size(); ++base) {
    if ((base / stride) % len != 0) continue;  // only line starts
    for (int i = 0; i < len; ++i) line[std::size_t(i)] = v[std::size_t(base + i * stride)];
    dq.clear();
    // Window for centre i is [i - r, i + r]; push j = i + r as i advances.
    int next = 0;
    for (int i = 0; i < len; ++i) {
      while (next < len && next <= i + r) {
        while (!dq.empty() && line[std::size_t(dq.back())] >= line[std::size_t(next)]) dq.pop_back();
        dq.push_back(next++);
      }
      while (dq.front() < i - r) dq.pop_front();
      out[std::size_t(i)] = (i - r < 0 || i + r >= len) ? lowest : line[std::size_t(dq.front())];
    }
    for (int i = 0; i < len; ++i) v[std::size_t(base + i * stride)] = out[std::size_t(i)];
  }
}

}  // namespace detail

/// Minimum of the field over the cube {y : |y - x|_inf <= r} for every x in
/// the box; -inf where the cube leaves the box.
inline std::vector<double> cube_minimum(const FieldSample& s, int r) {
  std::vector<double> v = s.values;
  for (int axis = 0; axis < s.box.dim(); ++axis) detail::sliding_min_axis(s.box, axis, r, v);
  return v;
}

/// D_N(eta): the largest a such that B(x, a) = {y : |y - x|_inf <= a/2} lies
/// in the box and stays above the threshold for some centre x in the bulk.
/// Odd whenever positive; 0 when no bulk site reaches the threshold.
inline int biggest_high_square(const FieldSample& s, double threshold, const LatticeBox& bulk) {
  auto feasible = [&](int r) {
    const auto m = cube_minimum(s, r);
    for (Index i = 0; i < bulk.size(); ++i)
      if (m[std::size_t(s.box.index(bulk.site(i)))] >= threshold) return true;
    return false;
  };
  if (!feasible(0)) return 0;
  int lo = 0, hi = s.box.side(0);
  for (int k = 1; k < s.box.dim(); ++k) hi = std::min(hi, s.box.side(k));
  hi = hi / 2 + 1;  // infeasible: the cube cannot fit
  while (hi - lo > 1) {
    const int mid = (lo + hi) / 2;
    (feasible(mid) ? lo : hi) = mid;
  }
  return 2 * lo + 1;
}

// ---------------------------------------------------------------------------
// Fits

class InsufficientDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LinearFit {
  double slope = 0;
  double intercept = 0;
  double residual_norm = 0;
  double half_width = 0;  // 95% confidence half-width of the slope
};

/// Ordinary least squares y = intercept + slope x; needs 3 distinct x.
inline LinearFit linear_fit(const std::vector<std::pair<double, double>>& xy) {
  std::set<double> distinct;
  for (const auto& p : xy) distinct.insert(p.first);
  if (distinct.size() < 3) throw InsufficientDataError("a fit needs at least 3 distinct abscissae");
  const double n = double(xy.size());
  double mx = 0, my = 0;
  for (const auto& [x, y] : xy) mx += x / n, my += y / n;
  double sxx = 0, sxy = 0;
  for (const auto& [x, y] : xy) sxx += (x - mx) * (x - mx), sxy += (x - mx) * (y - my);
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ssr = 0;
  for (const auto& [x, y] : xy) {
    const double e = y - fit.intercept - fit.slope * x;
    ssr += e * e;
  }
  fit.residual_norm = std::sqrt(ssr);
  const boost::math::students_t t(n - 2);
  fit.half_width = boost::math::quantile(boost::math::complement(t, 0.025)) * std::sqrt(ssr / (n - 2) / sxx);
  return fit;
}

struct ExponentFit {
  std::vector<std::pair<double, double>> points;  // (log N, log statistic)
  std::vector<double> ratios;                      // log statistic / log N per point
  double slope = 0;
  double intercept = 0;
  double residual_norm = 0;
  double half_width = 0;  // 95% confidence half-width of the slope
  int dropped = 0;        // non-positive statistics left out
};

/// Least squares of log statistic against log N over (N, statistic) pairs.
inline ExponentFit exponent_fit(const std::vector<std::pair<double, double>>& data) {
  ExponentFit fit;
  for (const auto& [N, stat] : data) {
    if (!(stat > 0) || !std::isfinite(stat)) {
      ++fit.dropped;
      continue;
    }
    if (!(N > 1)) throw InsufficientDataError("exponent_fit needs N > 1");
    fit.points.emplace_back(std::log(N), std::log(stat));
    fit.ratios.push_back(std::log(stat) / std::log(N));
  }
  std::set<double> distinct;
  for (const auto& p : fit.points) distinct.insert(p.first);
  if (distinct.size() < 3)
    throw InsufficientDataError("exponent_fit needs at least 3 distinct N with positive statistic");
  const LinearFit lf = linear_fit(fit.points);
  fit.slope = lf.slope;
  fit.intercept = lf.intercept;
  fit.residual_norm = lf.residual_norm;
  fit.half_width = lf.half_width;
  return fit;
}

// ---------------------------------------------------------------------------
// Records

struct HighPointRecord {
  Model model = Model::membrane;
  Sampler sampler = Sampler::exact;
  int d = 4;
  int N = 0;
  double eta = 0, alpha = 0, beta = 0, ell = 0.25;
  std::uint64_t seed = 0, replica = 0;
  std::int64_t count = 0;
  std::optional<std::int64_t> cluster, pairs;
  std::optional<int> square;
  std::optional<double> max;

  /// log(value) / log N, absent when the value is not positive.
  std::optional<double> normalized(double value) const {
    if (!(value > 0) || N < 2) return std::nullopt;
    return std::log(value) / std::log(double(N));
  }
};

}  // namespace membrane
