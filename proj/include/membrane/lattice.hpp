#pragma once

// Integer-lattice geometry: boxes, bulk regions, double boundaries, balls and
// gapped sub-box partitions.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace membrane {

inline constexpr int kMaxDim = 4;

/// Lattice point; coordinates beyond the box dimension are always 0.
using Site = std::array<int, kMaxDim>;

/// Dense site index inside a box.
using Index = std::int64_t;

inline constexpr Index kNoSite = -1;
inline constexpr Index kDefaultSiteBudget = 2'000'000;

enum class Metric { linf, l1 };

class LatticeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SiteBudgetError : public LatticeError {
 public:
  using LatticeError::LatticeError;
};

class EmptyRegionError : public LatticeError {
 public:
  using LatticeError::LatticeError;
};

inline int linf_norm(const Site& x) {
  int m = 0;
  for (int c : x) m = std::max(m, std::abs(c));
  return m;
}

inline int l1_norm(const Site& x) {
  int m = 0;
  for (int c : x) m += std::abs(c);
  return m;
}

inline double euclidean_norm(const Site& x) {
  double s = 0.0;
  for (int c : x) s += double(c) * double(c);
  return std::sqrt(s);
}

inline Site operator+(Site a, const Site& b) {
  for (int k = 0; k < kMaxDim; ++k) a[k] += b[k];
  return a;
}

inline Site operator-(Site a, const Site& b) {
  for (int k = 0; k < kMaxDim; ++k) a[k] -= b[k];
  return a;
}

inline int metric_norm(const Site& x, Metric m) {
  return m == Metric::linf ? linf_norm(x) : l1_norm(x);
}

/// Axis-aligned box of lattice sites [lo, hi] (inclusive) in dimension d,
/// with a row-major dense index. Centered boxes V_N = [-N, N]^d carry N.
class LatticeBox {
 public:
  LatticeBox() = default;

  static LatticeBox centered(int N, int d, Index budget = kDefaultSiteBudget) {
    if (N < 1) throw LatticeError("box half-width N must be >= 1");
    Site lo{}, hi{};
    for (int k = 0; k < d; ++k) {
      lo[k] = -N;
      hi[k] = N;
    }
    LatticeBox box = from_corners(d, lo, hi, budget);
    box.half_width_ = N;
    return box;
  }

  static LatticeBox from_corners(int d, const Site& lo, const Site& hi,
                                 Index budget = kDefaultSiteBudget) {
    if (d < 1 || d > kMaxDim) throw LatticeError("dimension must be in [1, 4]");
    LatticeBox box;
    box.dim_ = d;
    box.lo_ = Site{};
    box.hi_ = Site{};
    Index count = 1;
    for (int k = 0; k < d; ++k) {
      if (hi[k] < lo[k]) throw LatticeError("degenerate box: hi < lo");
      box.lo_[k] = lo[k];
      box.hi_[k] = hi[k];
      const Index side = Index(hi[k]) - lo[k] + 1;
      if (count > std::numeric_limits<Index>::max() / side)
        throw SiteBudgetError("site count overflows the index type");
      count *= side;
    }
    if (count > budget)
      throw SiteBudgetError("box has " + std::to_string(count) +
                            " sites, above the site budget of " +
                            std::to_string(budget));
    box.size_ = count;
    Index stride = 1;
    for (int k = d - 1; k >= 0; --k) {
      box.stride_[k] = stride;
      stride *= box.side(k);
    }
    return box;
  }

  int dim() const { return dim_; }
  Index size() const { return size_; }
  const Site& lo() const { return lo_; }
  const Site& hi() const { return hi_; }
  int side(int k) const { return hi_[k] - lo_[k] + 1; }
  Index stride(int k) const { return stride_[k]; }

  bool is_centered() const { return half_width_ > 0; }

  /// N for V_N = [-N, N]^d; throws for boxes not built by `centered`.
  int half_width() const {
    if (half_width_ <= 0) throw LatticeError("box is not a centered V_N");
    return half_width_;
  }

  bool contains(const Site& x) const {
    for (int k = 0; k < dim_; ++k)
      if (x[k] < lo_[k] || x[k] > hi_[k]) return false;
    for (int k = dim_; k < kMaxDim; ++k)
      if (x[k] != 0) return false;
    return true;
  }

  bool contains(const LatticeBox& other) const {
    return other.dim_ == dim_ && contains(other.lo_) && contains(other.hi_);
  }

  Index index(const Site& x) const {
    if (!contains(x)) return kNoSite;
    Index i = 0;
    for (int k = 0; k < dim_; ++k) i += Index(x[k] - lo_[k]) * stride_[k];
    return i;
  }

  Site site(Index i) const {
    Site x{};
    for (int k = 0; k < dim_; ++k) {
      x[k] = lo_[k] + int(i / stride_[k]);
      i %= stride_[k];
    }
    return x;
  }

  /// Center site; for even sides the lower of the two middle coordinates.
  Site center() const {
    Site c{};
    for (int k = 0; k < dim_; ++k) c[k] = lo_[k] + (side(k) - 1) / 2;
    return c;
  }

  friend bool operator==(const LatticeBox& a, const LatticeBox& b) {
    return a.dim_ == b.dim_ && a.lo_ == b.lo_ && a.hi_ == b.hi_;
  }

 private:
  int dim_ = 0;
  int half_width_ = 0;
  Site lo_{};
  Site hi_{};
  std::array<Index, kMaxDim> stride_{};
  Index size_ = 0;
};

inline LatticeBox build_box(int N, int d, Index budget = kDefaultSiteBudget) {
  if (d < 1 || d > kMaxDim) throw LatticeError("dimension must be in [1, 4]");
  return LatticeBox::centered(N, d, budget);
}

/// Ordered set of sites, usually inside `parent`. Boundary shells live
/// outside the parent box and set `exterior`.
struct Region {
  LatticeBox parent;
  std::vector<Site> members;  // sorted lexicographically, unique
  bool exterior = false;
  bool clipped = false;

  Index size() const { return Index(members.size()); }
  bool empty() const { return members.empty(); }
  bool contains(const Site& x) const {
    return std::binary_search(members.begin(), members.end(), x);
  }

  // Domain interface used by assembly and solves.
  int dim() const { return parent.dim(); }
  Site site(Index i) const { return members[std::size_t(i)]; }
  Index index(const Site& x) const {
    auto it = std::lower_bound(members.begin(), members.end(), x);
    if (it == members.end() || *it != x) return kNoSite;
    return Index(it - members.begin());
  }

  /// Dense indices of the members in the parent box (interior regions only).
  std::vector<Index> parent_indices() const {
    std::vector<Index> out;
    out.reserve(members.size());
    for (const Site& x : members) out.push_back(parent.index(x));
    return out;
  }
};

inline Region whole_box(const LatticeBox& box) {
  Region r{box, {}, false, false};
  r.members.reserve(std::size_t(box.size()));
  for (Index i = 0; i < box.size(); ++i) r.members.push_back(box.site(i));
  return r;
}

/// Sites of a sub-box as a region of `parent`.
inline Region box_as_region(const LatticeBox& parent, const LatticeBox& sub) {
  Region r{parent, {}, false, false};
  r.members.reserve(std::size_t(sub.size()));
  for (Index i = 0; i < sub.size(); ++i) r.members.push_back(sub.site(i));
  return r;
}

/// Lattice steps from x to the outer face of V_N, i.e. N - |x|_inf. Both
/// metrics agree here because the nearest face point is axis-aligned.
inline int depth_in_box(const LatticeBox& box, const Site& x) {
  int depth = std::numeric_limits<int>::max();
  for (int k = 0; k < box.dim(); ++k)
    depth = std::min({depth, x[k] - box.lo()[k], box.hi()[k] - x[k]});
  return depth;
}

/// Integer bulk depth floor(ell * N) used by V_N^ell.
inline int bulk_depth(int N, double ell) {
  return int(std::floor(ell * N + 1e-12));
}

/// V_N^ell = {x : N - |x|_inf >= floor(ell N)}.
inline Region inner_region(const LatticeBox& box, double ell) {
  if (!(ell > 0.0 && ell <= 1.0))
    throw LatticeError("inner_region requires 0 < ell <= 1");
  const int N = box.half_width();
  const int depth = bulk_depth(N, ell);
  const int reach = N - depth;
  if (reach < 0) throw EmptyRegionError("V_N^ell is empty for this (N, ell)");
  Site lo{}, hi{};
  for (int k = 0; k < box.dim(); ++k) {
    lo[k] = -reach;
    hi[k] = reach;
  }
  return box_as_region(box, LatticeBox::from_corners(box.dim(), lo, hi, box.size()));
}

/// Box form of V_N^ell, for callers that want sub-box arithmetic.
inline LatticeBox inner_box(const LatticeBox& box, double ell) {
  const int N = box.half_width();
  const int reach = N - bulk_depth(N, ell);
  if (reach < 0) throw EmptyRegionError("V_N^ell is empty for this (N, ell)");
  Site lo{}, hi{};
  for (int k = 0; k < box.dim(); ++k) {
    lo[k] = -reach;
    hi[k] = reach;
  }
  return LatticeBox::from_corners(box.dim(), lo, hi, box.size());
}

/// All offsets o with 0 < |o| <= radius in the given metric.
inline std::vector<Site> shell_offsets(int d, int radius, Metric metric) {
  std::vector<Site> out;
  Site o{};
  const int side = 2 * radius + 1;
  Index total = 1;
  for (int k = 0; k < d; ++k) total *= side;
  for (Index i = 0; i < total; ++i) {
    Index r = i;
    for (int k = d - 1; k >= 0; --k) {
      o[k] = int(r % side) - radius;
      r /= side;
    }
    const int n = metric_norm(o, metric);
    if (n > 0 && n <= radius) out.push_back(o);
  }
  return out;
}

/// Exterior sites within distance 2 of `region`. For the full box this is
/// the double boundary on which the field is pinned to 0.
inline Region double_boundary(const Region& region, Metric metric = Metric::linf) {
  if (region.empty()) throw EmptyRegionError("double_boundary of an empty region");
  const int d = region.dim();
  Site lo = region.members.front(), hi = lo;
  for (const Site& x : region.members)
    for (int k = 0; k < d; ++k) {
      lo[k] = std::min(lo[k], x[k]);
      hi[k] = std::max(hi[k], x[k]);
    }
  for (int k = 0; k < d; ++k) {
    lo[k] -= 2;
    hi[k] += 2;
  }
  const LatticeBox frame = LatticeBox::from_corners(d, lo, hi, std::numeric_limits<Index>::max());
  std::vector<char> mark(std::size_t(frame.size()), 0);
  for (const Site& x : region.members) mark[std::size_t(frame.index(x))] = 1;
  const auto offsets = shell_offsets(d, 2, metric);
  for (const Site& x : region.members)
    for (const Site& o : offsets) {
      char& m = mark[std::size_t(frame.index(x + o))];
      if (m == 0) m = 2;
    }
  Region out{region.parent, {}, true, false};
  for (Index i = 0; i < frame.size(); ++i)
    if (mark[std::size_t(i)] == 2) out.members.push_back(frame.site(i));
  // frame.site enumerates in lexicographic order, so members stay sorted.
  out.exterior = std::any_of(out.members.begin(), out.members.end(),
                             [&](const Site& y) { return !region.parent.contains(y); });
  return out;
}

/// Closed Euclidean ball D(x, rho) clipped to the box.
inline Region ball(const LatticeBox& box, const Site& x, double rho) {
  if (!box.contains(x)) throw LatticeError("ball center outside the box");
  Region out{box, {}, false, false};
  if (rho < 0) return out;
  const int r = int(std::floor(rho + 1e-12));
  const double rho2 = rho * rho + 1e-9;
  for (const Site& o : shell_offsets(box.dim(), r, Metric::linf)) {
    double s = 0;
    for (int k = 0; k < box.dim(); ++k) s += double(o[k]) * o[k];
    if (s > rho2) continue;
    const Site y = x + o;
    if (box.contains(y))
      out.members.push_back(y);
    else
      out.clipped = true;
  }
  out.members.push_back(x);
  std::sort(out.members.begin(), out.members.end());
  return out;
}

/// B(x, a): sites with |y - x|_inf <= a / 2, clipped to the box.
inline Region box_region(const LatticeBox& box, const Site& x, double a) {
  if (!box.contains(x)) throw LatticeError("box center outside the box");
  Region out{box, {}, false, false};
  if (a < 0) return out;
  const int r = int(std::floor(a / 2 + 1e-12));
  for (const Site& o : shell_offsets(box.dim(), r, Metric::linf)) {
    const Site y = x + o;
    if (box.contains(y))
      out.members.push_back(y);
    else
      out.clipped = true;
  }
  out.members.push_back(x);
  std::sort(out.members.begin(), out.members.end());
  return out;
}

/// floor(N^alpha), robust to exact powers such as 16^0.5.
inline int scaled_side(int N, double alpha) {
  return int(std::floor(std::pow(double(N), alpha) + 1e-9));
}

struct SubBoxPartition {
  double alpha = 0;
  Site anchor{};
  int side = 0;
  int stride = 0;
  std::vector<LatticeBox> boxes;
  Region sigma_scope;  // union of the members' double boundaries
};

/// ell_inf gap between two boxes: number of lattice steps between their
/// closest sites (1 means adjacent).
inline int box_distance(const LatticeBox& a, const LatticeBox& b) {
  int dist = 0;
  for (int k = 0; k < a.dim(); ++k) {
    int gap = 0;
    if (a.hi()[k] < b.lo()[k]) gap = b.lo()[k] - a.hi()[k];
    if (b.hi()[k] < a.lo()[k]) gap = a.lo()[k] - b.hi()[k];
    dist = std::max(dist, gap);
  }
  return dist;
}

/// Grid of sub-boxes of side floor(N^alpha) with stride side + 4 starting
/// at `anchor` (the lowest corner of the first box), kept while inside V_N.
inline SubBoxPartition partition_subboxes(const LatticeBox& box, double alpha,
                                          const Site& anchor,
                                          Metric metric = Metric::linf) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw LatticeError("partition exponent must lie in (0, 1)");
  if (!box.contains(anchor)) throw LatticeError("partition anchor outside the box");
  SubBoxPartition p;
  p.alpha = alpha;
  p.anchor = anchor;
  p.side = scaled_side(box.half_width(), alpha);
  if (p.side < 1) throw EmptyRegionError("floor(N^alpha) < 1");
  p.stride = p.side + 4;
  const int d = box.dim();
  std::array<int, kMaxDim> counts{};
  counts.fill(1);
  for (int k = 0; k < d; ++k) {
    const int room = box.hi()[k] - anchor[k] + 1;
    counts[k] = room >= p.side ? (room - p.side) / p.stride + 1 : 0;
  }
  Index total = 1;
  for (int k = 0; k < d; ++k) total *= counts[k];
  for (Index i = 0; i < total; ++i) {
    Index r = i;
    Site lo{}, hi{};
    for (int k = d - 1; k >= 0; --k) {
      const int step = int(r % counts[k]);
      r /= counts[k];
      lo[k] = anchor[k] + step * p.stride;
      hi[k] = lo[k] + p.side - 1;
    }
    p.boxes.push_back(LatticeBox::from_corners(d, lo, hi, box.size()));
  }
  if (p.boxes.empty()) throw EmptyRegionError("no sub-box of the partition fits in V_N");

  Region scope{box, {}, false, false};
  for (const LatticeBox& b : p.boxes) {
    Region shell = double_boundary(box_as_region(box, b), metric);
    scope.members.insert(scope.members.end(), shell.members.begin(), shell.members.end());
    scope.exterior = scope.exterior || shell.exterior;
  }
  std::sort(scope.members.begin(), scope.members.end());
  scope.members.erase(std::unique(scope.members.begin(), scope.members.end()),
                      scope.members.end());
  p.sigma_scope = std::move(scope);
  return p;
}

}  // namespace membrane
