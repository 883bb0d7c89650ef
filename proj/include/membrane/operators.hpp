#pragma once

// Discrete Laplacian / bilaplacian stencils and sparse assembly of the
// precision matrix with 0-boundary conditions outside the domain.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "membrane/lattice.hpp"

namespace membrane {

enum class Model { membrane, dgff };

/// normalized: (1/2d) sum_e f(x+e) - f(x).  unnormalized: sum_e f(x+e) - 2d f(x).
enum class LaplacianConvention { normalized, unnormalized };

inline const char* to_string(Model m) { return m == Model::membrane ? "membrane" : "dgff"; }

inline Model parse_model(const std::string& s) {
  if (s == "membrane") return Model::membrane;
  if (s == "dgff") return Model::dgff;
  throw std::invalid_argument("unknown model '" + s + "'");
}

inline const char* to_string(LaplacianConvention c) {
  return c == LaplacianConvention::normalized ? "normalized" : "unnormalized";
}

/// Lattice stencil with exact rational weights numerator[i] / denominator.
struct Stencil {
  int dim = 0;
  std::vector<Site> offsets;  // sorted
  std::vector<std::int64_t> numerators;
  std::int64_t denominator = 1;

  std::size_t size() const { return offsets.size(); }
  double coefficient(std::size_t i) const {
    return double(numerators[i]) / double(denominator);
  }

  /// Weight at an offset, 0 when outside the support.
  double at(const Site& o) const {
    auto it = std::lower_bound(offsets.begin(), offsets.end(), o);
    if (it == offsets.end() || *it != o) return 0.0;
    return coefficient(std::size_t(it - offsets.begin()));
  }

  std::int64_t numerator_sum() const {
    return std::accumulate(numerators.begin(), numerators.end(), std::int64_t{0});
  }

  int reach_l1() const {
    int r = 0;
    for (const Site& o : offsets) r = std::max(r, l1_norm(o));
    return r;
  }
};

namespace detail {

inline Stencil normalize(std::map<Site, std::int64_t> weights, int d, std::int64_t den) {
  std::int64_t g = den;
  for (const auto& [o, w] : weights)
    if (w != 0) g = std::gcd(g, w < 0 ? -w : w);
  Stencil s;
  s.dim = d;
  s.denominator = den / g;
  for (const auto& [o, w] : weights) {
    if (w == 0) continue;
    s.offsets.push_back(o);
    s.numerators.push_back(w / g);
  }
  return s;
}

}  // namespace detail

inline Stencil laplacian_stencil(int d, LaplacianConvention c = LaplacianConvention::normalized) {
  if (d < 1 || d > kMaxDim) throw std::invalid_argument("stencil dimension must be in [1, 4]");
  std::map<Site, std::int64_t> w;
  const bool normalized = c == LaplacianConvention::normalized;
  w[Site{}] = -2 * d;
  for (int k = 0; k < d; ++k)
    for (int sign : {-1, 1}) {
      Site e{};
      e[k] = sign;
      w[e] = 1;
    }
  return detail::normalize(std::move(w), d, normalized ? 2 * d : 1);
}

/// Exact discrete convolution (a * b)(o) = sum_z a(z) b(o - z).
inline Stencil convolve(const Stencil& a, const Stencil& b) {
  if (a.dim != b.dim) throw std::invalid_argument("stencil dimensions differ");
  std::map<Site, std::int64_t> w;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      w[a.offsets[i] + b.offsets[j]] += a.numerators[i] * b.numerators[j];
  return detail::normalize(std::move(w), a.dim, a.denominator * b.denominator);
}

inline Stencil bilaplacian_stencil(int d, LaplacianConvention c = LaplacianConvention::normalized) {
  const Stencil lap = laplacian_stencil(d, c);
  return convolve(lap, lap);
}

inline Stencil negate(Stencil s) {
  for (auto& n : s.numerators) n = -n;
  return s;
}

/// Stencil whose truncation to a domain is the precision matrix: the
/// bilaplacian for the membrane model, minus the Laplacian for the DGFF.
inline Stencil precision_stencil(Model model, int d,
                                 LaplacianConvention c = LaplacianConvention::normalized) {
  return model == Model::membrane ? bilaplacian_stencil(d, c) : negate(laplacian_stencil(d, c));
}

/// Applies `s` at site x of a field living on `box`, with 0 outside it.
inline double apply_stencil(const Stencil& s, const LatticeBox& box,
                            std::span<const double> field, const Site& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const Index j = box.index(x + s.offsets[i]);
    if (j != kNoSite) acc += s.coefficient(i) * field[std::size_t(j)];
  }
  return acc;
}

/// Symmetric sparse matrix stored as its lower triangle in compressed
/// column form (row indices sorted within each column).
struct SparseSymmetric {
  int n = 0;
  std::vector<std::int64_t> col_ptr{0};
  std::vector<int> row_idx;
  std::vector<double> values;

  std::int64_t nnz_lower() const { return std::int64_t(values.size()); }

  double at(int i, int j) const {
    if (i < j) std::swap(i, j);
    const auto begin = row_idx.begin() + col_ptr[std::size_t(j)];
    const auto end = row_idx.begin() + col_ptr[std::size_t(j) + 1];
    auto it = std::lower_bound(begin, end, i);
    if (it == end || *it != i) return 0.0;
    return values[std::size_t(it - row_idx.begin())];
  }

  /// y = A x.
  void multiply(std::span<const double> x, std::span<double> y) const {
    std::fill(y.begin(), y.end(), 0.0);
    for (int j = 0; j < n; ++j)
      for (auto p = col_ptr[std::size_t(j)]; p < col_ptr[std::size_t(j) + 1]; ++p) {
        const int i = row_idx[std::size_t(p)];
        const double v = values[std::size_t(p)];
        y[std::size_t(i)] += v * x[std::size_t(j)];
        if (i != j) y[std::size_t(j)] += v * x[std::size_t(i)];
      }
  }

  /// Number of stored entries in full (both triangles) row i.
  int row_nonzeros(int i) const {
    int count = 0;
    for (int j = 0; j <= i; ++j)
      if (at(i, j) != 0.0) ++count;
    for (auto p = col_ptr[std::size_t(i)]; p < col_ptr[std::size_t(i) + 1]; ++p)
      if (row_idx[std::size_t(p)] != i) ++count;
    return count;
  }

  friend bool operator==(const SparseSymmetric&, const SparseSymmetric&) = default;
};

/// Truncation of a stencil to a domain: entries s(y - x) for x, y both in
/// the domain, everything outside dropped. `Domain` provides dim(),
/// size(), site(i), index(site) (LatticeBox and Region both do).
template <class Domain>
SparseSymmetric assemble_truncated(const Domain& domain, const Stencil& s) {
  if (domain.size() > std::numeric_limits<int>::max())
    throw SiteBudgetError("domain too large for 32-bit matrix indices");
  SparseSymmetric m;
  m.n = int(domain.size());
  m.col_ptr.assign(std::size_t(m.n) + 1, 0);
  std::vector<std::pair<int, double>> column;
  for (int j = 0; j < m.n; ++j) {
    const Site x = domain.site(j);
    column.clear();
    for (std::size_t k = 0; k < s.size(); ++k) {
      const Index i = domain.index(x + s.offsets[k]);
      if (i == kNoSite || i < j) continue;
      column.emplace_back(int(i), s.coefficient(k));
    }
    std::sort(column.begin(), column.end());
    for (const auto& [i, v] : column) {
      m.row_idx.push_back(i);
      m.values.push_back(v);
    }
    m.col_ptr[std::size_t(j) + 1] = std::int64_t(m.values.size());
  }
  return m;
}

struct PrecisionMatrix {
  LatticeBox box;
  Model model = Model::membrane;
  LaplacianConvention convention = LaplacianConvention::normalized;
  SparseSymmetric entries;

  int size() const { return entries.n; }
};

inline PrecisionMatrix assemble_precision(const LatticeBox& box, Model model,
                                          LaplacianConvention c = LaplacianConvention::normalized) {
  if (box.size() < 1) throw LatticeError("degenerate box");
  return PrecisionMatrix{box, model, c,
                         assemble_truncated(box, precision_stencil(model, box.dim(), c))};
}

// ---------------------------------------------------------------------------
// Binary dump: "MMPM" magic, u32 version, u32 n, u64 nnz, then nnz sorted
// (u32 row, u32 col, f64 value) lower-triangle triplets. Little-endian.

inline constexpr std::uint32_t kMatrixFormatVersion = 1;

namespace io {

template <class T>
void put(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("truncated binary stream");
  return v;
}

}  // namespace io

inline void write_matrix(std::ostream& out, const SparseSymmetric& m) {
  out.write("MMPM", 4);
  io::put<std::uint32_t>(out, kMatrixFormatVersion);
  io::put<std::uint32_t>(out, std::uint32_t(m.n));
  io::put<std::uint64_t>(out, std::uint64_t(m.nnz_lower()));
  // Column-major lower storage is already sorted by (col, row); emit (row, col)
  // sorted by row then col.
  std::vector<std::tuple<int, int, double>> t;
  t.reserve(m.values.size());
  for (int j = 0; j < m.n; ++j)
    for (auto p = m.col_ptr[std::size_t(j)]; p < m.col_ptr[std::size_t(j) + 1]; ++p)
      t.emplace_back(m.row_idx[std::size_t(p)], j, m.values[std::size_t(p)]);
  std::sort(t.begin(), t.end());
  for (const auto& [i, j, v] : t) {
    io::put<std::uint32_t>(out, std::uint32_t(i));
    io::put<std::uint32_t>(out, std::uint32_t(j));
    io::put<double>(out, v);
  }
}

inline SparseSymmetric read_matrix(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "MMPM", 4) != 0) throw std::runtime_error("not a matrix dump");
  if (io::get<std::uint32_t>(in) != kMatrixFormatVersion)
    throw std::runtime_error("unsupported matrix dump version");
  SparseSymmetric m;
  m.n = int(io::get<std::uint32_t>(in));
  const auto nnz = io::get<std::uint64_t>(in);
  std::vector<std::tuple<int, int, double>> t(nnz);
  for (auto& [i, j, v] : t) {
    i = int(io::get<std::uint32_t>(in));
    j = int(io::get<std::uint32_t>(in));
    v = io::get<double>(in);
    if (i < j || i >= m.n) throw std::runtime_error("matrix dump entry out of range");
  }
  std::sort(t.begin(), t.end(), [](const auto& a, const auto& b) {
    return std::tie(std::get<1>(a), std::get<0>(a)) < std::tie(std::get<1>(b), std::get<0>(b));
  });
  m.col_ptr.assign(std::size_t(m.n) + 1, 0);
  for (const auto& [i, j, v] : t) {
    m.row_idx.push_back(i);
    m.values.push_back(v);
    ++m.col_ptr[std::size_t(j) + 1];
  }
  std::partial_sum(m.col_ptr.begin(), m.col_ptr.end(), m.col_ptr.begin());
  return m;
}

}  // namespace membrane
