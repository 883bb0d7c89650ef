#pragma once

// Field samplers, the Markov conditional decomposition, box conditional
// means and the Gaussian tail bounds.

#include <cmath>
#include <cstdint>
#include <istream>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "membrane/lattice.hpp"
#include "membrane/operators.hpp"
#include "membrane/solver.hpp"

namespace membrane {

enum class Sampler { exact, gbar };

inline std::string to_string(Sampler s) { return s == Sampler::exact ? "exact" : "gbar"; }

inline Sampler parse_sampler(const std::string& s) {
  if (s == "exact") return Sampler::exact;
  if (s == "gbar") return Sampler::gbar;
  throw std::invalid_argument("unknown sampler '" + s + "' (expected exact or gbar)");
}

// ---------------------------------------------------------------------------
// Random numbers

/// Standard normals keyed by (seed, replica, block of sites). Each block of
/// kNoiseBlock sites gets its own engine, so any block can be regenerated
/// independently and the result does not depend on thread scheduling.
inline constexpr Index kNoiseBlock = 4096;

inline std::mt19937_64 block_engine(std::uint64_t seed, std::uint64_t replica, std::uint64_t block) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32),    std::uint32_t(replica),
                    std::uint32_t(replica >> 32), std::uint32_t(block), std::uint32_t(block >> 32)};
  return std::mt19937_64(seq);
}

inline std::vector<double> standard_normals(Index n, std::uint64_t seed, std::uint64_t replica) {
  std::vector<double> z(static_cast<std::size_t>(n));
  for (Index start = 0, block = 0; start < n; start += kNoiseBlock, ++block) {
    auto engine = block_engine(seed, replica, std::uint64_t(block));
    std::normal_distribution<double> normal;
    const Index end = std::min(n, start + kNoiseBlock);
    for (Index i = start; i < end; ++i) z[std::size_t(i)] = normal(engine);
  }
  return z;
}

// ---------------------------------------------------------------------------
// Samples

struct FieldSample {
  LatticeBox box;
  Model model = Model::membrane;
  Sampler sampler = Sampler::exact;
  std::uint64_t seed = 0;
  std::uint64_t replica = 0;
  double tolerance = 0;  // 0 for direct solves
  std::vector<double> values;

  double at(const Site& x) const {
    const Index i = box.index(x);
    return i == kNoSite ? 0.0 : values[std::size_t(i)];
  }
};

/// One draw with covariance Q^{-1}, Q the factorized precision matrix.
inline FieldSample sample_exact(const Factorization& f, const LatticeBox& box, Model model,
                                std::uint64_t seed, std::uint64_t replica = 0) {
  if (f.size() != box.size()) throw SolverError("factorization does not match the box");
  FieldSample s{box, model, Sampler::exact, seed, replica, 0.0, {}};
  s.values = f.correlate(standard_normals(box.size(), seed, replica));
  return s;
}

/// Gamma_N applied to white noise: covariance Gamma_N^2 = Gbar_N exactly.
inline FieldSample sample_gbar(const LaplaceSolver& laplace, std::uint64_t seed,
                               std::uint64_t replica = 0, double tolerance = 1e-10) {
  const LatticeBox& box = laplace.box();
  FieldSample s{box, Model::membrane, Sampler::gbar, seed, replica,
                laplace.is_direct() ? 0.0 : tolerance, {}};
  s.values = laplace.solve(standard_normals(box.size(), seed, replica), tolerance);
  return s;
}

inline constexpr std::uint32_t kSampleFormatVersion = 1;

/// Header: "MMFS", version, model, d, N, sampler, seed, replica, tolerance,
/// count; then the values in site-index order. Little-endian.
inline void write_sample(std::ostream& out, const FieldSample& s) {
  out.write("MMFS", 4);
  io::put<std::uint32_t>(out, kSampleFormatVersion);
  io::put<std::uint32_t>(out, std::uint32_t(s.model));
  io::put<std::uint32_t>(out, std::uint32_t(s.box.dim()));
  io::put<std::uint32_t>(out, std::uint32_t(s.box.half_width()));
  io::put<std::uint32_t>(out, std::uint32_t(s.sampler));
  io::put<std::uint64_t>(out, s.seed);
  io::put<std::uint64_t>(out, s.replica);
  io::put<double>(out, s.tolerance);
  io::put<std::uint64_t>(out, s.values.size());
  out.write(reinterpret_cast<const char*>(s.values.data()),
            std::streamsize(s.values.size() * sizeof(double)));
  if (!out) throw std::runtime_error("failed to write field sample");
}

inline FieldSample read_sample(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "MMFS") throw std::runtime_error("not a field sample");
  if (io::get<std::uint32_t>(in) != kSampleFormatVersion)
    throw std::runtime_error("unsupported field sample version");
  FieldSample s;
  s.model = Model(io::get<std::uint32_t>(in));
  const int d = int(io::get<std::uint32_t>(in));
  const int N = int(io::get<std::uint32_t>(in));
  s.sampler = Sampler(io::get<std::uint32_t>(in));
  s.seed = io::get<std::uint64_t>(in);
  s.replica = io::get<std::uint64_t>(in);
  s.tolerance = io::get<double>(in);
  const auto count = io::get<std::uint64_t>(in);
  s.box = build_box(N, d, std::numeric_limits<Index>::max());
  if (count != std::uint64_t(s.box.size())) throw std::runtime_error("field sample size mismatch");
  s.values.resize(count);
  in.read(reinterpret_cast<char*>(s.values.data()), std::streamsize(count * sizeof(double)));
  if (!in) throw std::runtime_error("truncated field sample");
  return s;
}

// ---------------------------------------------------------------------------
// Conditioning

class ConditioningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ConditionalSplit {
  Region region;
  std::vector<double> mean_part;  // E[phi_x | field outside B]
  std::vector<double> residual;   // phi_x - mean_part
};

namespace detail {

inline void require_conditionable(const LatticeBox& box, const Region& b) {
  if (b.empty()) throw EmptyRegionError("conditioning region is empty");
  const int limit = box.half_width() - 2;
  for (const Site& x : b.members)
    if (!box.contains(x) || linf_norm(x) > limit)
      throw ConditioningError("conditioning region must stay at distance >= 3 from the double boundary");
}

/// -sum_{y outside B} Q(x, y) phi_y for each x in B.
inline std::vector<double> outside_coupling(const FieldSample& s, const Region& b,
                                            const Stencil& stencil) {
  std::vector<double> rhs(std::size_t(b.size()), 0.0);
  for (Index i = 0; i < b.size(); ++i) {
    const Site& x = b.members[std::size_t(i)];
    double acc = 0;
    for (std::size_t k = 0; k < stencil.size(); ++k) {
      const Site y = x + stencil.offsets[k];
      if (b.contains(y)) continue;
      acc += stencil.coefficient(k) * s.at(y);
    }
    rhs[std::size_t(i)] = -acc;
  }
  return rhs;
}

}  // namespace detail

/// phi_B = E[phi_B | F] + psi_B, with E[phi_B | F] = -Q_BB^{-1} Q_BR phi_R.
/// Q_BB is the precision matrix of the model on B with zero boundary values,
/// so psi is the same model on B.
inline ConditionalSplit conditional_decompose(const FieldSample& s, const Region& b,
                                              const FactorOptions& options = {}) {
  detail::require_conditionable(s.box, b);
  const Stencil stencil = precision_stencil(s.model, s.box.dim());
  const auto f = factorize(assemble_truncated(b, stencil), options);
  ConditionalSplit out{b, f.solve(detail::outside_coupling(s, b, stencil)), {}};
  out.residual.resize(out.mean_part.size());
  for (Index i = 0; i < b.size(); ++i)
    out.residual[std::size_t(i)] = s.at(b.members[std::size_t(i)]) - out.mean_part[std::size_t(i)];
  return out;
}

/// phi_B = E(phi_{x_B} | field outside B) for sub-boxes of one shape. Q_BB
/// depends only on the shape, so one factorization serves every translate.
class BoxConditioner {
 public:
  BoxConditioner(Model model, int d, int side, const FactorOptions& options = {})
      : model_(model), d_(d), side_(side), stencil_(precision_stencil(model, d)) {
    if (side < 1) throw LatticeError("box side must be positive");
    Site hi{};
    for (int k = 0; k < d; ++k) hi[k] = side - 1;
    shape_ = LatticeBox::from_corners(d, Site{}, hi, std::numeric_limits<Index>::max());
    factor_.emplace(factorize(assemble_truncated(shape_, stencil_), options));
    Site c{};
    for (int k = 0; k < d; ++k) c[k] = (side - 1) / 2;
    center_ = shape_.index(c);
  }

  int side() const { return side_; }

  /// Conditional mean at the center of the box with lowest corner lo.
  double mean(const FieldSample& s, const Site& lo) const {
    if (s.model != model_ || s.box.dim() != d_) throw ConditioningError("sample does not match conditioner");
    Site hi = lo;
    for (int k = 0; k < d_; ++k) hi[k] += side_ - 1;
    const Region b = box_as_region(s.box, LatticeBox::from_corners(d_, lo, hi, std::numeric_limits<Index>::max()));
    detail::require_conditionable(s.box, b);
    const auto m = factor_->solve(detail::outside_coupling(s, b, stencil_));
    return m[std::size_t(center_)];
  }

 private:
  Model model_;
  int d_;
  int side_;
  Stencil stencil_;
  LatticeBox shape_;
  std::optional<Factorization> factor_;
  Index center_ = 0;
};

/// phi_B for one sub-box B of the sample's box.
inline double box_conditional_mean(const FieldSample& s, const LatticeBox& b,
                                   const FactorOptions& options = {}) {
  for (int k = 1; k < b.dim(); ++k)
    if (b.side(k) != b.side(0)) throw ConditioningError("box_conditional_mean expects a cube");
  return BoxConditioner(s.model, b.dim(), b.side(0), options).mean(s, b.lo());
}

// ---------------------------------------------------------------------------
// Tails of a standard normal X

/// P(|X| >= a) <= exp(-a^2/2), valid for a >= 0.
inline double tail_upper(double a) {
  if (!(a >= 0)) throw std::domain_error("tail_upper needs a >= 0");
  return std::exp(-a * a / 2);
}

/// P(|X| >= a) >= exp(-a^2/2) / (sqrt(2 pi) a), valid for a >= 1.
inline double tail_lower(double a) {
  if (!(a >= 1)) throw std::domain_error("tail_lower needs a >= 1");
  return std::exp(-a * a / 2) / (std::sqrt(2 * std::numbers::pi) * a);
}

/// P(|X| >= a) = erfc(a / sqrt 2).
inline double tail_exact(double a) {
  if (!(a >= 0)) throw std::domain_error("tail_exact needs a >= 0");
  return std::erfc(a / std::numbers::sqrt2);
}

}  // namespace membrane
