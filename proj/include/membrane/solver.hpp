#pragma once

// Sparse SPD factorization (CHOLMOD), Green's function columns, Dirichlet
// Laplace solves, the convolved harmonic Green's function and an on-disk
// result cache.

#include <suitesparse/cholmod.h>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

#include "membrane/lattice.hpp"
#include "membrane/operators.hpp"

extern "C" char* openblas_get_corename() __attribute__((weak));

namespace membrane {

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotPositiveDefiniteError : public SolverError {
 public:
  using SolverError::SolverError;
};

class MemoryBudgetError : public SolverError {
 public:
  using SolverError::SolverError;
};

class ConvergenceError : public SolverError {
 public:
  ConvergenceError(const std::string& what, int iterations, double residual)
      : SolverError(what), iterations(iterations), residual(residual) {}
  int iterations;
  double residual;
};

/// OpenBLAS 0.3.20 selects AVX-512 kernels on Cooper Lake class CPUs that
/// make CHOLMOD's supernodal factorization report spurious indefiniteness.
/// Re-executes the current program with OPENBLAS_CORETYPE=Haswell when such
/// a kernel is active and the variable is unset. Call first thing in main().
inline void ensure_safe_blas_kernels(char** argv) {
  if (std::getenv("OPENBLAS_CORETYPE") != nullptr || openblas_get_corename == nullptr) return;
  const std::string core = openblas_get_corename();
  if (core != "Cooperlake" && core != "SkylakeX" && core != "SapphireRapids") return;
  ::setenv("OPENBLAS_CORETYPE", "Haswell", 1);
  ::execv("/proc/self/exe", argv);
}

// ---------------------------------------------------------------------------
// Fingerprints

class Fnv1a {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 1099511628211ull;
    }
  }
  template <class T>
  void value(const T& v) {
    bytes(&v, sizeof v);
  }
  template <class T>
  void range(std::span<const T> v) {
    bytes(v.data(), v.size_bytes());
  }
  void text(std::string_view s) { bytes(s.data(), s.size()); }
  std::uint64_t digest() const { return hash_; }

 private:
  std::uint64_t hash_ = 14695981039346656037ull;
};

inline std::uint64_t fingerprint(const SparseSymmetric& m, std::string_view ordering = "cholmod-default") {
  Fnv1a h;
  h.value(m.n);
  h.range(std::span<const std::int64_t>(m.col_ptr));
  h.range(std::span<const int>(m.row_idx));
  h.range(std::span<const double>(m.values));
  h.text(ordering);
  return h.digest();
}

inline std::string fingerprint_hex(std::uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
  return buf;
}

// ---------------------------------------------------------------------------
// CHOLMOD plumbing

namespace detail {

class CholmodCommon {
 public:
  CholmodCommon() {
    cholmod_start(&common_);
    common_.print = 0;
    common_.error_handler = nullptr;
    common_.supernodal = CHOLMOD_AUTO;
    common_.final_ll = true;  // LL^T also for simplicial factors, so indefiniteness is caught
  }
  ~CholmodCommon() { cholmod_finish(&common_); }
  CholmodCommon(const CholmodCommon&) = delete;
  CholmodCommon& operator=(const CholmodCommon&) = delete;
  cholmod_common* get() { return &common_; }
  cholmod_common* operator->() { return &common_; }

 private:
  cholmod_common common_{};
};

struct DenseDeleter {
  void operator()(cholmod_dense* d) const {
    CholmodCommon c;
    cholmod_free_dense(&d, c.get());
  }
};
using DensePtr = std::unique_ptr<cholmod_dense, DenseDeleter>;

inline DensePtr make_dense(std::span<const double> v, cholmod_common* c) {
  DensePtr d(cholmod_allocate_dense(v.size(), 1, v.size(), CHOLMOD_REAL, c));
  if (!d) throw SolverError("cholmod_allocate_dense failed");
  std::copy(v.begin(), v.end(), static_cast<double*>(d->x));
  return d;
}

inline std::vector<double> to_vector(const cholmod_dense* d) {
  const auto* x = static_cast<const double*>(d->x);
  return std::vector<double>(x, x + d->nrow);
}

}  // namespace detail

struct FactorOptions {
  double memory_budget_bytes = 4.0 * (1ull << 30);
  bool verify = true;
};

struct FactorStats {
  std::int64_t n = 0;
  double predicted_factor_nnz = 0;
  double flops = 0;
  int ordering = 0;  // CHOLMOD ordering method index that was selected
  double seconds = 0;
};

/// Lower-triangular factor L and permutation P with P Q P^T = L L^T.
struct LowerFactor {
  int n = 0;
  std::vector<int> perm;  // perm[k] = original index of pivot k
  std::vector<std::int64_t> col_ptr;
  std::vector<int> row_idx;
  std::vector<double> values;
};

/// Cholesky factorization P Q P^T = L L^T with a fill-reducing ordering.
/// Immutable after construction; solves may run concurrently.
class Factorization {
 public:
  int size() const { return state_->n; }
  std::uint64_t fingerprint() const { return state_->fingerprint; }
  const FactorStats& stats() const { return state_->stats; }

  std::vector<int> permutation() const {
    const int* p = static_cast<const int*>(state_->factor->Perm);
    return std::vector<int>(p, p + state_->n);
  }

  /// Q^{-1} b.
  std::vector<double> solve(std::span<const double> b) const { return run(CHOLMOD_A, b); }

  /// P^T L^{-T} z; for z ~ N(0, I) the result has covariance Q^{-1}.
  std::vector<double> correlate(std::span<const double> z) const {
    const auto y = run(CHOLMOD_Lt, z);
    return run(CHOLMOD_Pt, y);
  }

  LowerFactor lower_factor() const {
    detail::CholmodCommon c;
    cholmod_factor* copy = cholmod_copy_factor(state_->factor, c.get());
    if (!copy) throw SolverError("cholmod_copy_factor failed");
    cholmod_sparse* s = cholmod_factor_to_sparse(copy, c.get());
    cholmod_free_factor(&copy, c.get());
    if (!s) throw SolverError("cholmod_factor_to_sparse failed");
    LowerFactor out;
    out.n = state_->n;
    out.perm = permutation();
    const int* p = static_cast<const int*>(s->p);
    const int* i = static_cast<const int*>(s->i);
    const double* x = static_cast<const double*>(s->x);
    out.col_ptr.assign(p, p + out.n + 1);
    out.row_idx.assign(i, i + p[out.n]);
    out.values.assign(x, x + p[out.n]);
    cholmod_free_sparse(&s, c.get());
    return out;
  }

 private:
  struct State {
    int n = 0;
    std::uint64_t fingerprint = 0;
    FactorStats stats;
    cholmod_factor* factor = nullptr;
    ~State() {
      if (factor) {
        detail::CholmodCommon c;
        cholmod_free_factor(&factor, c.get());
      }
    }
  };

  std::vector<double> run(int system, std::span<const double> b) const {
    if (b.size() != std::size_t(state_->n)) throw SolverError("right-hand side has wrong length");
    detail::CholmodCommon c;
    auto rhs = detail::make_dense(b, c.get());
    detail::DensePtr x(cholmod_solve(system, state_->factor, rhs.get(), c.get()));
    if (!x) throw SolverError("cholmod_solve failed");
    return detail::to_vector(x.get());
  }

  std::shared_ptr<State> state_;

  friend Factorization factorize(const SparseSymmetric&, const FactorOptions&);
};

inline Factorization factorize(const SparseSymmetric& q, const FactorOptions& options = {}) {
  if (q.n < 1) throw SolverError("empty matrix");
  const auto start = std::chrono::steady_clock::now();
  detail::CholmodCommon c;
  cholmod_sparse* a = cholmod_allocate_sparse(std::size_t(q.n), std::size_t(q.n),
                                              std::size_t(q.nnz_lower()), 1, 1, -1,
                                              CHOLMOD_REAL, c.get());
  if (!a) throw SolverError("cholmod_allocate_sparse failed");
  std::unique_ptr<cholmod_sparse, void (*)(cholmod_sparse*)> guard(a, [](cholmod_sparse* s) {
    detail::CholmodCommon cc;
    cholmod_free_sparse(&s, cc.get());
  });
  auto* p = static_cast<int*>(a->p);
  for (std::size_t j = 0; j < q.col_ptr.size(); ++j) p[j] = int(q.col_ptr[j]);
  std::copy(q.row_idx.begin(), q.row_idx.end(), static_cast<int*>(a->i));
  std::copy(q.values.begin(), q.values.end(), static_cast<double*>(a->x));

  Factorization f;
  f.state_ = std::make_shared<Factorization::State>();
  auto& st = *f.state_;
  st.n = q.n;
  st.fingerprint = fingerprint(q);
  st.factor = cholmod_analyze(a, c.get());
  if (!st.factor) throw SolverError("cholmod_analyze failed");
  st.stats.n = q.n;
  st.stats.predicted_factor_nnz = c->lnz;
  st.stats.flops = c->fl;
  st.stats.ordering = c->selected;
  const double predicted_bytes = c->lnz * (sizeof(double) + sizeof(int));
  if (predicted_bytes > options.memory_budget_bytes) {
    std::ostringstream msg;
    msg << "predicted factor fill " << c->lnz << " nonzeros (" << predicted_bytes / (1 << 20)
        << " MiB) exceeds the memory budget of " << options.memory_budget_bytes / (1 << 20)
        << " MiB";
    throw MemoryBudgetError(msg.str());
  }
  cholmod_factorize(a, st.factor, c.get());
  if (c->status == CHOLMOD_NOT_POSDEF)
    throw NotPositiveDefiniteError("matrix is not positive definite (pivot " +
                                   std::to_string(st.factor->minor) + ")");
  if (c->status != CHOLMOD_OK) throw SolverError("cholmod_factorize failed");
  st.stats.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (options.verify) {
    std::mt19937_64 rng(0x5eed);
    std::normal_distribution<double> normal;
    std::vector<double> b(std::size_t(q.n)), r(std::size_t(q.n));
    for (double& v : b) v = normal(rng);
    const auto x = f.solve(b);
    q.multiply(x, r);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      num += (r[i] - b[i]) * (r[i] - b[i]);
      den += b[i] * b[i];
    }
    if (!(std::sqrt(num / den) < 1e-6))
      throw SolverError("factorization failed its residual check; if OpenBLAS is in use, try "
                        "OPENBLAS_CORETYPE=Haswell");
  }
  return f;
}

inline Factorization factorize(const PrecisionMatrix& q, const FactorOptions& options = {}) {
  return factorize(q.entries, options);
}

// ---------------------------------------------------------------------------
// Iterative solves

struct SolveReport {
  int iterations = 0;
  double relative_residual = 0;
  bool converged = false;
};

/// Preconditioned conjugate gradients on x (used as the initial guess).
/// `apply_a(in, out)` computes A in, `apply_m(in, out)` the preconditioner.
template <class ApplyA, class ApplyM>
SolveReport conjugate_gradient(ApplyA&& apply_a, ApplyM&& apply_m, std::span<const double> b,
                               std::span<double> x, double rel_tol, int max_iter) {
  const std::size_t n = b.size();
  std::vector<double> r(n), z(n), p(n), ap(n);
  auto dot = [n](const std::vector<double>& u, const std::vector<double>& v) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += u[i] * v[i];
    return s;
  };
  double bnorm = 0;
  for (double v : b) bnorm += v * v;
  bnorm = std::sqrt(bnorm);
  SolveReport report;
  if (bnorm == 0) {
    std::fill(x.begin(), x.end(), 0.0);
    report.converged = true;
    return report;
  }
  apply_a(std::span<const double>(x.data(), n), std::span<double>(ap));
  for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - ap[i];
  apply_m(std::span<const double>(r), std::span<double>(z));
  p = z;
  double rz = dot(r, z);
  for (int it = 0; it <= max_iter; ++it) {
    const double rnorm = std::sqrt(dot(r, r));
    report.iterations = it;
    report.relative_residual = rnorm / bnorm;
    if (report.relative_residual <= rel_tol) {
      report.converged = true;
      return report;
    }
    if (it == max_iter) break;
    apply_a(std::span<const double>(p), std::span<double>(ap));
    const double alpha = rz / dot(p, ap);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    apply_m(std::span<const double>(r), std::span<double>(z));
    const double rz_next = dot(r, z);
    const double beta = rz_next / rz;
    rz = rz_next;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
  }
  return report;
}

inline auto identity_preconditioner() {
  return [](std::span<const double> in, std::span<double> out) {
    std::copy(in.begin(), in.end(), out.begin());
  };
}

/// Matrix-free application of a stencil truncated to a box (0 outside).
/// Equal to multiplication by assemble_truncated(box, stencil).
class StencilOperator {
 public:
  StencilOperator(const LatticeBox& box, const Stencil& s) : box_(box), stencil_(s) {
    for (std::size_t k = 0; k < s.size(); ++k) {
      Index shift = 0;
      for (int c = 0; c < box.dim(); ++c) shift += Index(s.offsets[k][c]) * box.stride(c);
      shifts_.push_back(shift);
      weights_.push_back(s.coefficient(k));
    }
    reach_ = 0;
    for (const Site& o : s.offsets) reach_ = std::max(reach_, linf_norm(o));
  }

  const LatticeBox& box() const { return box_; }

  void operator()(std::span<const double> in, std::span<double> out) const {
    const int d = box_.dim();
    Site x = box_.lo();
    for (Index i = 0; i < box_.size(); ++i) {
      bool deep = true;
      for (int c = 0; c < d; ++c)
        if (x[c] - box_.lo()[c] < reach_ || box_.hi()[c] - x[c] < reach_) deep = false;
      double acc = 0;
      if (deep) {
        for (std::size_t k = 0; k < shifts_.size(); ++k)
          acc += weights_[k] * in[std::size_t(i + shifts_[k])];
      } else {
        for (std::size_t k = 0; k < shifts_.size(); ++k)
          if (box_.contains(x + stencil_.offsets[k]))
            acc += weights_[k] * in[std::size_t(i + shifts_[k])];
      }
      out[std::size_t(i)] = acc;
      for (int c = d - 1; c >= 0; --c) {
        if (++x[c] <= box_.hi()[c]) break;
        x[c] = box_.lo()[c];
      }
    }
  }

 private:
  LatticeBox box_;
  Stencil stencil_;
  std::vector<Index> shifts_;
  std::vector<double> weights_;
  int reach_ = 0;
};

struct LaplaceOptions {
  Index direct_limit = 200'000;  // direct factorization up to this many sites
  double tolerance = 1e-9;
  int max_iterations = 20'000;
  FactorOptions factor;
};

/// Applies Gamma_N = (-Delta_N)^{-1} with the normalized Laplacian, the
/// Dirichlet Green's function of simple random walk killed on leaving the box.
class LaplaceSolver {
 public:
  explicit LaplaceSolver(const LatticeBox& box, LaplaceOptions options = {})
      : box_(box),
        options_(options),
        operator_(box, precision_stencil(Model::dgff, box.dim())) {
    const auto q = assemble_precision(box, Model::dgff);
    fingerprint_ = membrane::fingerprint(q.entries);
    if (box.size() <= options.direct_limit) factor_ = factorize(q, options.factor);
  }

  const LatticeBox& box() const { return box_; }
  bool is_direct() const { return factor_.has_value(); }
  std::uint64_t fingerprint() const { return fingerprint_; }

  std::vector<double> solve(std::span<const double> rhs, double tolerance,
                            SolveReport* report = nullptr) const {
    if (rhs.size() != std::size_t(box_.size())) throw SolverError("rhs has wrong length");
    if (factor_) {
      if (report) *report = SolveReport{0, 0.0, true};
      return factor_->solve(rhs);
    }
    std::vector<double> x(rhs.size(), 0.0);
    const SolveReport r = conjugate_gradient(operator_, identity_preconditioner(), rhs, x,
                                             tolerance, options_.max_iterations);
    if (report) *report = r;
    if (!r.converged)
      throw ConvergenceError("Laplace CG did not converge (relative residual " +
                                 std::to_string(r.relative_residual) + ")",
                             r.iterations, r.relative_residual);
    return x;
  }

  std::vector<double> solve(std::span<const double> rhs) const {
    return solve(rhs, options_.tolerance);
  }

 private:
  LatticeBox box_;
  LaplaceOptions options_;
  StencilOperator operator_;
  std::optional<Factorization> factor_;
  std::uint64_t fingerprint_ = 0;
};

inline std::vector<double> solve_laplace(const LatticeBox& box, std::span<const double> rhs,
                                         LaplaceOptions options = {}) {
  return LaplaceSolver(box, options).solve(rhs);
}

inline std::vector<double> unit_vector(const LatticeBox& box, const Site& x) {
  const Index i = box.index(x);
  if (i == kNoSite) throw SolverError("site outside the box");
  std::vector<double> e(std::size_t(box.size()), 0.0);
  e[std::size_t(i)] = 1.0;
  return e;
}

/// Gbar_N(x, y) = sum_z Gamma_N(x, z) Gamma_N(z, y).
inline double gbar(const LaplaceSolver& laplace, const Site& x, const Site& y) {
  const auto gx = laplace.solve(unit_vector(laplace.box(), x));
  const auto gy = x == y ? gx : laplace.solve(unit_vector(laplace.box(), y));
  return std::inner_product(gx.begin(), gx.end(), gy.begin(), 0.0);
}

/// Gbar_N(x, .) = Gamma_N (Gamma_N e_x).
inline std::vector<double> gbar_column(const LaplaceSolver& laplace, const Site& x) {
  return laplace.solve(laplace.solve(unit_vector(laplace.box(), x)));
}

struct GreenColumn {
  Site source{};
  std::vector<double> values;  // G_N(source, .) in site-index order
};

inline GreenColumn green_column(const Factorization& f, const LatticeBox& box, const Site& x) {
  if (f.size() != box.size()) throw SolverError("factorization does not match the box");
  return GreenColumn{x, f.solve(unit_vector(box, x))};
}

/// Bilaplacian solves by conjugate gradients preconditioned with
/// Gamma_N^2 (two nested Laplace solves). Q = Delta_N^2 + (boundary term),
/// so the preconditioned operator is a low-rank-ish perturbation of I.
class BilaplacianPcg {
 public:
  explicit BilaplacianPcg(const LatticeBox& box, LaplaceOptions laplace = {},
                          int max_iterations = 5'000,
                          LaplacianConvention convention = LaplacianConvention::normalized)
      : laplace_(box, laplace),
        operator_(box, precision_stencil(Model::membrane, box.dim(), convention)),
        max_iterations_(max_iterations) {}

  std::vector<double> solve(std::span<const double> rhs, double tolerance,
                            SolveReport* report = nullptr) const {
    std::vector<double> x(rhs.size(), 0.0);
    const double inner = std::min(1e-12, tolerance * 1e-3);
    auto precondition = [&](std::span<const double> in, std::span<double> out) {
      const auto y = laplace_.solve(laplace_.solve(in, inner), inner);
      std::copy(y.begin(), y.end(), out.begin());
    };
    const SolveReport r =
        conjugate_gradient(operator_, precondition, rhs, x, tolerance, max_iterations_);
    if (report) *report = r;
    if (!r.converged)
      throw ConvergenceError("bilaplacian PCG did not converge (relative residual " +
                                 std::to_string(r.relative_residual) + ")",
                             r.iterations, r.relative_residual);
    return x;
  }

  GreenColumn green_column(const Site& x, double tolerance = 1e-9) const {
    return GreenColumn{x, solve(unit_vector(laplace_.box(), x), tolerance)};
  }

  const LaplaceSolver& laplace() const { return laplace_; }

 private:
  LaplaceSolver laplace_;
  StencilOperator operator_;
  int max_iterations_;
};

// ---------------------------------------------------------------------------
// Result cache: <root>/<fingerprint>/<op>.bin
//
// Layout (little-endian): "MMCA", u32 version, u64 fingerprint, u32 op length,
// op bytes, u64 payload count, u64 payload checksum, f64 payload[count].

inline constexpr std::uint32_t kCacheFormatVersion = 1;

class SolverCache {
 public:
  SolverCache() = default;  // disabled
  explicit SolverCache(std::filesystem::path root, std::uint32_t version = kCacheFormatVersion)
      : root_(std::move(root)), version_(version), enabled_(!root_.empty()) {}

  bool enabled() const { return enabled_; }
  const std::filesystem::path& root() const { return root_; }

  std::filesystem::path path_for(std::uint64_t fp, const std::string& op) const {
    return root_ / fingerprint_hex(fp) / (op + ".bin");
  }

  std::optional<std::vector<double>> get(std::uint64_t fp, const std::string& op) const {
    if (!enabled_) return std::nullopt;
    std::lock_guard lock(mutex_);
    try {
      std::ifstream in(path_for(fp, op), std::ios::binary);
      if (!in) return std::nullopt;
      char magic[4];
      in.read(magic, 4);
      if (!in || std::string_view(magic, 4) != "MMCA") return std::nullopt;
      if (io::get<std::uint32_t>(in) != version_) return std::nullopt;
      if (io::get<std::uint64_t>(in) != fp) return std::nullopt;
      const auto len = io::get<std::uint32_t>(in);
      std::string stored(len, '\0');
      in.read(stored.data(), len);
      if (!in || stored != op) return std::nullopt;
      const auto count = io::get<std::uint64_t>(in);
      const auto checksum = io::get<std::uint64_t>(in);
      std::vector<double> payload(count);
      in.read(reinterpret_cast<char*>(payload.data()), std::streamsize(count * sizeof(double)));
      if (!in) return std::nullopt;
      if (checksum_of(payload) != checksum) return std::nullopt;
      return payload;
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }

  /// Returns false when the entry could not be written; callers carry on.
  bool put(std::uint64_t fp, const std::string& op, std::span<const double> payload) const {
    if (!enabled_) return false;
    std::lock_guard lock(mutex_);
    try {
      const auto path = path_for(fp, op);
      std::filesystem::create_directories(path.parent_path());
      auto tmp = path;
      tmp += ".tmp";
      {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) return false;
        out.write("MMCA", 4);
        io::put<std::uint32_t>(out, version_);
        io::put<std::uint64_t>(out, fp);
        io::put<std::uint32_t>(out, std::uint32_t(op.size()));
        out.write(op.data(), std::streamsize(op.size()));
        io::put<std::uint64_t>(out, payload.size());
        io::put<std::uint64_t>(out, checksum_of(payload));
        out.write(reinterpret_cast<const char*>(payload.data()),
                  std::streamsize(payload.size_bytes()));
        if (!out) return false;
      }
      std::filesystem::rename(tmp, path);
      return true;
    } catch (const std::exception&) {
      return false;
    }
  }

  static std::uint64_t checksum_of(std::span<const double> payload) {
    Fnv1a h;
    h.range(payload);
    return h.digest();
  }

 private:
  std::filesystem::path root_;
  std::uint32_t version_ = kCacheFormatVersion;
  bool enabled_ = false;
  mutable std::mutex mutex_;
};

struct GreenOptions {
  FactorOptions factor;
  // Membrane boxes in d >= 3 above this many sites use BilaplacianPcg with
  // iterative Laplace solves instead of a sparse factorization.
  Index direct_limit = 40'000;
  double tolerance = 1e-11;
};

/// Green's function columns of one precision matrix, served from the cache
/// when possible; the solver is only built on the first miss.
class GreenSource {
 public:
  GreenSource(PrecisionMatrix q, const SolverCache& cache, GreenOptions options = {})
      : q_(std::move(q)), cache_(cache), options_(options), fp_(membrane::fingerprint(q_.entries)) {}

  const LatticeBox& box() const { return q_.box; }
  const PrecisionMatrix& matrix() const { return q_; }
  std::uint64_t fingerprint() const { return fp_; }
  bool factorized() const { return factor_.has_value(); }
  bool iterative() const {
    return q_.model == Model::membrane && q_.box.dim() >= 3 && q_.box.size() > options_.direct_limit;
  }

  const Factorization& factorization() {
    std::call_once(*once_, [&] { factor_ = factorize(q_, options_.factor); });
    return *factor_;
  }

  GreenColumn column(const Site& x) {
    const std::string op = "green_" + std::to_string(q_.box.index(x));
    if (auto hit = cache_.get(fp_, op)) return GreenColumn{x, std::move(*hit)};
    GreenColumn g;
    if (iterative()) {
      if (!pcg_) {
        LaplaceOptions lo;
        lo.direct_limit = 0;
        pcg_.emplace(q_.box, lo, 5'000, q_.convention);
      }
      g = pcg_->green_column(x, options_.tolerance);
    } else {
      g = green_column(factorization(), q_.box, x);
    }
    cache_.put(fp_, op, g.values);
    return g;
  }

  void release() {
    factor_.reset();
    pcg_.reset();
    once_ = std::make_unique<std::once_flag>();
  }

 private:
  PrecisionMatrix q_;
  const SolverCache& cache_;
  GreenOptions options_;
  std::uint64_t fp_;
  std::optional<Factorization> factor_;
  std::optional<BilaplacianPcg> pcg_;
  std::unique_ptr<std::once_flag> once_ = std::make_unique<std::once_flag>();
};

/// Gbar columns served from the cache, computed by two Laplace solves.
inline std::vector<double> cached_gbar_column(const LatticeBox& box, const Site& x,
                                              const SolverCache& cache,
                                              LaplaceOptions options = {}) {
  const auto q = assemble_precision(box, Model::dgff);
  const auto fp = fingerprint(q.entries);
  const std::string op = "gbar_" + std::to_string(box.index(x));
  if (auto hit = cache.get(fp, op)) return std::move(*hit);
  LaplaceSolver laplace(box, options);
  auto col = gbar_column(laplace, x);
  cache.put(fp, op, col);
  return col;
}

}  // namespace membrane
