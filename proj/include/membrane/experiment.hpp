#pragma once

// Experiment runners behind the membrane_lab subcommands. Each runner turns
// an ExperimentConfig into a Report: one record row per (N, replica, level)
// plus ratio and fit summary rows.

#include <atomic>
#include <chrono>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <random>
#include <thread>
#include <tuple>
#include <vector>

#include "membrane/config.hpp"
#include "membrane/gaussian.hpp"
#include "membrane/lattice.hpp"
#include "membrane/operators.hpp"
#include "membrane/report.hpp"
#include "membrane/solver.hpp"
#include "membrane/statistics.hpp"
#include "membrane/theory.hpp"

namespace membrane {

/// Set from a signal handler; runners stop scheduling new replicas.
inline std::atomic<bool>& stop_requested() {
  static std::atomic<bool> flag{false};
  return flag;
}

struct RunContext {
  std::ostream* log = nullptr;  // progress; never data
  void note(const std::string& msg) const {
    if (log) *log << msg << std::endl;
  }
};

inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> tags) {
  Fnv1a h;
  h.value(master);
  for (auto t : tags) h.value(t);
  return h.digest();
}

/// Laplace solves: direct in low dimension, CG where 4-d fill makes sparse
/// factorization expensive.
inline LaplaceOptions laplace_options_for(int d, double tolerance) {
  LaplaceOptions o;
  o.direct_limit = d >= 3 ? 0 : 4'000'000;
  o.tolerance = tolerance;
  return o;
}

inline double model_g(Model m) { return m == Model::membrane ? theory::g_const() : theory::dgff_g_const(); }

/// Draws the replicas of one box; built lazily so a fully cached rerun does
/// no linear algebra.
class FieldFactory {
 public:
  FieldFactory(const ExperimentConfig& cfg, int N)
      : cfg_(cfg), N_(N), box_(build_box(N, cfg.d, cfg.site_budget)),
        seed_(derive_seed(cfg.seed, {std::uint64_t(N), std::uint64_t(cfg.d), std::uint64_t(cfg.model)})) {
    sampler_ = cfg.model == Model::dgff ? Sampler::exact : cfg.sampler_for(N);
    if (cfg.model == Model::dgff && cfg.sampler == SamplerChoice::gbar)
      throw ConfigError("the gbar sampler is a membrane-model proxy; use exact for the dgff");
  }

  const LatticeBox& box() const { return box_; }
  Sampler sampler() const { return sampler_; }
  std::uint64_t seed() const { return seed_; }

  void prepare() {
    std::call_once(once_, [&] {
      if (sampler_ == Sampler::exact)
        factor_.emplace(factorize(assemble_precision(box_, cfg_.model, cfg_.convention), cfg_.factor_options()));
      else
        laplace_.emplace(box_, laplace_options_for(cfg_.d, cfg_.tolerance));
    });
  }

  FieldSample draw(std::uint64_t replica) {
    prepare();
    if (sampler_ == Sampler::exact) return sample_exact(*factor_, box_, cfg_.model, seed_, replica);
    return sample_gbar(*laplace_, seed_, replica, cfg_.tolerance);
  }

 private:
  const ExperimentConfig& cfg_;
  int N_;
  LatticeBox box_;
  std::uint64_t seed_;
  Sampler sampler_;
  std::once_flag once_;
  std::optional<Factorization> factor_;
  std::optional<LaplaceSolver> laplace_;
};

// ---------------------------------------------------------------------------
// Per-replica persistence for resume

class ReplicaStore {
 public:
  ReplicaStore(const ExperimentConfig& cfg, const std::string& command) {
    if (!cfg.use_cache || cfg.cache_dir.empty()) return;
    // A replica's rows do not depend on how many replicas run, so raising
    // the count reuses the finished ones.
    ExperimentConfig key = cfg;
    key.replicas = 0;
    dir_ = std::filesystem::path(cfg.cache_dir) / "runs" / (std::string(kCodeVersion) + "-" + key.fingerprint()) / command;
  }

  std::optional<std::vector<ReportRow>> load(int N, std::uint64_t replica) const {
    if (dir_.empty()) return std::nullopt;
    std::ifstream in(path(N, replica));
    if (!in) return std::nullopt;
    try {
      std::vector<ReportRow> rows;
      std::string line;
      bool complete = false;
      while (std::getline(in, line)) {
        if (line == "end") {
          complete = true;
          break;
        }
        const auto j = nlohmann::json::parse(line);
        ReportRow row;
        for (auto it = j.begin(); it != j.end(); ++it) {
          if (it->is_number_integer()) row.set(it.key(), Value(it->get<std::int64_t>()));
          else if (it->is_number()) row.set(it.key(), Value(it->get<double>()));
          else if (it->is_object()) row.set(it.key(), Value(std::stod(it->at("f").get<std::string>())));
          else row.set(it.key(), Value(it->get<std::string>()));
        }
        rows.push_back(std::move(row));
      }
      if (!complete) return std::nullopt;
      return rows;
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }

  void save(int N, std::uint64_t replica, const std::vector<ReportRow>& rows) const {
    if (dir_.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) return;
    const auto target = path(N, replica);
    auto tmp = target;
    tmp += ".tmp";
    {
      std::ofstream out(tmp);
      for (const auto& row : rows) {
        out << "{";
        bool first = true;
        for (const auto& [k, v] : row.fields) {
          out << (first ? "" : ",") << nlohmann::json(k).dump() << ":";
          // Non-finite doubles are boxed so they come back as doubles.
          if (auto d = std::get_if<double>(&v); d && !std::isfinite(*d))
            out << "{\"f\":\"" << format_double(*d) << "\"}";
          else
            out << detail::json_value(v);
          first = false;
        }
        out << "}\n";
      }
      out << "end\n";
      if (!out) return;
    }
    std::filesystem::rename(tmp, target, ec);
  }

 private:
  std::filesystem::path path(int N, std::uint64_t replica) const {
    return dir_ / ("N" + std::to_string(N) + "_r" + std::to_string(replica) + ".ndjson");
  }
  std::filesystem::path dir_;
};

/// Runs fn(sample) for every replica of one N on a bounded worker pool and
/// appends the rows in replica order. Cached replicas are not recomputed.
inline void run_replicas(const ExperimentConfig& cfg, const RunContext& ctx, Report& report, int N,
                         const std::function<std::vector<ReportRow>(const FieldSample&)>& fn) {
  FieldFactory factory(cfg, N);
  const ReplicaStore store(cfg, report.command);
  const int R = cfg.replicas;
  std::vector<std::optional<std::vector<ReportRow>>> results(static_cast<std::size_t>(R));
  for (int r = 0; r < R; ++r) results[std::size_t(r)] = store.load(N, std::uint64_t(r));

  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex mutex;
  auto worker = [&] {
    while (true) {
      const int r = next++;
      if (r >= R) return;
      if (results[std::size_t(r)]) continue;
      if (stop_requested()) return;
      try {
        const FieldSample s = factory.draw(std::uint64_t(r));
        std::vector<ReportRow> rows = fn(s);
        for (auto& row : rows) {
          row.set("kind", "record").set("model", to_string(cfg.model)).set("sampler", to_string(factory.sampler()));
          row.set("d", cfg.d).set("N", N).set("replica", r).set("seed", std::to_string(factory.seed()));
          row.set("ell", cfg.ell);
        }
        store.save(N, std::uint64_t(r), rows);
        std::lock_guard lock(mutex);
        results[std::size_t(r)] = std::move(rows);
        ctx.note(report.command + ": N=" + std::to_string(N) + " replica " + std::to_string(r + 1) + "/" +
                 std::to_string(R) + " (" + to_string(factory.sampler()) + ")");
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!failure) failure = std::current_exception();
        stop_requested() = true;
        return;
      }
    }
  };
  const int threads = std::max(1, std::min(cfg.workers, R));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  for (auto& res : results) {
    if (!res) {
      report.interrupted = true;
      continue;
    }
    for (auto& row : *res) report.add(std::move(row));
  }
}

// ---------------------------------------------------------------------------
// Summaries

struct SummaryPlan {
  std::string statistic;    // name written to the summary rows
  std::string ratio_column; // per-record ratio
  std::string fit_column;   // per-record statistic for the fit; empty: none
  bool linear_fit = false;  // fit statistic against log N instead of log-log
  std::vector<std::string> level_columns;
  std::function<std::optional<double>(const ReportRow&)> prediction;
};

namespace detail {

inline double sample_sd(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return std::nan("");
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / double(v.size() - 1));
}

}  // namespace detail

inline void summarize(Report& report, const SummaryPlan& plan) {
  // Group record rows by level values, preserving first appearance.
  std::vector<std::pair<std::vector<std::string>, std::vector<const ReportRow*>>> groups;
  for (const auto& row : report.rows) {
    if (row.text("kind") != "record") continue;
    std::vector<std::string> key;
    for (const auto& c : plan.level_columns) key.push_back(detail::csv_cell(row.get(c)));
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == key; });
    if (it == groups.end()) {
      groups.push_back({key, {}});
      it = groups.end() - 1;
    }
    it->second.push_back(&row);
  }
  std::vector<ReportRow> out;
  for (const auto& [key, rows] : groups) {
    ReportRow levels;
    for (const auto& c : plan.level_columns) levels.set(c, rows.front()->get(c));
    const auto prediction = plan.prediction ? plan.prediction(*rows.front()) : std::nullopt;

    std::vector<int> Ns;
    for (const auto* r : rows) Ns.push_back(int(r->number("N")));
    std::sort(Ns.begin(), Ns.end());
    Ns.erase(std::unique(Ns.begin(), Ns.end()), Ns.end());
    for (int N : Ns) {
      std::vector<double> ratios;
      int zeros = 0;
      for (const auto* r : rows) {
        if (int(r->number("N")) != N) continue;
        if (r->has(plan.ratio_column) && std::isfinite(r->number(plan.ratio_column)))
          ratios.push_back(r->number(plan.ratio_column));
        else
          ++zeros;
      }
      ReportRow s = levels;
      s.set("kind", "ratio").set("statistic", plan.statistic).set("N", N);
      s.set("n", int(ratios.size())).set("zeros", zeros);
      if (!ratios.empty()) {
        double mean = 0;
        for (double x : ratios) mean += x / double(ratios.size());
        s.set("mean_ratio", mean);
        if (ratios.size() > 1) s.set("sd_ratio", detail::sample_sd(ratios, mean));
      }
      s.set_opt("prediction", prediction);
      out.push_back(std::move(s));
    }

    if (plan.fit_column.empty()) continue;
    std::vector<std::pair<double, double>> pts;
    for (const auto* r : rows)
      if (r->has(plan.fit_column)) pts.push_back({r->number("N"), r->number(plan.fit_column)});
    ReportRow f = levels;
    f.set("kind", "fit").set("statistic", plan.statistic);
    try {
      if (plan.linear_fit) {
        std::vector<std::pair<double, double>> xy;
        for (auto [N, v] : pts) xy.push_back({std::log(N), v});
        const LinearFit lf = linear_fit(xy);
        f.set("slope", lf.slope).set("intercept", lf.intercept).set("half_width", lf.half_width);
        f.set("residual_norm", lf.residual_norm).set("points", int(xy.size())).set("dropped", 0);
      } else {
        const ExponentFit ef = exponent_fit(pts);
        f.set("slope", ef.slope).set("intercept", ef.intercept).set("half_width", ef.half_width);
        f.set("residual_norm", ef.residual_norm).set("points", int(ef.points.size())).set("dropped", ef.dropped);
        if (ef.dropped > 0)
          report.warnings.push_back(plan.statistic + ": " + std::to_string(ef.dropped) +
                                    " zero-count records left out of the fit");
      }
    } catch (const InsufficientDataError& e) {
      report.warnings.push_back(plan.statistic + ": no fit (" + e.what() + ")");
      f.set("detail", std::string(e.what()));
    }
    f.set_opt("prediction", prediction);
    out.push_back(std::move(f));
  }
  for (auto& row : out) report.add(std::move(row));
}

// ---------------------------------------------------------------------------
// Runners

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{
      "command", "kind", "check", "statistic", "model", "sampler", "d", "N", "replica", "seed", "ell",
      "eta", "alpha", "beta", "count", "center_count", "center_high", "center_ratio", "palm_centers",
      "palm_ratio", "high_count", "pairs", "offdiag_pairs", "square", "max", "base", "direction", "t",
      "distance", "G", "Gbar", "log_profile", "var_center", "gbar_center", "residual", "max_profile_dev",
      "max_gap", "ratio", "n", "zeros", "mean_ratio", "sd_ratio", "slope", "intercept", "half_width",
      "residual_norm", "points", "dropped", "measured", "bound", "pass", "detail", "path", "min", "mean",
      "value", "prediction", "prediction_conditional", "provenance", "config_fp", "code_version"};
  return cols;
}

/// Keeps the master column order, restricted to columns some row uses.
inline void finalize_columns(Report& r) {
  r.columns.clear();
  for (const auto& c : report_columns())
    for (const auto& row : r.rows)
      if (row.has(c)) {
        r.columns.push_back(c);
        break;
      }
}

inline Report new_report(const ExperimentConfig& cfg, const std::string& command) {
  Report r;
  r.command = command;
  r.config_fingerprint = cfg.fingerprint();
  if (cfg.replicas == 0 && command != "validate" && command != "green" && command != "report")
    r.warnings.push_back("replicas = 0: nothing to sample");
  return r;
}

inline std::optional<double> ratio_of(double value, int N) {
  if (!(value > 0) || N < 2) return std::nullopt;
  return std::log(value) / std::log(double(N));
}

inline std::optional<double> predicted_high_point_dim(Model m, double eta) {
  if (!(eta > 0 && eta < 1)) return std::nullopt;
  return m == Model::membrane ? theory::high_point_dim(eta) : theory::dgff_high_point_dim(eta);
}

inline Report run_exponents(const ExperimentConfig& cfg, const RunContext& ctx = {}) {
  cfg.validate();
  Report report = new_report(cfg, "exponents");
  for (int N : cfg.N_list) {
    run_replicas(cfg, ctx, report, N, [&](const FieldSample& s) {
      const LatticeBox bulk = inner_box(s.box, cfg.ell);
      std::vector<ReportRow> rows;
      for (double eta : cfg.eta) {
        const auto level = LevelThreshold::for_model(cfg.model, cfg.d, eta, N);
        const auto count = std::int64_t(high_points(s, level.value(), bulk).size());
        ReportRow row;
        row.set("eta", eta).set("count", count).set_opt("ratio", ratio_of(double(count), N));
        row.set_opt("prediction", predicted_high_point_dim(cfg.model, eta));
        rows.push_back(std::move(row));
      }
      return rows;
    });
  }
  summarize(report, {"high_points", "ratio", "count", false, {"eta"}, [&](const ReportRow& r) {
                       return predicted_high_point_dim(cfg.model, r.number("eta"));
                     }});
  finalize_columns(report);
  return report;
}

inline Report run_clusters(const ExperimentConfig& cfg, const RunContext& ctx = {}) {
  cfg.validate();
  Report report = new_report(cfg, "clusters");
  for (int N : cfg.N_list) {
    run_replicas(cfg, ctx, report, N, [&](const FieldSample& s) {
      const LatticeBox bulk = inner_box(s.box, cfg.ell);
      const Site centre = s.box.center();
      std::vector<ReportRow> rows;
      for (double alpha : cfg.alpha) {
        const auto level = LevelThreshold::for_model(cfg.model, cfg.d, alpha, N);
        const auto high = high_points(s, level.value(), bulk);
        for (double beta : cfg.beta) {
          const double radius = std::pow(double(N), beta);
          ReportRow row;
          row.set("alpha", alpha).set("beta", beta);
          const auto c = cluster_count(s, level, bulk, centre, beta);
          row.set("center_count", c).set("center_high", int(s.at(centre) >= level.value()));
          row.set_opt("center_ratio", ratio_of(double(c), N));
          // Conditioning on x in H_N(alpha), estimated by averaging over
          // every high point of the sample as centre.
          double sum = 0;
          for (const Site& x : high)
            sum += std::log(double(annulus_count(s, level.value(), bulk, x, -1, radius))) / std::log(double(N));
          row.set("palm_centers", std::int64_t(high.size()));
          if (!high.empty()) row.set("palm_ratio", sum / double(high.size()));
          if (alpha < beta) row.set("prediction", theory::cluster_dim(alpha, beta));
          row.set("prediction_conditional", theory::cluster_dim_conditional(alpha, beta));
          rows.push_back(std::move(row));
        }
      }
      return rows;
    });
  }
  summarize(report, {"cluster_fixed_center", "center_ratio", "center_count", false, {"alpha", "beta"},
                     [](const ReportRow& r) -> std::optional<double> {
                       const double a = r.number("alpha"), b = r.number("beta");
                       if (a < b) return theory::cluster_dim(a, b);
                       return std::nullopt;
                     }});
  summarize(report, {"cluster_conditional", "palm_ratio", "", false, {"alpha", "beta"},
                     [](const ReportRow& r) -> std::optional<double> {
                       return theory::cluster_dim_conditional(r.number("alpha"), r.number("beta"));
                     }});
  finalize_columns(report);
  return report;
}

inline Report run_pairs(const ExperimentConfig& cfg, const RunContext& ctx = {}) {
  cfg.validate();
  Report report = new_report(cfg, "pairs");
  for (int N : cfg.N_list) {
    run_replicas(cfg, ctx, report, N, [&](const FieldSample& s) {
      const LatticeBox bulk = inner_box(s.box, cfg.ell);
      std::vector<ReportRow> rows;
      for (double alpha : cfg.alpha) {
        const auto level = LevelThreshold::for_model(cfg.model, cfg.d, alpha, N);
        const auto high = high_points(s, level.value(), bulk);
        for (double beta : cfg.beta) {
          const auto all = pair_count(high, std::pow(double(N), beta), true);
          const auto off = all - std::int64_t(high.size());
          const auto used = cfg.include_diagonal ? all : off;
          ReportRow row;
          row.set("alpha", alpha).set("beta", beta).set("high_count", std::int64_t(high.size()));
          row.set("pairs", all).set("offdiag_pairs", off).set_opt("ratio", ratio_of(double(used), N));
          row.set("prediction", theory::rho(alpha, beta));
          rows.push_back(std::move(row));
        }
      }
      return rows;
    });
  }
  summarize(report, {cfg.include_diagonal ? "pairs" : "offdiag_pairs", "ratio",
                     cfg.include_diagonal ? "pairs" : "offdiag_pairs", false, {"alpha", "beta"},
                     [](const ReportRow& r) -> std::optional<double> {
                       return theory::rho(r.number("alpha"), r.number("beta"));
                     }});
  finalize_columns(report);
  return report;
}

inline Report run_square(const ExperimentConfig& cfg, const RunContext& ctx = {}) {
  cfg.validate();
  Report report = new_report(cfg, "square");
  for (int N : cfg.N_list) {
    run_replicas(cfg, ctx, report, N, [&](const FieldSample& s) {
      const LatticeBox bulk = inner_box(s.box, cfg.ell);
      std::vector<ReportRow> rows;
      for (double eta : cfg.eta) {
        const auto level = LevelThreshold::for_model(cfg.model, cfg.d, eta, N);
        const int a = biggest_high_square(s, level.value(), bulk);
        ReportRow row;
        row.set("eta", eta).set("square", a).set_opt("ratio", ratio_of(double(a), N));
        row.set("prediction", theory::square_exp(eta));
        rows.push_back(std::move(row));
      }
      return rows;
    });
  }
  summarize(report, {"square", "ratio", "square", false, {"eta"}, [](const ReportRow& r) -> std::optional<double> {
                       return theory::square_exp(r.number("eta"));
                     }});
  finalize_columns(report);
  return report;
}

inline Report run_max(const ExperimentConfig& cfg, const RunContext& ctx = {}) {
  cfg.validate();
  Report report = new_report(cfg, "max");
  const double rate = theory::max_rate(cfg.d, model_g(cfg.model));
  for (int N : cfg.N_list) {
    run_replicas(cfg, ctx, report, N, [&](const FieldSample& s) {
      const auto [x, v] = max_in_region(s, s.box);
      ReportRow row;
      row.set("max", v).set("prediction", rate);
      if (N >= 2) row.set("ratio", v / std::log(double(N)));
      return std::vector<ReportRow>{row};
    });
  }
  summarize(report, {"max_over_log_n", "ratio", "max", true, {}, [rate](const ReportRow&) -> std::optional<double> {
                       return rate;
                     }});
  finalize_columns(report);
  return report;
}

// ---------------------------------------------------------------------------
// Covariance studies

/// Base points of the stratified bulk pair set: the centre and points half
/// way to the bulk edge along an axis and a diagonal.
inline std::vector<Site> covariance_bases(const LatticeBox& box, double ell) {
  const int L = box.half_width() - bulk_depth(box.half_width(), ell);
  std::vector<Site> out{Site{}};
  if (L / 2 >= 1) {
    Site a{};
    a[0] = L / 2;
    out.push_back(a);
    if (box.dim() >= 2) {
      Site b = a;
      b[1] = L / 2;
      out.push_back(b);
    }
  }
  return out;
}

/// Axis, two-axis diagonal and full diagonal directions with both signs.
inline std::vector<Site> covariance_directions(int d) {
  std::vector<Site> dirs;
  Site axis{}, diag2{}, full{};
  axis[0] = 1;
  dirs.push_back(axis);
  if (d >= 2) {
    diag2[0] = diag2[1] = 1;
    dirs.push_back(diag2);
  }
  if (d >= 3) {
    for (int k = 0; k < d; ++k) full[k] = 1;
    dirs.push_back(full);
  }
  const std::size_t n = dirs.size();
  for (std::size_t i = 0; i < n; ++i) {
    Site neg{};
    for (int k = 0; k < kMaxDim; ++k) neg[k] = -dirs[i][k];
    dirs.push_back(neg);
  }
  return dirs;
}

struct CovariancePair {
  Site x, y;
  std::size_t base = 0, direction = 0;
  int t = 0;
};

/// y = x + t * direction, t = 1, 2, ..., for as long as y stays in the bulk.
inline std::vector<CovariancePair> stratified_pairs(const LatticeBox& box, double ell) {
  const LatticeBox bulk = inner_box(box, ell);
  const auto bases = covariance_bases(box, ell);
  const auto dirs = covariance_directions(box.dim());
  std::vector<CovariancePair> out;
  for (std::size_t b = 0; b < bases.size(); ++b)
    for (std::size_t k = 0; k < dirs.size(); ++k)
      for (int t = 1;; ++t) {
        Site y = bases[b];
        for (int c = 0; c < kMaxDim; ++c) y[c] += t * dirs[k][c];
        if (!bulk.contains(y)) break;
        out.push_back({bases[b], y, b, k, t});
      }
  return out;
}

struct CovarianceStudy {
  int N = 0;
  double var_center = 0;
  double gbar_center = std::nan("");
  double max_profile_dev = 0;  // max |Cov - g (log N - log|x - y|)| over the pairs
  double max_gap = std::nan("");  // max |G - Gbar| over bases x and bulk y
  std::vector<CovariancePair> pairs;
  std::vector<double> G, Gbar;  // per pair
};

/// Exact covariances at the base points (cached Green columns) and, for the
/// membrane, the Gbar comparison.
inline CovarianceStudy covariance_study(Model model, int d, int N, double ell, const SolverCache& cache,
                                        LaplacianConvention convention = LaplacianConvention::normalized,
                                        const FactorOptions& factor = {}, bool with_gbar = true) {
  CovarianceStudy st;
  st.N = N;
  const LatticeBox box = build_box(N, d);
  const LatticeBox bulk = inner_box(box, ell);
  GreenOptions go;
  go.factor = factor;
  GreenSource green(assemble_precision(box, model, convention), cache, go);
  const double g = model_g(model);
  const auto bases = covariance_bases(box, ell);
  st.pairs = stratified_pairs(box, ell);
  std::vector<std::vector<double>> gcol, bcol;
  for (const Site& x : bases) gcol.push_back(green.column(x).values);
  green.release();
  const bool gbar = with_gbar && model == Model::membrane;
  if (gbar)
    for (const Site& x : bases) bcol.push_back(cached_gbar_column(box, x, cache, laplace_options_for(d, 1e-13)));
  const std::size_t c0 = std::size_t(box.index(Site{}));
  st.var_center = gcol[0][c0];
  if (gbar) st.gbar_center = bcol[0][c0];
  for (const auto& p : st.pairs) {
    const std::size_t j = std::size_t(box.index(p.y));
    st.G.push_back(gcol[p.base][j]);
    st.Gbar.push_back(gbar ? bcol[p.base][j] : std::nan(""));
    const double profile = g * (std::log(double(N)) - std::log(euclidean_norm(p.y - p.x)));
    st.max_profile_dev = std::max(st.max_profile_dev, std::abs(st.G.back() - profile));
  }
  if (gbar) {
    st.max_gap = 0;
    for (std::size_t b = 0; b < bases.size(); ++b)
      for (Index i = 0; i < bulk.size(); ++i) {
        const std::size_t j = std::size_t(box.index(bulk.site(i)));
        st.max_gap = std::max(st.max_gap, std::abs(gcol[b][j] - bcol[b][j]));
      }
  }
  return st;
}

inline Report run_green(const ExperimentConfig& cfg, const RunContext& ctx = {}) {
  cfg.validate();
  Report report = new_report(cfg, "green");
  const auto cache = cfg.cache();
  const double g = model_g(cfg.model);
  std::vector<std::pair<double, double>> var_points;
  for (int N : cfg.N_list) {
    ctx.note("green: N=" + std::to_string(N));
    const auto st = covariance_study(cfg.model, cfg.d, N, cfg.ell, cache, cfg.convention, cfg.factor_options());
    const auto dirs = covariance_directions(cfg.d);
    for (std::size_t i = 0; i < st.pairs.size(); ++i) {
      const auto& p = st.pairs[i];
      ReportRow row;
      row.set("kind", "profile").set("model", to_string(cfg.model)).set("d", cfg.d).set("N", N).set("ell", cfg.ell);
      row.set("base", int(p.base)).set("direction", int(p.direction)).set("t", p.t);
      row.set("distance", euclidean_norm(p.y - p.x)).set("G", st.G[i]);
      if (std::isfinite(st.Gbar[i])) row.set("Gbar", st.Gbar[i]);
      row.set("log_profile", g * (std::log(double(N)) - std::log(euclidean_norm(p.y - p.x))));
      report.add(std::move(row));
    }
    ReportRow c;
    c.set("kind", "center").set("model", to_string(cfg.model)).set("d", cfg.d).set("N", N).set("ell", cfg.ell);
    c.set("var_center", st.var_center).set("residual", st.var_center - g * std::log(double(N)));
    if (std::isfinite(st.gbar_center)) c.set("gbar_center", st.gbar_center);
    c.set("max_profile_dev", st.max_profile_dev);
    if (std::isfinite(st.max_gap)) c.set("max_gap", st.max_gap);
    c.set("prediction", g);
    report.add(std::move(c));
    var_points.push_back({std::log(double(N)), st.var_center});
  }
  if (var_points.size() >= 3) {
    const LinearFit lf = linear_fit(var_points);
    ReportRow f;
    f.set("kind", "fit").set("statistic", "var_center").set("slope", lf.slope).set("intercept", lf.intercept);
    f.set("half_width", lf.half_width).set("residual_norm", lf.residual_norm).set("points", int(var_points.size()));
    f.set("prediction", g);
    report.add(std::move(f));
  } else {
    report.warnings.push_back("green: fewer than 3 N values, no variance slope");
  }
  finalize_columns(report);
  return report;
}

// ---------------------------------------------------------------------------
// Samples to disk

inline Report run_sample(const ExperimentConfig& cfg, const std::filesystem::path& dir, const RunContext& ctx = {}) {
  cfg.validate();
  Report report = new_report(cfg, "sample");
  std::filesystem::create_directories(dir);
  for (int N : cfg.N_list) {
    FieldFactory factory(cfg, N);
    for (int r = 0; r < cfg.replicas; ++r) {
      if (stop_requested()) {
        report.interrupted = true;
        break;
      }
      const auto s = factory.draw(std::uint64_t(r));
      const std::string name = std::string("sample_") + to_string(cfg.model) + "_d" + std::to_string(cfg.d) + "_N" +
                               std::to_string(N) + "_r" + std::to_string(r) + ".bin";
      std::ofstream out(dir / name, std::ios::binary);
      write_sample(out, s);
      double lo = s.values[0], hi = s.values[0], mean = 0;
      for (double v : s.values) lo = std::min(lo, v), hi = std::max(hi, v), mean += v / double(s.values.size());
      ReportRow row;
      row.set("kind", "record").set("model", to_string(cfg.model)).set("sampler", to_string(s.sampler));
      row.set("d", cfg.d).set("N", N).set("replica", r).set("seed", std::to_string(s.seed));
      row.set("path", name).set("min", lo).set("max", hi).set("mean", mean);
      report.add(std::move(row));
      ctx.note("sample: " + name);
    }
  }
  finalize_columns(report);
  return report;
}

// ---------------------------------------------------------------------------
// Validation suite

namespace detail {

struct CheckResult {
  double measured = 0;
  std::string bound;
  bool pass = false;
  std::string detail;
};

/// Expected visits of simple random walk from x before leaving the box,
/// counted from time 0: the Monte Carlo side of the Gamma_N check.
inline std::pair<std::vector<double>, std::vector<double>> random_walk_visits(const LatticeBox& box, const Site& x,
                                                                              int walks, std::uint64_t seed) {
  const std::size_t n = std::size_t(box.size());
  std::vector<double> sum(n, 0.0), sum2(n, 0.0);
  std::vector<int> count(n, 0);
  std::vector<std::size_t> touched;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> step(0, 2 * box.dim() - 1);
  for (int w = 0; w < walks; ++w) {
    Site s = x;
    touched.clear();
    while (box.contains(s)) {
      const auto i = std::size_t(box.index(s));
      if (count[i]++ == 0) touched.push_back(i);
      const int move = step(rng);
      s[move / 2] += (move % 2) ? 1 : -1;
    }
    for (std::size_t i : touched) {
      sum[i] += count[i];
      sum2[i] += double(count[i]) * count[i];
      count[i] = 0;
    }
  }
  std::vector<double> mean(n), se(n);
  for (std::size_t i = 0; i < n; ++i) {
    mean[i] = sum[i] / walks;
    se[i] = std::sqrt(std::max(sum2[i] / walks - mean[i] * mean[i], 0.0) / walks);
  }
  return {mean, se};
}

}  // namespace detail

inline Report run_validate(const ExperimentConfig& cfg, const RunContext& ctx = {}) {
  Report report = new_report(cfg, "validate");
  const auto cache = cfg.cache();
  auto check = [&](const std::string& name, const std::function<detail::CheckResult()>& fn) {
    ctx.note("validate: " + name);
    ReportRow row;
    row.set("kind", "check").set("check", name);
    try {
      const auto r = fn();
      row.set("measured", r.measured).set("bound", r.bound).set("pass", r.pass);
      if (!r.detail.empty()) row.set("detail", r.detail);
      if (!r.pass) report.failed = true;
    } catch (const std::exception& e) {
      row.set("pass", false).set("detail", std::string("error: ") + e.what());
      report.failed = true;
    }
    report.add(std::move(row));
  };

  check("green_residual", [&] {
    double worst = 0;
    const SolverCache no_cache;
    for (auto [d, N] : {std::pair{2, 6}, std::pair{4, 3}}) {
      const auto q = assemble_precision(build_box(N, d), Model::membrane, cfg.convention);
      GreenSource src(q, no_cache, GreenOptions{cfg.factor_options()});
      for (const Site& x : {Site{}, Site{1, 0, 0, 0}}) {
        const auto col = src.column(x).values;
        std::vector<double> qg(col.size());
        q.entries.multiply(col, qg);
        const auto e = unit_vector(q.box, x);
        for (std::size_t i = 0; i < col.size(); ++i) worst = std::max(worst, std::abs(qg[i] - e[i]));
      }
    }
    return detail::CheckResult{worst, "<= 1e-9", worst <= 1e-9, "max |Q G e_x - e_x|, membrane d=2 N=6 and d=4 N=3"};
  });

  check("random_walk_green", [&] {
    const LatticeBox box = build_box(4, 2);
    const LaplaceSolver laplace(box);
    const auto gamma = laplace.solve(unit_vector(box, Site{}));
    const auto [mean, se] = detail::random_walk_visits(box, Site{}, 200'000, derive_seed(cfg.seed, {7}));
    double worst = 0;
    for (std::size_t i = 0; i < mean.size(); ++i)
      if (se[i] > 0) worst = std::max(worst, std::abs(mean[i] - gamma[i]) / se[i]);
    return detail::CheckResult{worst, "<= 5 standard errors", worst <= 5,
                               "dgff d=2 N=4: Gamma_N(0, .) vs random-walk visits from 0"};
  });

  check("markov_submatrix", [&] {
    const LatticeBox box = build_box(4, 4);
    const auto q = assemble_precision(box, Model::membrane, cfg.convention);
    const auto stencil = precision_stencil(Model::membrane, 4, cfg.convention);
    std::int64_t mismatches = 0, boxes = 0;
    const int lim = box.half_width() - 2;
    for (int s = 1; s <= 2 * lim + 1; ++s)
      for (int a = -lim; a + s - 1 <= lim; ++a)
        for (int b = -lim; b + s - 1 <= lim; ++b)
          for (int c = -lim; c + s - 1 <= lim; ++c)
            for (int e = -lim; e + s - 1 <= lim; ++e) {
              const Site lo{a, b, c, e}, hi{a + s - 1, b + s - 1, c + s - 1, e + s - 1};
              const LatticeBox sub = LatticeBox::from_corners(4, lo, hi);
              const auto qb = assemble_truncated(sub, stencil);
              ++boxes;
              for (Index i = 0; i < sub.size(); ++i)
                for (Index j = 0; j < sub.size(); ++j)
                  if (qb.at(int(i), int(j)) != q.entries.at(int(box.index(sub.site(i))), int(box.index(sub.site(j)))))
                    ++mismatches;
            }
    return detail::CheckResult{double(mismatches), "== 0", mismatches == 0,
                               std::to_string(boxes) + " cubic sub-boxes of a d=4 N=4 box: Q_B equals the restriction of Q_N"};
  });

  // Exact Var(phi_0) in d = 4 along N = 3..8.
  std::vector<std::pair<double, double>> var_points;
  check("variance_slope", [&] {
    var_points.clear();
    GreenOptions go{cfg.factor_options()};
    for (int N = 3; N <= 8; ++N) {
      GreenSource src(assemble_precision(build_box(N, 4), Model::membrane, cfg.convention), cache, go);
      const auto col = src.column(Site{}).values;
      var_points.push_back({std::log(double(N)), col[std::size_t(src.box().index(Site{}))]});
    }
    const double slope = linear_fit(var_points).slope;
    return detail::CheckResult{slope, "in [0.65, 0.97]", slope >= 0.65 && slope <= 0.97,
                               "least-squares slope of Var(phi_0) vs log N, d=4 N=3..8; g = 8/pi^2 = 0.8106"};
  });

  check("variance_residual_band", [&] {
    if (var_points.size() < 2) throw std::runtime_error("variance ladder unavailable");
    const double g = theory::g_const();
    double worst = -1e300;
    for (std::size_t i = 1; i < var_points.size(); ++i) {
      const double prev = std::abs(var_points[i - 1].second - g * var_points[i - 1].first);
      const double cur = std::abs(var_points[i].second - g * var_points[i].first);
      worst = std::max(worst, cur - prev);
    }
    return detail::CheckResult{worst, "<= 0", worst <= 0,
                               "largest step-to-step growth of |Var(phi_0) - g log N| along N=3..8"};
  });

  check("gbar_gap", [&] {
    double prev = 1e300, worst = -1e300;
    std::string values;
    for (int N : {3, 4, 5}) {
      const auto st = covariance_study(Model::membrane, 4, N, 0.25, cache, cfg.convention, cfg.factor_options());
      worst = std::max(worst, st.max_gap - prev);
      prev = st.max_gap;
      values += (values.empty() ? "" : ", ") + format_double(st.max_gap);
    }
    return detail::CheckResult{worst, "<= 0.2", worst <= 0.2,
                               "growth of max bulk |G_N - Gbar_N| along d=4 N=3,4,5: " + values};
  });

  check("covariance_profile", [&] {
    double worst = 0;
    for (int N : {4, 5}) {
      const auto st = covariance_study(Model::membrane, 4, N, 0.25, cache, cfg.convention, cfg.factor_options(), false);
      worst = std::max(worst, st.max_profile_dev);
    }
    return detail::CheckResult{worst, "<= 1.5", worst <= 1.5,
                               "max |Cov - g (log N - log|x-y|)| over the stratified bulk pairs, d=4 N=4,5"};
  });

  check("conditional_decomposition", [&] {
    // Q_BB psi_B must equal (Q phi) restricted to B.
    const LatticeBox box = build_box(6, 2);
    const auto f = factorize(assemble_precision(box, Model::membrane), cfg.factor_options());
    const auto s = sample_exact(f, box, Model::membrane, derive_seed(cfg.seed, {11}));
    const Region b = box_region(box, Site{}, 4);
    const auto split = conditional_decompose(s, b);
    const Stencil stencil = precision_stencil(Model::membrane, 2);
    const auto qbb = assemble_truncated(b, stencil);
    std::vector<double> lhs(split.residual.size());
    qbb.multiply(split.residual, lhs);
    double worst = 0, scale = 0;
    for (std::size_t i = 0; i < b.members.size(); ++i) {
      const double rhs = apply_stencil(stencil, box, s.values, b.members[i]);
      worst = std::max(worst, std::abs(lhs[i] - rhs));
      scale = std::max(scale, std::abs(rhs));
    }
    worst /= std::max(scale, 1e-300);
    return detail::CheckResult{worst, "<= 1e-9", worst <= 1e-9,
                               "relative max |Q_BB psi_B - (Q phi)_B|, d=2 N=6, B of side 5"};
  });

  check("sampler_variance", [&] {
    const LatticeBox box = build_box(4, 2);
    const auto q = assemble_precision(box, Model::membrane, cfg.convention);
    const auto f = factorize(q, cfg.factor_options());
    const std::size_t c = std::size_t(box.index(Site{}));
    const double exact = f.solve(unit_vector(box, Site{}))[c];
    const LaplaceSolver laplace(box);
    const double gbar_exact = gbar(laplace, Site{}, Site{});
    const int draws = 4000;
    double worst = 0;
    for (int which = 0; which < 2; ++which) {
      double s1 = 0, s2 = 0;
      for (int r = 0; r < draws; ++r) {
        const auto s = which == 0 ? sample_exact(f, box, Model::membrane, derive_seed(cfg.seed, {13}), std::uint64_t(r))
                                  : sample_gbar(laplace, derive_seed(cfg.seed, {17}), std::uint64_t(r));
        const double v = s.values[c] * s.values[c];
        s1 += v;
        s2 += v * v;
      }
      const double m = s1 / draws;
      const double se = std::sqrt((s2 / draws - m * m) / draws);
      worst = std::max(worst, std::abs(m - (which == 0 ? exact : gbar_exact)) / se);
    }
    return detail::CheckResult{worst, "<= 5 standard errors", worst <= 5,
                               "empirical centre variance of exact and gbar samplers, d=2 N=4, 4000 draws"};
  });

  check("tail_sandwich", [&] {
    int violations = 0;
    for (int i = 0; i < 600; ++i) {
      const double a = 1.0 + 5.0 * i / 599;
      if (!(tail_lower(a) <= tail_exact(a) && tail_exact(a) <= tail_upper(a))) ++violations;
    }
    for (int i = 0; i < 100; ++i)
      if (tail_exact(i / 100.0) > tail_upper(i / 100.0)) ++violations;
    return detail::CheckResult{double(violations), "== 0", violations == 0, "600 points in [1, 6] and 100 in [0, 1)"};
  });

  check("theory_identities", [&] {
    int violations = 0;
    for (int i = 1; i < 100; ++i) {
      const double b = i / 100.0, gs = theory::gamma_star(b);
      if (std::abs(theory::F(2, b, 1) - (1 + b)) > 1e-12) ++violations;
      if (std::abs(theory::F(2, b, gs) - gs) > 1e-12) ++violations;
    }
    double worst = 0;
    for (int i = 0; i < 50; ++i)
      for (int j = 0; j < 50; ++j) {
        const double a = (i + 0.5) / 50, b = (j + 0.5) / 50;
        worst = std::max(worst, std::abs(theory::rho(a, b) - theory::rho_grid(a, b)));
        if (theory::rho(a, b) < 4 * (1 - a * a) * (1 + b) - 1e-12) ++violations;
      }
    return detail::CheckResult{worst, "<= 1e-6 and no identity violations", worst <= 1e-6 && violations == 0,
                               std::to_string(violations) +
                                   " violations of F(1) = 1 + beta, F(gamma*) = gamma*, rho >= 4(1-alpha^2)(1+beta); "
                                   "measured: max |rho - rho_grid| on a 50x50 grid"};
  });

  finalize_columns(report);
  return report;
}

// ---------------------------------------------------------------------------
// Report: theory table, or re-aggregation of emitted reports

inline Report run_report(const ExperimentConfig& cfg, const std::vector<std::filesystem::path>& inputs,
                         const RunContext& ctx = {}) {
  Report report = new_report(cfg, "report");
  if (inputs.empty()) {
    auto add = [&](const theory::Prediction& p) {
      ReportRow row;
      row.set("kind", "prediction").set("statistic", p.name).set("value", p.value).set("provenance", p.provenance);
      for (const auto& [k, v] : p.parameters) row.set(k, v);
      report.add(std::move(row));
    };
    add(theory::predict_max());
    for (double eta : cfg.eta) {
      if (eta > 0 && eta < 1) {
        add(theory::predict_high_points(eta));
        add(theory::predict_dgff_high_points(eta));
      }
      add(theory::predict_square(eta));
    }
    for (double a : cfg.alpha)
      for (double b : cfg.beta) {
        if (a < b) add(theory::predict_cluster(a, b));
        add(theory::predict_cluster_conditional(a, b));
        add(theory::predict_pairs(a, b));
      }
    finalize_columns(report);
    return report;
  }
  std::string command;
  for (const auto& path : inputs) {
    ctx.note("report: reading " + path.string());
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    Report part = parse_report(in);
    if (command.empty()) {
      command = part.command;
      report.config_fingerprint = part.config_fingerprint;
    }
    if (part.command != command) throw std::runtime_error("inputs mix subcommands " + command + " and " + part.command);
    for (auto& row : part.rows)
      if (row.text("kind") == "record") report.rows.push_back(std::move(row));
  }
  report.command = "report";
  auto pred = [](const char* col) {
    return [col](const ReportRow& r) -> std::optional<double> {
      if (r.has(col)) return r.number(col);
      return std::nullopt;
    };
  };
  if (command == "exponents") summarize(report, {"high_points", "ratio", "count", false, {"eta"}, pred("prediction")});
  else if (command == "clusters") {
    summarize(report, {"cluster_fixed_center", "center_ratio", "center_count", false, {"alpha", "beta"}, pred("prediction")});
    summarize(report, {"cluster_conditional", "palm_ratio", "", false, {"alpha", "beta"}, pred("prediction_conditional")});
  } else if (command == "pairs") summarize(report, {"pairs", "ratio", "pairs", false, {"alpha", "beta"}, pred("prediction")});
  else if (command == "square") summarize(report, {"square", "ratio", "square", false, {"eta"}, pred("prediction")});
  else if (command == "max") summarize(report, {"max_over_log_n", "ratio", "max", true, {}, pred("prediction")});
  else throw std::runtime_error("report cannot aggregate '" + command + "' output");
  // Keep only the summaries; the records are in the inputs already.
  std::erase_if(report.rows, [](const ReportRow& r) { return r.text("kind") == "record"; });
  finalize_columns(report);
  return report;
}

}  // namespace membrane
