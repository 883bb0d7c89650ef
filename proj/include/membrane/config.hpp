#pragma once

// Experiment configuration: INI files with sections, overridable from the
// command line.
//
//   [experiment]  model, d, replicas, seed, sampler, workers
//   [lattice]     N (comma list), ell, site_budget, exact_site_limit
//   [levels]      eta, alpha, beta (comma lists), include_diagonal
//   [solver]      tolerance, memory_gb, convention, cache_dir, use_cache
//   [output]      path, format

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdint>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "membrane/gaussian.hpp"
#include "membrane/operators.hpp"
#include "membrane/report.hpp"
#include "membrane/solver.hpp"

namespace membrane {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SamplerChoice { exact, gbar, automatic };

struct ExperimentConfig {
  Model model = Model::membrane;
  int d = 4;
  std::vector<int> N_list{4, 6, 8};
  double ell = 0.25;
  std::vector<double> eta{0.3};
  std::vector<double> alpha{0.5};
  std::vector<double> beta{0.5};
  bool include_diagonal = true;
  int replicas = 10;
  std::uint64_t seed = 1;
  SamplerChoice sampler = SamplerChoice::automatic;
  double tolerance = 1e-10;
  double memory_gb = 4.0;
  LaplacianConvention convention = LaplacianConvention::normalized;
  Index site_budget = kDefaultSiteBudget;
  Index exact_site_limit = 100'000;  // auto sampler: exact at or below this many sites
  std::string cache_dir = ".membrane-cache";
  bool use_cache = true;
  std::string out;  // empty: standard output
  Format format = Format::csv;
  int workers = 1;

  Sampler sampler_for(int N) const {
    if (sampler == SamplerChoice::exact) return Sampler::exact;
    if (sampler == SamplerChoice::gbar) return Sampler::gbar;
    return build_box(N, d, site_budget).size() <= exact_site_limit ? Sampler::exact : Sampler::gbar;
  }

  FactorOptions factor_options() const {
    FactorOptions f;
    f.memory_budget_bytes = std::size_t(memory_gb * double(1ull << 30));
    return f;
  }

  SolverCache cache() const {
    return use_cache && !cache_dir.empty() ? SolverCache(cache_dir) : SolverCache();
  }

  /// Canonical text of every parameter that can change the data, excluding
  /// output location, format, cache and worker count.
  std::string canonical() const {
    std::ostringstream s;
    auto list = [&](const auto& v) {
      for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << format_double(double(v[i]));
      s << ";";
    };
    s << "model=" << to_string(model) << ";d=" << d << ";N=";
    list(N_list);
    s << "ell=" << format_double(ell) << ";eta=";
    list(eta);
    s << "alpha=";
    list(alpha);
    s << "beta=";
    list(beta);
    s << "diag=" << include_diagonal << ";replicas=" << replicas << ";seed=" << seed
      << ";sampler=" << int(sampler) << ";tol=" << format_double(tolerance)
      << ";convention=" << to_string(convention) << ";budget=" << site_budget
      << ";exact_limit=" << exact_site_limit;
    return s.str();
  }

  std::string fingerprint() const {
    Fnv1a h;
    const std::string c = canonical();
    h.bytes(c.data(), c.size());
    return "cfg-" + fingerprint_hex(h.digest());
  }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError(what);
    };
    need(d >= 1 && d <= kMaxDim, "d must be in 1..4");
    need(!N_list.empty(), "N list is empty");
    for (int N : N_list) need(N >= 1, "every N must be >= 1");
    need(ell > 0 && ell < 0.5, "ell must lie in (0, 1/2)");
    for (double e : eta) need(e > -1 && e < 1, "eta must lie in (-1, 1)");
    for (double a : alpha) need(a > 0 && a < 1, "alpha must lie in (0, 1)");
    for (double b : beta) need(b > 0 && b < 1, "beta must lie in (0, 1)");
    need(replicas >= 0, "replicas must be >= 0");
    need(tolerance > 0 && tolerance < 1, "tolerance must lie in (0, 1)");
    need(memory_gb > 0, "memory_gb must be positive");
    need(workers >= 1, "workers must be >= 1");
    need(site_budget >= 1 && exact_site_limit >= 0, "site budgets must be positive");
  }
};

inline std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    std::size_t used = 0;
    const double v = std::stod(item, &used);
    if (item.find_first_not_of(" \t", used) != std::string::npos)
      throw ConfigError("not a number: '" + item + "'");
    out.push_back(v);
  }
  return out;
}

inline std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  for (double v : parse_double_list(text)) {
    if (v != double(int(v))) throw ConfigError("not an integer: " + format_double(v));
    out.push_back(int(v));
  }
  return out;
}

inline SamplerChoice parse_sampler_choice(const std::string& s) {
  if (s == "auto") return SamplerChoice::automatic;
  return parse_sampler(s) == Sampler::exact ? SamplerChoice::exact : SamplerChoice::gbar;
}

inline LaplacianConvention parse_convention(const std::string& s) {
  if (s == "normalized") return LaplacianConvention::normalized;
  if (s == "unnormalized") return LaplacianConvention::unnormalized;
  throw ConfigError("unknown Laplacian convention '" + s + "'");
}

/// Applies the keys present in an INI tree on top of cfg.
inline void apply_ini(ExperimentConfig& cfg, const boost::property_tree::ptree& t) {
  auto str = [&](const char* key) { return t.get_optional<std::string>(key); };
  try {
    if (auto v = str("experiment.model")) {
      cfg.model = parse_model(*v);
      if (!str("experiment.d")) cfg.d = cfg.model == Model::membrane ? 4 : 2;
    }
    if (auto v = str("experiment.d")) cfg.d = std::stoi(*v);
    if (auto v = str("experiment.replicas")) cfg.replicas = std::stoi(*v);
    if (auto v = str("experiment.seed")) cfg.seed = std::stoull(*v);
    if (auto v = str("experiment.sampler")) cfg.sampler = parse_sampler_choice(*v);
    if (auto v = str("experiment.workers")) cfg.workers = std::stoi(*v);
    if (auto v = str("lattice.N")) cfg.N_list = parse_int_list(*v);
    if (auto v = str("lattice.ell")) cfg.ell = std::stod(*v);
    if (auto v = str("lattice.site_budget")) cfg.site_budget = std::stoll(*v);
    if (auto v = str("lattice.exact_site_limit")) cfg.exact_site_limit = std::stoll(*v);
    if (auto v = str("levels.eta")) cfg.eta = parse_double_list(*v);
    if (auto v = str("levels.alpha")) cfg.alpha = parse_double_list(*v);
    if (auto v = str("levels.beta")) cfg.beta = parse_double_list(*v);
    if (auto v = str("levels.include_diagonal")) cfg.include_diagonal = *v == "true" || *v == "1";
    if (auto v = str("solver.tolerance")) cfg.tolerance = std::stod(*v);
    if (auto v = str("solver.memory_gb")) cfg.memory_gb = std::stod(*v);
    if (auto v = str("solver.convention")) cfg.convention = parse_convention(*v);
    if (auto v = str("solver.cache_dir")) cfg.cache_dir = *v;
    if (auto v = str("solver.use_cache")) cfg.use_cache = *v == "true" || *v == "1";
    if (auto v = str("output.path")) cfg.out = *v;
    if (auto v = str("output.format")) cfg.format = parse_format(*v);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad configuration value: ") + e.what());
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  boost::property_tree::ptree t;
  try {
    boost::property_tree::read_ini(path.string(), t);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(e.what());
  }
  ExperimentConfig cfg;
  apply_ini(cfg, t);
  return cfg;
}

}  // namespace membrane
