// membrane_lab: sampling and measurement experiments for the membrane model
// and the DGFF. Data goes to --out or standard output, progress to stderr.

#include <CLI11.hpp>

#include <csignal>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "membrane/experiment.hpp"

namespace {

using namespace membrane;

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

struct Overrides {
  std::string config;
  std::string model, sampler, format, convention, cache_dir, out;
  std::string N, eta, alpha, beta;
  std::optional<int> d, replicas, workers;
  std::optional<std::uint64_t> seed;
  std::optional<double> ell, tolerance, memory_gb;
  std::optional<long long> budget, exact_limit;
  bool no_cache = false;
  bool offdiag = false;
  std::string samples_dir = "samples";
  std::vector<std::string> inputs;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "INI experiment file; flags override its values")->check(CLI::ExistingFile);
  app->add_option("--model", o.model, "membrane or dgff");
  app->add_option("--d", o.d, "dimension (1..4)");
  app->add_option("--N", o.N, "comma-separated box half-widths");
  app->add_option("--ell", o.ell, "bulk parameter in (0, 1/2)");
  app->add_option("--eta", o.eta, "comma-separated high-point levels");
  app->add_option("--alpha", o.alpha, "comma-separated cluster/pair levels");
  app->add_option("--beta", o.beta, "comma-separated radius exponents");
  app->add_flag("--offdiag", o.offdiag, "pairs: exclude x = y from the count");
  app->add_option("--replicas", o.replicas, "replicas per N");
  app->add_option("--seed", o.seed, "master seed");
  app->add_option("--sampler", o.sampler, "exact, gbar or auto");
  app->add_option("--tolerance", o.tolerance, "iterative solver tolerance");
  app->add_option("--memory-gb", o.memory_gb, "factorization memory budget");
  app->add_option("--convention", o.convention, "Laplacian normalization: normalized or unnormalized");
  app->add_option("--cache-dir", o.cache_dir, "solver and replica cache directory");
  app->add_flag("--no-cache", o.no_cache, "neither read nor write the cache");
  app->add_option("--budget", o.budget, "maximum lattice sites per box");
  app->add_option("--exact-limit", o.exact_limit, "auto sampler: exact up to this many sites");
  app->add_option("--workers", o.workers, "replica worker threads");
  app->add_option("--out", o.out, "report file (default: standard output)");
  app->add_option("--format", o.format, "csv or ndjson");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (!o.model.empty()) {
    cfg.model = parse_model(o.model);
    if (!o.d && o.config.empty()) cfg.d = cfg.model == Model::membrane ? 4 : 2;
  }
  if (o.d) cfg.d = *o.d;
  if (!o.N.empty()) cfg.N_list = parse_int_list(o.N);
  if (o.ell) cfg.ell = *o.ell;
  if (!o.eta.empty()) cfg.eta = parse_double_list(o.eta);
  if (!o.alpha.empty()) cfg.alpha = parse_double_list(o.alpha);
  if (!o.beta.empty()) cfg.beta = parse_double_list(o.beta);
  if (o.offdiag) cfg.include_diagonal = false;
  if (o.replicas) cfg.replicas = *o.replicas;
  if (o.seed) cfg.seed = *o.seed;
  if (!o.sampler.empty()) cfg.sampler = parse_sampler_choice(o.sampler);
  if (o.tolerance) cfg.tolerance = *o.tolerance;
  if (o.memory_gb) cfg.memory_gb = *o.memory_gb;
  if (!o.convention.empty()) cfg.convention = parse_convention(o.convention);
  if (!o.cache_dir.empty()) cfg.cache_dir = o.cache_dir;
  if (o.no_cache) cfg.use_cache = false;
  if (o.budget) cfg.site_budget = *o.budget;
  if (o.exact_limit) cfg.exact_site_limit = *o.exact_limit;
  if (o.workers) cfg.workers = *o.workers;
  if (!o.out.empty()) cfg.out = o.out;
  if (!o.format.empty()) cfg.format = parse_format(o.format);
  return cfg;
}

void write(const Report& r, const ExperimentConfig& cfg) {
  const std::string stamp = utc_timestamp();
  if (cfg.out.empty()) {
    emit(std::cout, r, cfg.format, stamp);
    return;
  }
  const std::filesystem::path path(cfg.out);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + cfg.out);
  emit(out, r, cfg.format, stamp);
}

extern "C" void on_interrupt(int) { stop_requested() = true; }

}  // namespace

int main(int argc, char** argv) {
  ensure_safe_blas_kernels(argv);

  CLI::App app{"Membrane model and DGFF experiments"};
  app.require_subcommand(1);
  Overrides o;
  std::string chosen;
  for (const char* name : {"validate", "green", "sample", "exponents", "clusters", "pairs", "square", "max", "report"}) {
    static const std::map<std::string, std::string> help{
        {"validate", "run the small-N consistency checks; nonzero exit on failure"},
        {"green", "exact covariance profile, centre variance and G vs Gbar gap"},
        {"sample", "write field samples to --samples-dir"},
        {"exponents", "high-point counts and their dimension estimates"},
        {"clusters", "high points near a fixed centre and near a high point"},
        {"pairs", "pairs of high points within distance N^beta"},
        {"square", "side of the biggest uniformly high box"},
        {"max", "maximum over the box, normalized by log N"},
        {"report", "re-aggregate report files (--in), or print the predictions"}};
    auto* sub = app.add_subcommand(name, help.at(name));
    add_common(sub, o);
    if (std::string(name) == "sample") sub->add_option("--samples-dir", o.samples_dir, "directory for .bin samples");
    if (std::string(name) == "report") sub->add_option("--in", o.inputs, "report files of one subcommand");
    sub->callback([&chosen, name] { chosen = name; });
  }
  CLI11_PARSE(app, argc, argv);

  std::signal(SIGINT, on_interrupt);
  std::signal(SIGTERM, on_interrupt);

  ExperimentConfig cfg;
  try {
    cfg = resolve(o);
    if (chosen != "validate" && chosen != "report") cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "membrane_lab: configuration error: " << e.what() << "\n";
    return 2;
  }

  const RunContext ctx{&std::cerr};
  try {
    Report r;
    if (chosen == "validate") r = run_validate(cfg, ctx);
    else if (chosen == "green") r = run_green(cfg, ctx);
    else if (chosen == "sample") r = run_sample(cfg, o.samples_dir, ctx);
    else if (chosen == "exponents") r = run_exponents(cfg, ctx);
    else if (chosen == "clusters") r = run_clusters(cfg, ctx);
    else if (chosen == "pairs") r = run_pairs(cfg, ctx);
    else if (chosen == "square") r = run_square(cfg, ctx);
    else if (chosen == "max") r = run_max(cfg, ctx);
    else {
      std::vector<std::filesystem::path> in(o.inputs.begin(), o.inputs.end());
      r = run_report(cfg, in, ctx);
    }
    write(r, cfg);
    for (const auto& w : r.warnings) std::cerr << "membrane_lab: warning: " << w << "\n";
    if (r.interrupted) {
      std::cerr << "membrane_lab: interrupted; finished replicas are cached, rerun to resume\n";
      return 130;
    }
    if (r.failed) {
      std::cerr << "membrane_lab: some checks failed\n";
      return 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "membrane_lab: configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "membrane_lab: error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
