#include <gtest/gtest.h>

#include <boost/property_tree/ini_parser.hpp>

#include <sstream>

#include "membrane/config.hpp"
#include "membrane/report.hpp"

using namespace membrane;

namespace {

Report sample_report() {
  Report r;
  r.command = "exponents";
  r.config_fingerprint = "cfg-0123456789abcdef";
  r.columns = {"command", "kind", "N", "eta", "count", "ratio", "detail", "config_fp", "code_version"};
  ReportRow a;
  a.set("kind", "record").set("N", 8).set("eta", 0.3).set("count", std::int64_t(41)).set("ratio", std::log(41.0) / std::log(8.0));
  r.add(a);
  ReportRow b;
  b.set("kind", "record").set("N", 10).set("eta", 1.0 / 3.0).set("count", 0).set("detail", "a, \"quoted\" note");
  r.add(b);
  return r;
}

std::string emitted(const Report& r, Format f, const std::string& stamp = "2026-01-01T00:00:00Z") {
  std::ostringstream out;
  emit(out, r, f, stamp);
  return out.str();
}

}  // namespace

TEST(Report, SeventeenDigitDoubles) {
  EXPECT_EQ(format_double(0.1), "0.10000000000000001");
  EXPECT_EQ(std::stod(format_double(1.0 / 3.0)), 1.0 / 3.0);
  EXPECT_EQ(format_double(std::nan("")), "nan");
}

TEST(Report, CsvRoundTripIsExact) {
  const Report r = sample_report();
  std::istringstream in(emitted(r, Format::csv));
  const Report back = parse_report(in);
  EXPECT_EQ(back.command, "exponents");
  EXPECT_EQ(back.config_fingerprint, r.config_fingerprint);
  EXPECT_EQ(back.columns, r.columns);
  ASSERT_EQ(back.rows.size(), r.rows.size());
  for (std::size_t i = 0; i < r.rows.size(); ++i)
    for (const auto& c : r.columns) EXPECT_EQ(back.rows[i].get(c), r.rows[i].get(c)) << c;
}

TEST(Report, NdjsonRowsParseIndependently) {
  const Report r = sample_report();
  const std::string text = emitted(r, Format::ndjson);
  std::istringstream lines(text);
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    EXPECT_TRUE(nlohmann::json::accept(line)) << line;
    ++n;
  }
  EXPECT_EQ(n, 1 + int(r.rows.size()));
  std::istringstream in(text);
  const Report back = parse_report(in);
  ASSERT_EQ(back.rows.size(), 2u);
  EXPECT_EQ(back.rows[0].number("ratio"), r.rows[0].number("ratio"));
  EXPECT_EQ(back.rows[1].text("detail"), "a, \"quoted\" note");
  EXPECT_FALSE(back.rows[1].has("ratio"));
}

TEST(Report, SchemaVersionInEveryHeader) {
  const Report r = sample_report();
  EXPECT_NE(emitted(r, Format::csv).find("# schema_version=1\n"), std::string::npos);
  const std::string nd = emitted(r, Format::ndjson);
  const auto header = nlohmann::json::parse(nd.substr(0, nd.find('\n')));
  EXPECT_EQ(header.at("schema_version"), 1);
}

TEST(Report, TimestampOnlyInHeader) {
  const Report r = sample_report();
  for (Format f : {Format::csv, Format::ndjson}) {
    const auto a = emitted(r, f, "2026-01-01T00:00:00Z");
    const auto b = emitted(r, f, "2027-06-30T12:34:56Z");
    EXPECT_NE(a, b);
    EXPECT_EQ(data_section(a), data_section(b));
  }
}

TEST(Config, IniSectionsAndLists) {
  std::istringstream ini(R"(
[experiment]
model = dgff
replicas = 7
seed = 99
sampler = exact

[lattice]
N = 16, 32,64
ell = 0.2

[levels]
eta = 0.3, 0.5
include_diagonal = false

[output]
format = ndjson
)");
  boost::property_tree::ptree t;
  boost::property_tree::read_ini(ini, t);
  ExperimentConfig cfg;
  apply_ini(cfg, t);
  EXPECT_EQ(cfg.model, Model::dgff);
  EXPECT_EQ(cfg.d, 2);
  EXPECT_EQ(cfg.replicas, 7);
  EXPECT_EQ(cfg.seed, 99u);
  EXPECT_EQ(cfg.N_list, (std::vector<int>{16, 32, 64}));
  EXPECT_EQ(cfg.eta, (std::vector<double>{0.3, 0.5}));
  EXPECT_FALSE(cfg.include_diagonal);
  EXPECT_EQ(cfg.format, Format::ndjson);
  EXPECT_EQ(cfg.sampler_for(64), Sampler::exact);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Config, RangeChecks) {
  ExperimentConfig cfg;
  cfg.eta = {1.0};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.ell = 0.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.beta = {0.0};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.d = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_int_list("4, 6.5"), ConfigError);
  EXPECT_THROW(parse_double_list("0.3, x"), std::exception);
}

TEST(Config, AutoSamplerFollowsSiteLimit) {
  ExperimentConfig cfg;
  EXPECT_EQ(cfg.sampler_for(8), Sampler::exact);   // 17^4 = 83521 sites
  EXPECT_EQ(cfg.sampler_for(10), Sampler::gbar);   // 21^4 = 194481 sites
  cfg.sampler = SamplerChoice::exact;
  EXPECT_EQ(cfg.sampler_for(10), Sampler::exact);
}

TEST(Config, FingerprintTracksDataParametersOnly) {
  ExperimentConfig a, b;
  b.out = "elsewhere.csv";
  b.workers = 8;
  b.cache_dir = "/tmp/other";
  b.format = Format::ndjson;
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  b.seed = 2;
  EXPECT_NE(a.fingerprint(), b.fingerprint());
  EXPECT_EQ(a.fingerprint().rfind("cfg-", 0), 0u);
}
