// Acceptance runner: one PASS/FAIL line per criterion. Tolerances are fixed
// here, not on the command line.
//
//   sgm_acceptance [--only 1,2,3] [--work DIR] [--seeds 0,1,2]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sgm/config.hpp"
#include "sgm/episodic.hpp"
#include "sgm/image_io.hpp"
#include "sgm/io.hpp"
#include "support/matching_checks.hpp"
#include "support/op_suite.hpp"
#include "support/pipeline.hpp"

namespace fs = std::filesystem;
using namespace sgm;
using testing::cli;

namespace {

constexpr double kOpTol = 1e-3;
constexpr double kEndToEndTol = 1e-2;
constexpr double kEndToEndStep = 1e-2;
constexpr double kGradBudgetSeconds = 120.0;
constexpr std::size_t kGradSeeds = 20;
constexpr std::size_t kInvariantPairs = 1000;
constexpr double kInvariantBudgetSeconds = 60.0;
constexpr double kSelfMatchTol = 1e-5, kSymmetryTol = 1e-6, kSumTol = 1e-6, kHullTol = 1e-6, kAggPermTol = 1e-6;
constexpr std::size_t kOracleTrials = 100;
constexpr double kOracleTol = 1e-5;
constexpr double kChanceFloor = 0.40;
constexpr double kMarginPoints = 0.03;
constexpr double kLearningBudgetSeconds = 45.0 * 60.0;
constexpr int kEvalEpisodes = 600;
constexpr double kRowSumTol = 1e-6;
constexpr std::size_t kSelfArgmaxNeeded = 12;
constexpr double kConstantRatioMax = 1.5;

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

bool report(int n, bool pass, const std::string& detail) {
  std::cout << "criterion " << n << ": " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
  return pass;
}

std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

bool gradients() {
  const auto t0 = Clock::now();
  double worst_op = 0.0;
  std::string worst_name;
  std::size_t cases = 0;
  for (const auto& c : testing::op_grad_cases()) {
    ++cases;
    for (std::uint64_t s = 0; s < kGradSeeds; ++s) {
      const double e = c.run(s);
      if (!(e <= worst_op)) {
        worst_op = e;
        worst_name = c.name;
      }
    }
  }
  // End-to-end: the literal protocol is float differences of the fused
  // pipeline at h = 1e-2. The double-precision loop pipeline at the same step
  // and at 1e-5 is reported alongside to separate the step from the arithmetic.
  double worst_e2e = 0.0, worst_oracle = 0.0, worst_fine = 0.0;
  for (std::uint64_t s = 0; s < kGradSeeds; ++s) {
    const Ablation ab{s % 5 == 3, s % 5 == 4};
    worst_e2e = std::max(worst_e2e, testing::end_to_end_check(s, ab, kEndToEndStep, testing::Reference::Library).rel_error);
    worst_oracle =
        std::max(worst_oracle, testing::end_to_end_check(s, ab, kEndToEndStep, testing::Reference::Oracle).rel_error);
    worst_fine = std::max(worst_fine, testing::end_to_end_check(s, ab, 1e-5, testing::Reference::Oracle).rel_error);
  }
  const double secs = since(t0);
  const bool pass = worst_op < kOpTol && worst_e2e < kEndToEndTol && secs < kGradBudgetSeconds;
  return report(1, pass,
                std::to_string(cases) + " ops x " + std::to_string(kGradSeeds) + " seeds, worst op rel err " +
                    num(worst_op) + " (" + worst_name + "); end-to-end at h=1e-2 " + num(worst_e2e) +
                    " (double reference at h=1e-2 " + num(worst_oracle) + ", at h=1e-5 " + num(worst_fine) + "); " +
                    num(secs, 3) + "s");
}

bool invariants() {
  const auto t0 = Clock::now();
  const auto r = testing::matching_invariants(kInvariantPairs, 2024);
  const double secs = since(t0);
  const bool pass = r.degenerate == 0 && r.self_match <= kSelfMatchTol && r.symmetry <= kSymmetryTol &&
                    r.range <= 0.0 && r.attention_sums <= kSumTol && r.hull <= kHullTol &&
                    r.aggregation_perm <= kAggPermTol && secs < kInvariantBudgetSeconds;
  return report(2, pass,
                std::to_string(r.trials) + " pairs: self " + num(r.self_match) + " (degenerate " +
                    std::to_string(r.degenerate) + "), symmetry " + num(r.symmetry) + ", range " + num(r.range) +
                    ", sums " + num(r.attention_sums) + ", hull " + num(r.hull) + ", agg perm " +
                    num(r.aggregation_perm) + ", " + num(secs, 3) + "s");
}

bool oracles() {
  const auto r = testing::oracle_equivalence(kOracleTrials, 77);
  return report(3, r.worst() < kOracleTol,
                std::to_string(kOracleTrials) + " trials: graph " + num(r.graph) + ", propagation " +
                    num(r.propagation) + ", interaction " + num(r.interaction) + ", update " + num(r.update) +
                    ", aggregation " + num(r.aggregation) + ", score " + num(r.score));
}

bool statistics() {
  SplitView split;
  for (int c = 0; c < 6; ++c) {
    split.classes.push_back(c);
    split.members.emplace_back();
    for (std::size_t i = 0; i < 20; ++i) split.members.back().push_back(static_cast<std::size_t>(c) * 20 + i);
  }
  ConstantScorer scorer;
  const int way = 5, queries = 15;
  const EvalReport r = evaluate(scorer, split, way, 1, queries, kEvalEpisodes, 5);
  const double n = static_cast<double>(kEvalEpisodes) * way * queries;
  const double sigma = std::sqrt(0.2 * 0.8 / n);
  const bool chance = std::abs(r.mean_accuracy - 1.0 / way) <= 3 * sigma;

  std::mt19937_64 rng(6);
  std::vector<double> acc(kEvalEpisodes);
  for (auto& a : acc) a = std::uniform_real_distribution<double>(0.2, 1.0)(rng);
  long double mean = 0, var = 0;
  for (double a : acc) mean += a;
  mean /= acc.size();
  for (double a : acc) var += (a - mean) * (a - mean);
  var /= acc.size();
  const double direct = static_cast<double>(1.96L * std::sqrt(var) / std::sqrt(static_cast<long double>(acc.size())));
  const double ci_err = std::abs(ci95_half_width(acc) - direct);
  return report(6, chance && ci_err < 1e-9,
                "forced ties: accuracy " + num(r.mean_accuracy, 6) + " vs 0.2 (3 sigma " + num(3 * sigma) +
                    "), ties " + std::to_string(r.tie_count) + ", CI formula error " + num(ci_err));
}

std::vector<fs::path> regular_files(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir));
  std::sort(out.begin(), out.end());
  return out;
}

bool reproducibility(const fs::path& work) {
  const fs::path a = work / "repro_a", b = work / "repro_b";
  const auto ra = testing::reduced_pipeline(a, 11), rb = testing::reduced_pipeline(b, 11);
  if (ra.code || rb.code) return report(7, false, "reduced pipeline failed: " + ra.err + rb.err);
  const auto files = regular_files(a);
  std::size_t differ = 0;
  for (const auto& f : files)
    if (!fs::exists(b / f) || read_file(a / f) != read_file(b / f)) ++differ;
  const bool same_set = files == regular_files(b);
  return report(7, same_set && differ == 0 && files.size() > 3,
                std::to_string(files.size()) + " files (dataset, checkpoints, metrics) compared, " +
                    std::to_string(differ) + " differ");
}

// Full-scale learning runs -------------------------------------------------

struct MethodResult {
  double mean = 0.0, ci = 0.0;
};

struct SeedResult {
  std::map<std::string, MethodResult> methods;
  double core_seconds = 0.0;      // pre-training, full model, both evaluations
  double ablation_seconds = 0.0;  // the two ablated models
};

MethodResult read_metrics(const fs::path& path) {
  const auto j = nlohmann::json::parse(read_text(path));
  return {j.at("mean_acc").get<double>(), j.at("ci95").get<double>()};
}

void must(const testing::CliResult& r, const std::string& what) {
  if (r.code) throw std::runtime_error(what + " failed (exit " + std::to_string(r.code) + "): " + r.err);
}

void log_tail(const std::string& text) {
  std::istringstream in(text);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  std::cerr << "  " << last << std::endl;
}

const char* const kVariants[] = {"full", "no_prop", "no_inter"};

std::vector<std::string> variant_flags(const std::string& v) {
  if (v == "no_prop") return {"--no-propagation"};
  if (v == "no_inter") return {"--no-interaction"};
  return {};
}

SeedResult run_seed(const fs::path& work, std::uint64_t seed, bool ablations) {
  testing::OutputRoot guard(work);
  const std::string dir = "seed" + std::to_string(seed);
  const std::vector<std::string> common = {"--set", "seed=" + std::to_string(seed), "--data", "data", "--backbone",
                                           dir + "/backbone.ckpt"};
  auto with = [&](std::vector<std::string> head, const std::vector<std::string>& tail) {
    head.insert(head.end(), common.begin(), common.end());
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
  };
  SeedResult out;
  auto t0 = Clock::now();
  if (!fs::exists(work / dir / "backbone.ckpt")) {
    auto r = cli(with({"pretrain"}, {}));
    must(r, "pretrain seed " + std::to_string(seed));
    log_tail(r.out);
  }
  out.core_seconds += since(t0);
  for (const std::string v : kVariants) {
    if (v != "full" && !ablations) continue;
    t0 = Clock::now();
    auto flags = variant_flags(v);
    flags.push_back("--matcher");
    flags.push_back(dir + "/matcher_" + v + ".ckpt");
    if (!fs::exists(work / dir / ("matcher_" + v + ".ckpt"))) {
      auto r = cli(with({"meta-train"}, flags));
      must(r, "meta-train " + v + " seed " + std::to_string(seed));
      log_tail(r.out);
    }
    const std::string metrics = dir + "/metrics_" + v + ".json";
    flags.insert(flags.end(), {"--episodes", std::to_string(kEvalEpisodes), "--metrics", metrics});
    auto r = cli(with({"evaluate"}, flags));
    must(r, "evaluate " + v + " seed " + std::to_string(seed));
    log_tail(r.out);
    out.methods[v] = read_metrics(work / metrics);
    (v == "full" ? out.core_seconds : out.ablation_seconds) += since(t0);
  }
  t0 = Clock::now();
  const std::string metrics = dir + "/metrics_cosine.json";
  auto r = cli(with({"evaluate"}, {"--baseline", "cosine", "--episodes", std::to_string(kEvalEpisodes), "--metrics",
                                   metrics}));
  must(r, "evaluate cosine seed " + std::to_string(seed));
  log_tail(r.out);
  out.methods["cosine"] = read_metrics(work / metrics);
  out.core_seconds += since(t0);
  return out;
}

void ensure_dataset(const fs::path& work) {
  testing::OutputRoot guard(work);
  if (fs::exists(work / "data" / "index.tsv")) return;
  must(cli({"gen-data", "--out", "data", "--force"}), "gen-data");
}

bool learning(const fs::path& work, const std::vector<std::uint64_t>& seeds, bool run4, bool run5) {
  // Always from scratch, so the timing covers the whole pipeline.
  fs::remove_all(work / "data");
  for (std::uint64_t s : seeds) fs::remove_all(work / ("seed" + std::to_string(s)));
  const auto t0 = Clock::now();
  ensure_dataset(work);
  double secs = since(t0);
  std::vector<SeedResult> results;
  for (std::uint64_t s : seeds) {
    std::cerr << "learning runs: seed " << s << std::endl;
    results.push_back(run_seed(work, s, run5));
    secs += results.back().core_seconds;
  }
  const std::size_t need = (seeds.size() * 2 + 2) / 3;  // 2 of 3
  bool ok = true;
  if (run4) {
    double mean = 0.0;
    std::size_t wins = 0;
    std::string detail;
    for (std::size_t i = 0; i < results.size(); ++i) {
      const auto& f = results[i].methods.at("full");
      const auto& c = results[i].methods.at("cosine");
      mean += f.mean / static_cast<double>(results.size());
      const bool win = f.mean - c.mean >= kMarginPoints && f.mean - f.ci > c.mean + c.ci;
      wins += win;
      detail += " seed " + std::to_string(seeds[i]) + ": sgmnet " + num(f.mean) + "+-" + num(f.ci, 2) + " cosine " +
                num(c.mean) + "+-" + num(c.ci, 2) + ";";
    }
    ok &= report(4, mean > kChanceFloor && wins >= need && secs < kLearningBudgetSeconds,
                 "mean sgmnet " + num(mean) + ", seeds with a >=3 point separated lead " + std::to_string(wins) + "/" +
                     std::to_string(results.size()) + ", " + num(secs / 60.0, 3) + " min;" + detail);
  }
  if (run5) {
    std::size_t prop = 0, inter = 0;
    std::string detail;
    for (std::size_t i = 0; i < results.size(); ++i) {
      const auto& m = results[i].methods;
      prop += m.at("no_prop").mean < m.at("full").mean;
      inter += m.at("no_inter").mean < m.at("full").mean;
      detail += " seed " + std::to_string(seeds[i]) + ": full " + num(m.at("full").mean) + " no-prop " +
                num(m.at("no_prop").mean) + " no-inter " + num(m.at("no_inter").mean) + ";";
    }
    ok &= report(5, prop >= need && inter >= need,
                 "full beats no-propagation on " + std::to_string(prop) + "/" + std::to_string(results.size()) +
                     ", no-interaction on " + std::to_string(inter) + "/" + std::to_string(results.size()) + ";" +
                     detail);
  }
  return ok;
}

std::vector<std::vector<double>> read_weights(const fs::path& csv) {
  std::vector<std::vector<double>> w;
  std::istringstream in(read_text(csv));
  std::string line;
  while (std::getline(in, line)) {
    w.emplace_back();
    for (const auto& cell : split(line, ',')) w.back().push_back(std::stod(cell));
  }
  return w;
}

bool visualization(const fs::path& work) {
  ensure_dataset(work);
  // Seed-0 full-model checkpoints; trained here if the learning runs have not.
  run_seed(work, 0, false);
  testing::OutputRoot guard(work);
  const Dataset ds = load_dataset(work / "data");
  const std::string image = (work / "data" / ds.samples[ds.test.members[0][0]].path).string();
  RgbImage flat(64, 64);
  std::fill(flat.rgb.begin(), flat.rgb.end(), std::uint8_t{128});
  write_ppm(work / "constant.ppm", flat);
  const std::string constant = (work / "constant.ppm").string();
  const std::vector<std::string> ck = {"--backbone", "seed0/backbone.ckpt", "--matcher", "seed0/matcher_full.ckpt"};
  auto viz = [&](const std::string& img, const std::string& out) {
    std::vector<std::string> args = {"match-viz", "--support", img, "--query", img, "--out", out};
    args.insert(args.end(), ck.begin(), ck.end());
    must(cli(args), "match-viz " + out);
    return read_weights(work / out / "matching_weights.csv");
  };
  const auto self = viz(image, "viz_self");
  double row_err = 0.0;
  std::size_t own = 0;
  for (std::size_t r = 0; r < self.size(); ++r) {
    double sum = 0.0;
    for (double x : self[r]) sum += x;
    row_err = std::max(row_err, std::abs(sum - 1.0));
    own += static_cast<std::size_t>(std::max_element(self[r].begin(), self[r].end()) - self[r].begin()) == r;
  }
  const auto flatw = viz(constant, "viz_constant");
  double mx = 0.0, mn = 1e300;
  for (const auto& row : flatw)
    for (double x : row) {
      mx = std::max(mx, x);
      mn = std::min(mn, x);
    }
  const double ratio = mn > 0 ? mx / mn : INFINITY;
  return report(8, self.size() == 16 && row_err <= kRowSumTol && own >= kSelfArgmaxNeeded && ratio < kConstantRatioMax,
                "self-match rows sum err " + num(row_err) + ", own-position argmax " + std::to_string(own) + "/" +
                    std::to_string(self.size()) + ", constant-color max/min ratio " + num(ratio));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance runner"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "sgm_acceptance").string();
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  app.add_option("--only", only, "criteria to run (default all)")->delimiter(',');
  app.add_option("--work", work, "scratch directory for learning artifacts");
  app.add_option("--seeds", seeds, "seeds for the learning criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  if (only.empty()) only = {1, 2, 3, 4, 5, 6, 7, 8};
  auto want = [&](int n) { return std::find(only.begin(), only.end(), n) != only.end(); };
  fs::create_directories(work);

  bool ok = true;
  try {
    if (want(1)) ok &= gradients();
    if (want(2)) ok &= invariants();
    if (want(3)) ok &= oracles();
    if (want(4) || want(5)) ok &= learning(work, seeds, want(4), want(5));
    if (want(6)) ok &= statistics();
    if (want(7)) ok &= reproducibility(work);
    if (want(8)) ok &= visualization(work);
  } catch (const std::exception& e) {
    std::cout << "aborted: " << e.what() << std::endl;
    return 2;
  }
  return ok ? 0 : 1;
}
