// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "dfs/analysis.hpp"
#include "dfs/cli.hpp"
#include "dfs/errors.hpp"
#include "dfs/train.hpp"

using namespace dfs;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "dfs_acceptance" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Spirals, K=3, noise 0.15: 600 train, 300 calibration, 300 test.
struct SpiralTask {
  Dataset train, calib, test;
};

const SpiralTask& spiral_task() {
  static const SpiralTask task = [] {
    SyntheticSpec s;
    s.classes = 3;
    s.noise = 0.15;
    s.samples_per_class = 200;
    s.seed = 1234;
    SpiralTask t;
    const auto [train, stats] = normalize(gen_spirals(s));
    t.train = train;
    s.samples_per_class = 100;
    s.seed = 5678;
    t.calib = apply_normalization(gen_spirals(s), stats);
    s.seed = 9012;
    t.test = apply_normalization(gen_spirals(s), stats);
    return t;
  }();
  return task;
}

ModelConfig spiral_model(WiringMode mode, double beta, std::uint64_t seed) {
  ModelConfig c;
  c.layers = 4;
  c.widths = {32, 32, 32, 32};
  c.input_dim = 2;
  c.classes = 3;
  c.beta = beta;
  c.mode = mode;
  c.seed = seed;
  return c;
}

// Largest of {0.1, 0.03, 0.01} at which final_only training is stable here.
constexpr double kSpiralLr = 0.03;

TrainResult train_spiral(WiringMode mode, double beta, std::uint64_t seed) {
  TrainConfig tc;
  tc.lr0 = kSpiralLr;
  tc.total_steps = 3000;
  tc.batch_size = 64;
  tc.eval_every = 3000;
  tc.seed = seed;
  return train_loop(build(spiral_model(mode, beta, seed)), spiral_task().train, tc);
}

constexpr std::uint64_t kSeeds = 5;

Verdict criterion1() {
  const std::string r6 = fmt::format("{:.4f}", reduction(6));
  const std::string r13 = fmt::format("{:.4f}", reduction(13));
  bool ok = r6 == "0.1429" && r13 == "0.1558";
  ok = ok && std::abs(reduction(6) - 1.0 / 7.0) < 1e-15 && std::abs(reduction(13) - 24.0 / 154.0) < 1e-15;
  for (std::size_t L = 1; L <= 100000; ++L) {
    ok = ok && reduction(L) < 1.0 / 6.0 && reduction(L) < reduction(L + 1);
  }
  const double far = reduction(100000000);
  ok = ok && 1.0 / 6.0 - far < 1e-8;
  return {ok, fmt::format("reduction(6)={} reduction(13)={} reduction(1e8)={:.10f} sup=1/6", r6, r13, far)};
}

Verdict criterion2() {
  const auto t0 = Clock::now();
  std::size_t checks = 0;
  std::string failure;
  for (std::size_t L : {2, 4, 6, 13}) {
    for (std::size_t N : {4, 8, 16}) {
      try {
        const CountReport r = verify_counts(L, N, 0.5);
        bool have_quarter = false, have_three_quarters = false;
        for (const auto& c : r.checks) {
          ++checks;
          if (!c.exact()) failure = fmt::format("L={} N={} beta={} inexact", L, N, c.beta);
          have_quarter |= c.mode == AccountingMode::dfs && c.beta == 0.25;
          have_three_quarters |= c.mode == AccountingMode::dfs && c.beta == 0.75;
        }
        if (N == 8 && !(have_quarter && have_three_quarters)) {
          failure = fmt::format("L={} N=8 missing beta 0.25/0.75 checks", L);
        }
      } catch (const std::exception& e) {
        failure = e.what();
      }
    }
  }
  const double secs = seconds_since(t0);
  if (secs >= 60.0) failure = fmt::format("took {:.1f}s", secs);
  return {failure.empty(),
          failure.empty() ? fmt::format("{} integer-exact checks over 4x3 (L,N) grid in {:.2f}s", checks, secs)
                          : failure};
}

Verdict criterion3() {
  const auto t0 = Clock::now();
  std::ostringstream log, fault_log;
  const int rc = cmd_gradcheck(2024, 24, false, log);
  const int fault = cmd_gradcheck(2024, 4, true, fault_log);
  const double secs = seconds_since(t0);
  const bool ok = rc == kExitOk && fault == kExitFailure && secs < 120.0;
  std::string last;
  std::istringstream lines(log.str());
  for (std::string line; std::getline(lines, line);) last = line;
  return {ok, fmt::format("{}; injected fault exit {}; {:.1f}s", last, fault, secs)};
}

Verdict criterion4() {
  RngStream meta(4444);
  std::size_t equal = 0;
  for (int trial = 0; trial < 100; ++trial) {
    ModelConfig c;
    c.layers = 2 + meta.below(5);
    c.widths.clear();
    for (std::size_t i = 0; i < c.layers; ++i) c.widths.push_back(2 + meta.below(31));
    c.input_dim = 1 + meta.below(6);
    c.classes = 2 + meta.below(6);
    c.beta = 0.02 + 0.96 * meta.uniform();
    c.bias = meta.below(2) == 1;
    c.mode = WiringMode::dfs;
    c.seed = meta.next_u64();
    Model dfs = build(c);
    for (auto& p : dfs.parameters()) {
      if (!p.decay) {
        for (double& v : p.value->data()) v = meta.normal();
      }
    }
    Model joint = dfs;
    joint.config.mode = WiringMode::joint;
    for (auto& l : joint.layers) l.split = l.w.cols();
    Tensor x = Tensor::matrix(1 + meta.below(9), c.input_dim);
    for (double& v : x.data()) v = meta.normal();
    GradTape ta, tb;
    const auto a = forward(dfs, x, ta).values(ta);
    const auto b = forward(joint, x, tb).values(tb);
    bool same = a.size() == b.size();
    for (std::size_t e = 0; same && e < a.size(); ++e) same = a[e].bitwise_equal(b[e]);
    equal += same;
  }
  return {equal == 100, fmt::format("{}/100 random configurations bitwise equal at every exit", equal)};
}

Verdict criterion5() {
  const SpiralTask& task = spiral_task();
  std::size_t single_source = 0, blocks_checked = 0;
  std::string failure;
  std::vector<std::size_t> negatives;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    try {
      const ConflictReport dfs =
          gradient_conflict_report(build(spiral_model(WiringMode::dfs, 0.5, seed)), task.train.x, task.train.y);
      for (const auto& b : dfs.blocks) {
        if (b.role != ParamBlock::Role::specific && b.role != ParamBlock::Role::head) continue;
        ++blocks_checked;
        single_source += b.sources.size() == 1 && b.sources[0] == b.layer;
      }
    } catch (const std::exception& e) {
      failure = e.what();
    }
    const ConflictReport joint =
        gradient_conflict_report(build(spiral_model(WiringMode::joint, 0.5, seed)), task.train.x, task.train.y);
    std::size_t shared_negative = 0;
    for (const auto& b : joint.blocks) {
      if (b.role != ParamBlock::Role::head && b.negative_pairs > 0) ++shared_negative;
    }
    negatives.push_back(shared_negative);
  }
  const bool structure = failure.empty() && blocks_checked > 0 && single_source == blocks_checked;
  const bool conflict = std::all_of(negatives.begin(), negatives.end(), [](auto n) { return n > 0; });
  return {structure && conflict,
          fmt::format("dfs: {}/{} exit-specific blocks single-source; joint: backbone blocks with a "
                      "negative cosine per seed [{}]{}",
                      single_source, blocks_checked, fmt::join(negatives, ","),
                      failure.empty() ? "" : " error: " + failure)};
}

struct SeedRow {
  std::vector<double> exit_top1;
  double ensemble_top1 = 0.0;
};

std::vector<SeedRow> train_grid(WiringMode mode, double beta, std::vector<Model>* keep = nullptr) {
  std::vector<SeedRow> rows;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const TrainResult r = train_spiral(mode, beta, seed);
    const EvalResult e = evaluate(r.model, spiral_task().test);
    rows.push_back({e.exit_top1, e.ensemble_top1});
    if (keep != nullptr) keep->push_back(r.model);
  }
  return rows;
}

double mean_of(const std::vector<SeedRow>& rows, const std::function<double(const SeedRow&)>& f) {
  double s = 0.0;
  for (const auto& r : rows) s += f(r);
  return s / static_cast<double>(rows.size());
}

std::vector<Model>& trained_dfs_models() {
  static std::vector<Model> models;
  return models;
}

Verdict criterion6() {
  const auto t0 = Clock::now();
  const auto dfs = train_grid(WiringMode::dfs, 0.5, &trained_dfs_models());
  const auto joint = train_grid(WiringMode::joint, 0.5);
  fmt::print("  spirals K=3 600/300 noise 0.15, L=4 width 32, beta 0.5, 3000 steps, batch 64, lr {}\n", kSpiralLr);
  fmt::print("  seed | mode  | exit1  exit2  exit3  exit4  | ensemble\n");
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    for (const auto& [name, rows] : {std::pair{"dfs", &dfs}, std::pair{"joint", &joint}}) {
      const SeedRow& r = (*rows)[s];
      fmt::print("  {:>4} | {:<5} | {:.4f} {:.4f} {:.4f} {:.4f} | {:.4f}\n", s, name, r.exit_top1[0],
                 r.exit_top1[1], r.exit_top1[2], r.exit_top1[3], r.ensemble_top1);
    }
  }
  const double d1 = mean_of(dfs, [](auto& r) { return r.exit_top1[0]; });
  const double j1 = mean_of(joint, [](auto& r) { return r.exit_top1[0]; });
  const double de = mean_of(dfs, [](auto& r) { return r.ensemble_top1; });
  const double je = mean_of(joint, [](auto& r) { return r.ensemble_top1; });
  const double secs = seconds_since(t0);
  const bool ok = d1 >= j1 - 0.005 && de >= je - 0.005 && secs < 600.0;
  return {ok, fmt::format("exit-1 dfs {:.4f} vs joint {:.4f}; ensemble dfs {:.4f} vs joint {:.4f}; {:.0f}s",
                          d1, j1, de, je, secs)};
}

Verdict criterion7() {
  const auto t0 = Clock::now();
  const auto low = train_grid(WiringMode::dfs, 0.1);
  const auto high = train_grid(WiringMode::dfs, 0.9);
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    fmt::print("  seed {} | beta 0.1: exit1 {:.4f} exit4 {:.4f} | beta 0.9: exit1 {:.4f} exit4 {:.4f}\n", s,
               low[s].exit_top1[0], low[s].exit_top1[3], high[s].exit_top1[0], high[s].exit_top1[3]);
  }
  const double l1 = mean_of(low, [](auto& r) { return r.exit_top1[0]; });
  const double h1 = mean_of(high, [](auto& r) { return r.exit_top1[0]; });
  const double l4 = mean_of(low, [](auto& r) { return r.exit_top1[3]; });
  const double h4 = mean_of(high, [](auto& r) { return r.exit_top1[3]; });
  const double secs = seconds_since(t0);
  const bool ok = l1 >= h1 && h4 >= l4 && secs < 900.0;
  return {ok, fmt::format("exit-1: beta0.1 {:.4f} >= beta0.9 {:.4f}; exit-4: beta0.9 {:.4f} >= beta0.1 {:.4f}; {:.0f}s",
                          l1, h1, h4, l4, secs)};
}

Verdict criterion8() {
  const SpiralTask& task = spiral_task();
  Model model = trained_dfs_models().empty() ? train_spiral(WiringMode::dfs, 0.5, 0).model
                                             : trained_dfs_models().front();
  const CostProfile profile = inference_cost_profile(model.config);
  const std::vector<double> costs(profile.exit_cost.begin(), profile.exit_cost.end());
  const ExitDecisions calib = exit_decisions(model, task.calib);
  const ExitDecisions test = exit_decisions(model, task.test);
  bool ok = true;
  double worst_slack = 1e300;
  for (double b : budget_grid(profile, 10)) {
    const BudgetResult r = budgeted_eval(calib, test, costs, b);
    std::size_t n = 0;
    for (auto h : r.histogram) n += h;
    ok = ok && r.avg_cost <= b && n == test.samples();
    worst_slack = std::min(worst_slack, b - r.avg_cost);
  }

  ExitDecisions toy;
  toy.confidence = {{0.95, 0.95, 0.5, 0.5}, {0.9, 0.9, 0.9, 0.9}};
  toy.prediction = {{0, 0, 0, 0}, {0, 0, 0, 0}};
  toy.labels = {0, 0, 0, 0};
  const std::vector<double> toy_costs{1.0, 2.0};
  double brute = -1.0;
  for (double t : {0.0, 0.5, 0.9, 0.95, 1.0}) {
    if (average_cost(toy, toy_costs, t) <= 1.5) brute = std::max(brute, t);
  }
  const double t = calibrate_threshold(toy, toy_costs, 1.5);
  const bool toy_ok = brute == 0.95 && t > 0.5 && t <= 0.95 &&
                      assign_exits(toy, t) == assign_exits(toy, brute) &&
                      average_cost(toy, toy_costs, t) == 1.5;
  return {ok && toy_ok, fmt::format("10-point grid [{}, {}]: avg<=budget and histograms sum to {} ({}; min slack {:.1f}); "
                                    "toy threshold {:.6f} vs brute force {} avg {}",
                                    costs.front(), costs.back(), test.samples(), ok ? "ok" : "VIOLATED",
                                    worst_slack, t, brute, average_cost(toy, toy_costs, t))};
}

Verdict criterion9() {
  std::vector<std::string> problems;
  ModelConfig mc = spiral_model(WiringMode::dfs, 0.3, 77);
  mc.bias = true;
  const Model m = build(mc);
  const fs::path dir = scratch("infra");
  save_checkpoint(m, dir / "m.ckpt");
  const Model back = load_checkpoint(dir / "m.ckpt");
  if (!bitwise_equal(back, m) || !(back.config == m.config)) problems.push_back("checkpoint roundtrip");

  const char* cfg = R"({"seed": 11, "train": {"steps": 200, "eval_every": 50},
    "model": {"layers": 3, "width": 16},
    "data": {"train_per_class": 50, "val_per_class": 20, "test_per_class": 20}})";
  std::ofstream(dir / "cfg.json") << cfg;
  std::ostringstream sink;
  const int a = cmd_train(dir / "cfg.json", dir / "a", std::nullopt, sink);
  const int b = cmd_train(dir / "cfg.json", dir / "b", std::nullopt, sink);
  const std::string ma = slurp(dir / "a" / "metrics.csv");
  if (a != 0 || b != 0 || ma.empty() || ma != slurp(dir / "b" / "metrics.csv")) {
    problems.push_back("metrics.csv determinism");
  }

  const std::vector<unsigned char> img{0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3,
                                       0, 1, 2, 128, 254, 255, 17, 34, 51, 68, 85, 102};
  const std::vector<unsigned char> lab{0, 0, 8, 1, 0, 0, 0, 2, 4, 9};
  std::ofstream(dir / "img.idx", std::ios::binary).write(reinterpret_cast<const char*>(img.data()), img.size());
  std::ofstream(dir / "lab.idx", std::ios::binary).write(reinterpret_cast<const char*>(lab.data()), lab.size());
  const Dataset d = load_idx(dir / "img.idx", dir / "lab.idx");
  bool pixels = d.x.shape() == Shape{2, 6} && d.y == std::vector<std::size_t>{4, 9};
  for (std::size_t i = 0; pixels && i < 12; ++i) pixels = d.x[i] == static_cast<double>(img[16 + i]) / 255.0;
  if (!pixels) problems.push_back("IDX pixels");
  return {problems.empty(), problems.empty()
                                ? fmt::format("checkpoint bit-exact; metrics.csv identical ({} bytes); IDX 2x2x3 exact",
                                              ma.size())
                                : fmt::format("failed: {}", fmt::join(problems, ", "))};
}

}  // namespace

int main(int argc, char** argv) {
  setenv("DFS_LOG", "error", 0);
  configure_logging();
  const std::vector<std::pair<std::string, Verdict (*)()>> criteria{
      {"closed-form reduction", criterion1},       {"exact operation counts", criterion2},
      {"gradient routing suite", criterion3},      {"forward equivalence", criterion4},
      {"conflict structure", criterion5},          {"directional training result", criterion6},
      {"beta trend", criterion7},                  {"budgeted evaluation contract", criterion8},
      {"infrastructure", criterion9}};
  std::set<std::size_t> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::strtoul(argv[i], nullptr, 10));

  std::size_t failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!wanted.empty() && wanted.count(i + 1) == 0) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, fmt::format("threw: {}", e.what())};
    }
    failed += !v.pass;
    fmt::print("{} AC{} {}: {}\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, v.detail);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
