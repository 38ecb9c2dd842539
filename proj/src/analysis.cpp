#include "dfs/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "dfs/errors.hpp"
#include "dfs/train.hpp"

namespace dfs {

namespace {

const char* mode_name(AccountingMode mode) { return mode == AccountingMode::dfs ? "dfs" : "joint"; }

bool integral(double v) { return std::abs(v - std::round(v)) < 1e-9; }

std::string dump_nodes(const CountCheck& c) {
  std::string out = fmt::format("{} beta={} closed=({}, {}) measured=({}, {})\n", mode_name(c.mode),
                                c.beta, c.closed.forward, c.closed.backward, c.measured.forward,
                                c.measured.backward);
  for (const auto& n : c.nodes) {
    out += fmt::format("  node {:>4} {:<8} fwd {:>10} bwd {:>10}\n", n.id, n.op, n.forward, n.backward);
  }
  return out;
}

bool all_zero(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

const char* role_name(ParamBlock::Role role) {
  switch (role) {
    case ParamBlock::Role::shared: return "shared";
    case ParamBlock::Role::specific: return "specific";
    case ParamBlock::Role::full: return "full";
    case ParamBlock::Role::head: return "head";
  }
  return "?";
}

}  // namespace

MacCounts closed_form(const AccountingModel& model) {
  if (model.layers < 1 || model.width < 1) throw ConfigError("closed_form: L and N must be >= 1");
  const std::uint64_t L = model.layers;
  const std::uint64_t n3 = std::uint64_t{model.width} * model.width * model.width;
  MacCounts c;
  c.forward = 4 * L * n3;
  c.backward = model.mode == AccountingMode::joint ? (8 * L - 2) * n3 : 6 * L * n3;
  return c;
}

double reduction(std::size_t layers) {
  if (layers < 1) throw ConfigError("reduction: L must be >= 1");
  const auto L = static_cast<double>(layers);
  return 1.0 - (10.0 * L) / (12.0 * L - 2.0);
}

CountCheck measure_training_step(std::size_t layers, std::size_t width, double beta,
                                 AccountingMode mode, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.layers = layers;
  cfg.widths.assign(layers, width);
  cfg.input_dim = width;
  cfg.classes = width;
  cfg.beta = beta;
  cfg.mode = mode == AccountingMode::dfs ? WiringMode::dfs : WiringMode::joint;
  cfg.bias = false;
  cfg.seed = seed;
  RngStream rng(seed);
  const Model model = build(cfg, rng);

  Tensor x = Tensor::matrix(width, width);
  for (double& v : x.data()) v = rng.normal();
  std::vector<std::size_t> labels(width);
  for (auto& y : labels) y = rng.below(width);

  GradTape tape;
  const ExitOutputs out = forward(model, x, tape);
  const auto losses = exit_losses(tape, out, labels);
  tape.backward(total_loss(cfg.mode, losses), out.params);

  CountCheck check;
  check.mode = mode;
  check.beta = beta;
  check.closed = closed_form({layers, width, beta, mode});
  check.measured = tape.macs();
  for (const auto& node : tape.nodes()) {
    if (node.kind == OpKind::matmul) {
      check.nodes.push_back({node.id, op_name(node.kind), node.forward_macs, node.backward_macs});
    }
  }
  return check;
}

CountReport verify_counts(std::size_t layers, std::size_t width, double beta) {
  if (!integral(beta * static_cast<double>(width))) {
    throw ConfigError(fmt::format("beta * N = {} * {} is not an integer", beta, width));
  }
  CountReport report;
  report.layers = layers;
  report.width = width;
  report.checks.push_back(measure_training_step(layers, width, beta, AccountingMode::joint));

  std::vector<double> betas{beta};
  for (double b : {0.25, 0.5, 0.75}) {
    if (b != beta && integral(b * static_cast<double>(width))) betas.push_back(b);
  }
  for (double b : betas) {
    report.checks.push_back(measure_training_step(layers, width, b, AccountingMode::dfs));
  }

  std::string failures;
  for (const auto& c : report.checks) {
    if (!c.exact()) failures += dump_nodes(c);
  }
  const MacCounts& dfs_ref = report.checks[1].measured;
  for (std::size_t i = 2; i < report.checks.size(); ++i) {
    if (!(report.checks[i].measured == dfs_ref)) {
      failures += fmt::format("dfs counts differ between beta={} and beta={}\n",
                              report.checks[1].beta, report.checks[i].beta);
    }
  }
  if (!failures.empty()) {
    throw AccountingViolation(
        fmt::format("operation counts for L={} N={} do not match:\n{}", layers, width, failures));
  }
  report.passed = true;
  return report;
}

nlohmann::json to_json(const CountReport& report) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : report.checks) {
    checks.push_back({{"mode", mode_name(c.mode)},
                      {"beta", c.beta},
                      {"closed_forward", c.closed.forward},
                      {"closed_backward", c.closed.backward},
                      {"measured_forward", c.measured.forward},
                      {"measured_backward", c.measured.backward},
                      {"exact", c.exact()}});
  }
  return {{"layers", report.layers},
          {"width", report.width},
          {"reduction", reduction(report.layers)},
          {"passed", report.passed},
          {"checks", checks}};
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw ContractError("cosine_similarity: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

ConflictReport gradient_conflict_report(const Model& model, const Tensor& x,
                                        const std::vector<std::size_t>& labels) {
  GradTape tape;
  const ExitOutputs out = forward(model, x, tape);
  const auto losses = exit_losses(tape, out, labels);
  const auto blocks = parameter_blocks(model);
  const std::size_t L = losses.size();

  // per_loss[k][b] = gradient of loss k+1 restricted to block b
  std::vector<std::vector<Tensor>> per_loss(L);
  for (std::size_t k = 0; k < L; ++k) {
    const Var seed[] = {losses[k]};
    const GradMap g = tape.backward(seed, out.params);
    for (const auto& b : blocks) per_loss[k].push_back(block_of(g.at(out.params[b.param_index].id), b));
  }

  ConflictReport report;
  report.mode = model.config.mode;
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    const auto& b = blocks[bi];
    BlockConflict bc;
    bc.name = b.name;
    bc.role = b.role;
    bc.layer = b.layer;
    for (std::size_t k = 0; k < L; ++k) {
      if (!all_zero(per_loss[k][bi].data())) bc.sources.push_back(k + 1);
    }
    for (std::size_t ka = 0; ka < L; ++ka) {
      for (std::size_t kb = ka + 1; kb < L; ++kb) {
        PairCosine pc{ka + 1, kb + 1, std::nullopt};
        const auto ga = per_loss[ka][bi].data();
        const auto gb = per_loss[kb][bi].data();
        if (all_zero(ga) || all_zero(gb)) {
          ++bc.undefined_pairs;
        } else {
          pc.cosine = cosine_similarity(ga, gb);
          if (*pc.cosine < 0.0) ++bc.negative_pairs;
        }
        bc.pairs.push_back(pc);
      }
    }
    report.negative_pairs += bc.negative_pairs;
    report.blocks.push_back(std::move(bc));
  }

  if (model.config.partitioned()) {
    for (const auto& bc : report.blocks) {
      const bool exit_specific =
          bc.role == ParamBlock::Role::specific || bc.role == ParamBlock::Role::head;
      if (exit_specific && bc.sources.size() != 1) {
        throw RoutingViolation(fmt::format("{} has {} gradient sources, expected exactly 1",
                                           bc.name, bc.sources.size()));
      }
    }
  }
  return report;
}

nlohmann::json to_json(const ConflictReport& report) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : report.blocks) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& p : b.pairs) {
      pairs.push_back({{"losses", {p.loss_a, p.loss_b}},
                       {"cosine", p.cosine ? nlohmann::json(*p.cosine) : nlohmann::json(nullptr)}});
    }
    blocks.push_back({{"name", b.name},
                      {"role", role_name(b.role)},
                      {"layer", b.layer},
                      {"sources", b.sources},
                      {"negative_pairs", b.negative_pairs},
                      {"undefined_pairs", b.undefined_pairs},
                      {"pairs", pairs}});
  }
  return {{"mode", to_string(report.mode)},
          {"negative_pairs", report.negative_pairs},
          {"blocks", blocks}};
}

CostProfile inference_cost_profile(const ModelConfig& config, std::size_t batch) {
  const Model shape = allocate(config);
  CostProfile profile;
  std::uint64_t backbone = 0;
  for (std::size_t i = 0; i < config.layers; ++i) {
    const auto& layer = shape.layers[i];
    backbone += 2ULL * batch * layer.in_dim() * layer.out_dim();
    const auto& head = shape.heads[i];
    profile.exit_cost.push_back(backbone + 2ULL * batch * head.feat_dim() * config.classes);
  }
  return profile;
}

ExitDecisions exit_decisions(const Model& model, const Dataset& data) {
  if (data.size() == 0) throw DataError("exit_decisions: empty dataset");
  const auto logits = predict(model, data.x);
  ExitDecisions d;
  d.labels = data.y;
  for (const Tensor& z : logits) {
    const Tensor p = softmax_rows(z);
    std::vector<double> conf(p.rows());
    std::vector<std::size_t> pred(p.rows());
    for (std::size_t r = 0; r < p.rows(); ++r) {
      const auto row = p.data().subspan(r * p.cols(), p.cols());
      const auto it = std::max_element(row.begin(), row.end());
      conf[r] = *it;
      pred[r] = static_cast<std::size_t>(it - row.begin());
    }
    d.confidence.push_back(std::move(conf));
    d.prediction.push_back(std::move(pred));
  }
  return d;
}

std::vector<std::size_t> assign_exits(const ExitDecisions& d, double threshold) {
  std::vector<std::size_t> exit(d.samples(), d.exits() - 1);
  for (std::size_t s = 0; s < d.samples(); ++s) {
    for (std::size_t e = 0; e + 1 < d.exits(); ++e) {
      if (d.confidence[e][s] >= threshold) {
        exit[s] = e;
        break;
      }
    }
  }
  return exit;
}

double average_cost(const ExitDecisions& d, std::span<const double> costs, double threshold) {
  if (costs.size() != d.exits()) throw DimensionError("average_cost: one cost per exit required");
  double total = 0.0;
  for (std::size_t e : assign_exits(d, threshold)) total += costs[e];
  return total / static_cast<double>(d.samples());
}

double calibrate_threshold(const ExitDecisions& d, std::span<const double> costs, double budget) {
  if (costs.empty() || budget < costs.front()) {
    throw InfeasibleBudget(fmt::format("budget {} is below the cheapest exit cost {}", budget,
                                       costs.empty() ? 0.0 : costs.front()));
  }
  if (average_cost(d, costs, 1.0) <= budget) return 1.0;
  double lo = 0.0, hi = 1.0;  // lo is always admissible
  for (int iter = 0; iter < 64; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (average_cost(d, costs, mid) <= budget) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return lo;
}

BudgetResult budgeted_eval(const ExitDecisions& calibration, const ExitDecisions& test,
                           std::span<const double> costs, double budget) {
  const double t_calib = calibrate_threshold(calibration, costs, budget);
  const double t_test = calibrate_threshold(test, costs, budget);
  BudgetResult r;
  r.budget = budget;
  r.threshold = std::min(t_calib, t_test);
  r.histogram.assign(test.exits(), 0);
  std::size_t hits = 0;
  double total = 0.0;
  const auto exits = assign_exits(test, r.threshold);
  for (std::size_t s = 0; s < exits.size(); ++s) {
    ++r.histogram[exits[s]];
    total += costs[exits[s]];
    hits += test.prediction[exits[s]][s] == test.labels[s];
  }
  r.avg_cost = total / static_cast<double>(test.samples());
  r.top1 = static_cast<double>(hits) / static_cast<double>(test.samples());
  return r;
}

BudgetResult budgeted_eval(const Model& model, const Dataset& calibration, const Dataset& test,
                           double budget) {
  const auto profile = inference_cost_profile(model.config);
  const std::vector<double> costs(profile.exit_cost.begin(), profile.exit_cost.end());
  return budgeted_eval(exit_decisions(model, calibration), exit_decisions(model, test), costs,
                       budget);
}

std::vector<double> budget_grid(const CostProfile& profile, std::size_t points) {
  if (profile.exit_cost.empty() || points == 0) return {};
  const auto lo = static_cast<double>(profile.exit_cost.front());
  const auto hi = static_cast<double>(profile.exit_cost.back());
  if (points == 1) return {hi};
  std::vector<double> grid;
  for (std::size_t i = 0; i < points; ++i) {
    grid.push_back(i + 1 == points ? hi
                                   : lo + (hi - lo) * static_cast<double>(i) /
                                              static_cast<double>(points - 1));
  }
  return grid;
}

void write_budget_csv(std::span<const BudgetResult> rows, std::size_t exits,
                      const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(fmt::format("cannot write {}", path.string()));
  out << "budget,threshold,avg_cost,top1";
  for (std::size_t e = 1; e <= exits; ++e) out << ",hist_" << e;
  out << '\n';
  for (const auto& r : rows) {
    if (r.feasible) {
      out << fmt::format("{:.17g},{:.17g},{:.17g},{:.17g}", r.budget, r.threshold, r.avg_cost, r.top1);
    } else {
      out << fmt::format("{:.17g},NA,NA,NA", r.budget);
    }
    for (std::size_t e = 0; e < exits; ++e) {
      out << ',' << (r.feasible ? r.histogram.at(e) : 0);
    }
    out << '\n';
  }
}

std::vector<BudgetResult> read_budget_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(fmt::format("cannot read {}", path.string()));
  std::string line;
  std::getline(in, line);
  if (line.rfind("budget,threshold,avg_cost,top1", 0) != 0) {
    throw FormatError("budget.csv: unexpected header");
  }
  const auto exits = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 3;
  std::vector<BudgetResult> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 4 + exits) throw FormatError(fmt::format("budget.csv: bad row '{}'", line));
    BudgetResult r;
    try {
      r.budget = std::stod(cells[0]);
      r.feasible = cells[1] != "NA";
      if (r.feasible) {
        r.threshold = std::stod(cells[1]);
        r.avg_cost = std::stod(cells[2]);
        r.top1 = std::stod(cells[3]);
      }
      for (std::size_t e = 0; e < exits; ++e) r.histogram.push_back(std::stoull(cells[4 + e]));
    } catch (const std::exception&) {
      throw FormatError(fmt::format("budget.csv: bad row '{}'", line));
    }
    if (!r.feasible) r.histogram.clear();
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace dfs
