#include "dfs/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "dfs/analysis.hpp"
#include "dfs/errors.hpp"

namespace dfs {

namespace {

using nlohmann::json;

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const char* where) {
  if (!obj.is_object()) throw ConfigError(fmt::format("{} must be a JSON object", where));
  for (const auto& [key, value] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError(fmt::format("unknown key '{}' in {}", key, where));
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& dst, const char* where) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(fmt::format("{}.{} has the wrong type", where, key));
  }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot read config {}", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::pair<std::size_t, std::size_t> line_column(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

int classify(const std::exception& e) {
  spdlog::error("{}", e.what());
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return kExitUsage;
  return kExitFailure;
}

struct RandomNet {
  ModelConfig config;
  Tensor x;
  std::vector<std::size_t> labels;
};

RandomNet random_net(std::uint64_t seed, std::size_t index) {
  RngStream rng = RngStream::derive(seed, index);
  RandomNet net;
  ModelConfig& c = net.config;
  c.layers = 2 + rng.below(3);
  c.widths.clear();
  for (std::size_t i = 0; i < c.layers; ++i) c.widths.push_back(2 + rng.below(15));
  c.input_dim = 2 + rng.below(4);
  c.classes = 2 + rng.below(3);
  c.beta = 0.05 + 0.9 * rng.uniform();
  c.bias = rng.below(2) == 1;
  c.mode = WiringMode::dfs;
  c.seed = rng.next_u64();
  const std::size_t batch = 3 + rng.below(4);
  net.x = Tensor::matrix(batch, c.input_dim);
  for (double& v : net.x.data()) v = rng.normal();
  for (std::size_t i = 0; i < batch; ++i) net.labels.push_back(rng.below(c.classes));
  return net;
}

// Keeps pre-activations off the relu kink.
void randomize_biases(Model& model, std::uint64_t seed) {
  RngStream rng = RngStream::derive(seed, 0xb1a5);
  for (auto& p : model.parameters()) {
    if (p.decay) continue;
    for (double& v : p.value->data()) v = 0.1 * rng.normal();
  }
}

// Largest relative error between reverse-mode and detach-aware finite differences.
double fd_mismatch(Model& model, const Tensor& x, const std::vector<std::size_t>& labels) {
  GradTape tape;
  const ExitOutputs out = forward(model, x, tape);
  const auto losses = exit_losses(tape, out, labels);
  const GradMap grads = tape.backward(total_loss(model.config.mode, losses), out.params);
  auto params = model.parameters();
  const LossFn fn = [&](GradTape& t) {
    const ExitOutputs o = forward(model, x, t);
    const auto l = exit_losses(t, o, labels);
    return total_loss(model.config.mode, l);
  };
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor fd = detach_aware_fd_gradient(fn, *params[p].value);
    worst = std::max(worst, max_relative_error(grads.at(out.params[p].id), fd));
  }
  return worst;
}

std::string cell_dir(double beta, std::uint64_t seed) {
  return fmt::format("beta_{:g}_seed_{}", beta, seed);
}

}  // namespace

void configure_logging() {
  auto logger = spdlog::get("dfs");
  if (!logger) {
    logger = spdlog::stderr_color_mt("dfs");
    spdlog::set_default_logger(logger);
  }
  const char* env = std::getenv("DFS_LOG");
  const std::string level = env != nullptr ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    spdlog::set_level(spdlog::level::info);
  }
}

RunConfig parse_run_config(const json& j) {
  check_keys(j, {"seed", "out", "model", "train", "data"}, "config");
  RunConfig rc;
  read(j, "seed", rc.seed, "config");
  read(j, "out", rc.out_dir, "config");

  const json model = j.value("model", json::object());
  check_keys(model, {"layers", "width", "widths", "beta", "mode", "bias", "head_shared_grad"},
             "model");
  read(model, "layers", rc.model.layers, "model");
  if (model.contains("widths") && model.contains("width")) {
    throw ConfigError("model: give either width or widths, not both");
  }
  if (model.contains("widths")) {
    read(model, "widths", rc.model.widths, "model");
  } else {
    std::size_t width = 32;
    read(model, "width", width, "model");
    rc.model.widths.assign(rc.model.layers, width);
  }
  read(model, "beta", rc.model.beta, "model");
  std::string mode = to_string(rc.model.mode);
  read(model, "mode", mode, "model");
  rc.model.mode = parse_wiring_mode(mode);
  read(model, "bias", rc.model.bias, "model");
  read(model, "head_shared_grad", rc.model.head_shared_grad, "model");

  const json train = j.value("train", json::object());
  check_keys(train, {"steps", "batch_size", "lr", "momentum", "weight_decay", "drop_points",
                     "eval_every", "ensemble"},
             "train");
  read(train, "steps", rc.train.total_steps, "train");
  read(train, "batch_size", rc.train.batch_size, "train");
  read(train, "lr", rc.train.lr0, "train");
  read(train, "momentum", rc.train.momentum, "train");
  read(train, "weight_decay", rc.train.weight_decay, "train");
  if (train.contains("drop_points")) {
    std::vector<double> drops;
    read(train, "drop_points", drops, "train");
    if (drops.size() != 3) throw ConfigError("train.drop_points needs exactly 3 fractions");
    std::copy(drops.begin(), drops.end(), rc.train.drop_points.begin());
  }
  read(train, "eval_every", rc.train.eval_every, "train");
  std::string ensemble = "logits";
  read(train, "ensemble", ensemble, "train");
  if (ensemble != "logits" && ensemble != "probabilities") {
    throw ConfigError("train.ensemble must be 'logits' or 'probabilities'");
  }
  rc.train.ensemble_probabilities = ensemble == "probabilities";

  const json data = j.value("data", json::object());
  check_keys(data, {"kind", "classes", "train_per_class", "val_per_class", "test_per_class",
                    "noise", "seed", "normalize", "train_images", "train_labels", "test_images",
                    "test_labels", "val_fraction"},
             "data");
  DataSpec& d = rc.data;
  read(data, "kind", d.kind, "data");
  read(data, "classes", d.classes, "data");
  read(data, "train_per_class", d.train_per_class, "data");
  read(data, "val_per_class", d.val_per_class, "data");
  read(data, "test_per_class", d.test_per_class, "data");
  read(data, "noise", d.noise, "data");
  read(data, "seed", d.seed, "data");
  read(data, "normalize", d.normalize, "data");
  read(data, "train_images", d.train_images, "data");
  read(data, "train_labels", d.train_labels, "data");
  read(data, "test_images", d.test_images, "data");
  read(data, "test_labels", d.test_labels, "data");
  read(data, "val_fraction", d.val_fraction, "data");
  if (d.kind != "spirals" && d.kind != "gaussians" && d.kind != "idx") {
    throw ConfigError(fmt::format("data.kind '{}' is not spirals, gaussians or idx", d.kind));
  }
  if (d.kind == "idx" && (d.train_images.empty() || d.train_labels.empty() ||
                          d.test_images.empty() || d.test_labels.empty())) {
    throw ConfigError("idx data needs train_images, train_labels, test_images, test_labels");
  }
  if (d.kind != "idx" && (d.classes < 2 || d.train_per_class == 0 || d.test_per_class == 0)) {
    throw ConfigError("synthetic data needs classes >= 2 and non-empty train/test splits");
  }
  if (d.noise < 0.0) throw ConfigError("data.noise must be >= 0");
  if (!(d.val_fraction >= 0.0 && d.val_fraction < 1.0)) {
    throw ConfigError("data.val_fraction must lie in [0, 1)");
  }

  rc.model.seed = rc.seed;
  rc.train.seed = rc.seed;
  rc.train.validate();
  // input_dim/classes are provisional until the data is loaded; check the rest.
  ModelConfig probe = rc.model;
  probe.input_dim = std::max<std::size_t>(probe.input_dim, 1);
  probe.classes = std::max<std::size_t>(probe.classes, 2);
  probe.validate();
  return rc;
}

RunConfig parse_run_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_column(text, e.byte);
    throw ConfigError(fmt::format("malformed JSON at line {}, column {}: {}", line, col, e.what()));
  }
  return parse_run_config(j);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config_text(read_text(path));
}

json to_json(const RunConfig& rc) {
  json j;
  j["seed"] = rc.seed;
  if (!rc.out_dir.empty()) j["out"] = rc.out_dir;
  j["model"] = {{"layers", rc.model.layers},
                {"widths", rc.model.widths},
                {"beta", rc.model.beta},
                {"mode", to_string(rc.model.mode)},
                {"bias", rc.model.bias},
                {"head_shared_grad", rc.model.head_shared_grad}};
  j["train"] = {{"steps", rc.train.total_steps},
                {"batch_size", rc.train.batch_size},
                {"lr", rc.train.lr0},
                {"momentum", rc.train.momentum},
                {"weight_decay", rc.train.weight_decay},
                {"drop_points", rc.train.drop_points},
                {"eval_every", rc.train.eval_every},
                {"ensemble", rc.train.ensemble_probabilities ? "probabilities" : "logits"}};
  const DataSpec& d = rc.data;
  json data = {{"kind", d.kind}, {"seed", d.seed}, {"normalize", d.normalize}};
  if (d.kind == "idx") {
    data["train_images"] = d.train_images;
    data["train_labels"] = d.train_labels;
    data["test_images"] = d.test_images;
    data["test_labels"] = d.test_labels;
    data["val_fraction"] = d.val_fraction;
  } else {
    data["classes"] = d.classes;
    data["train_per_class"] = d.train_per_class;
    data["val_per_class"] = d.val_per_class;
    data["test_per_class"] = d.test_per_class;
    data["noise"] = d.noise;
  }
  j["data"] = data;
  return j;
}

Splits make_datasets(const DataSpec& spec) {
  Splits s;
  if (spec.kind == "idx") {
    Dataset full = load_idx(spec.train_images, spec.train_labels);
    s.test = load_idx(spec.test_images, spec.test_labels, full.classes);
    const auto order = batches(full.size(), full.size(), spec.seed, 0).front();
    const auto n_val = static_cast<std::size_t>(spec.val_fraction * static_cast<double>(full.size()));
    const std::vector<std::size_t> val_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train_rows(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(train_rows.begin(), train_rows.end());
    s.train = full.subset(train_rows);
    s.val = full.subset(val_rows);
  } else {
    SyntheticSpec syn;
    syn.kind = spec.kind == "spirals" ? SyntheticKind::spirals : SyntheticKind::gaussians;
    syn.classes = spec.classes;
    syn.noise = spec.noise;
    syn.samples_per_class = spec.train_per_class;
    syn.seed = RngStream::derive(spec.seed, 0).next_u64();
    s.train = generate(syn);
    syn.samples_per_class = spec.val_per_class;
    syn.seed = RngStream::derive(spec.seed, 1).next_u64();
    s.val = generate(syn);
    syn.samples_per_class = spec.test_per_class;
    syn.seed = RngStream::derive(spec.seed, 2).next_u64();
    s.test = generate(syn);
  }
  s.train.split = "train";
  s.val.split = "val";
  s.test.split = "test";
  if (spec.normalize) {
    const NormStats stats = fit_normalization(s.train);
    s.train = apply_normalization(std::move(s.train), stats);
    if (s.val.size() > 0) s.val = apply_normalization(std::move(s.val), stats);
    s.test = apply_normalization(std::move(s.test), stats);
  }
  return s;
}

RunOutcome run_training(const RunConfig& config, const std::filesystem::path& out_dir) {
  const Splits splits = make_datasets(config.data);
  ModelConfig mc = config.model;
  mc.input_dim = splits.train.dim();
  mc.classes = splits.train.classes;
  mc.seed = config.seed;
  TrainConfig tc = config.train;
  tc.seed = config.seed;

  std::vector<const Dataset*> evals;
  if (splits.val.size() > 0) evals.push_back(&splits.val);
  evals.push_back(&splits.test);

  RunOutcome outcome;
  outcome.result = train_loop(build(mc), splits.train, tc, evals);
  outcome.test = evaluate(outcome.result.model, splits.test, tc.ensemble_probabilities);

  std::filesystem::create_directories(out_dir);
  write_metrics_csv(outcome.result.history, out_dir / "metrics.csv");
  {
    std::ofstream summary(out_dir / "summary.json");
    summary << metrics_summary(outcome.result.history).dump(2) << '\n';
  }
  save_checkpoint(outcome.result.model, out_dir / "model.ckpt", json{{"run", to_json(config)}});
  return outcome;
}

int cmd_train(const std::filesystem::path& config_path, const std::filesystem::path& out_dir,
              std::optional<std::uint64_t> seed, std::ostream& out) {
  try {
    RunConfig rc = load_run_config(config_path);
    if (seed) rc.seed = *seed;
    const std::filesystem::path dir = !out_dir.empty() ? out_dir
                                      : !rc.out_dir.empty() ? std::filesystem::path(rc.out_dir)
                                                            : std::filesystem::path("run");
    const RunOutcome outcome = run_training(rc, dir);
    for (std::size_t e = 0; e < outcome.test.exit_top1.size(); ++e) {
      out << fmt::format("exit {} test top1 {:.4f}\n", e + 1, outcome.test.exit_top1[e]);
    }
    out << fmt::format("ensemble test top1 {:.4f}\n", outcome.test.ensemble_top1);
    out << fmt::format("wrote {}\n", dir.string());
    return kExitOk;
  } catch (const std::exception& e) {
    return classify(e);
  }
}

int cmd_flops(std::size_t layers, std::size_t width, double beta, std::ostream& out,
              const std::filesystem::path& out_dir) {
  try {
    if (layers < 1 || width < 2) throw ConfigError("flops: need --layers >= 1 and --width >= 2");
    if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("flops: --beta must lie in (0, 1)");
    const double bn = beta * static_cast<double>(width);
    if (std::abs(bn - std::round(bn)) > 1e-9) {
      throw ConfigError(fmt::format("flops: beta * width = {} is not an integer", bn));
    }
    const double red = reduction(layers);
    out << fmt::format("L={} N={} beta={:g}\n", layers, width, beta);
    out << fmt::format("{:<6} {:>6} {:>14} {:>14} {:>14} {:>14}\n", "mode", "beta", "fwd_closed",
                       "fwd_tape", "bwd_closed", "bwd_tape");
    const CountReport r = verify_counts(layers, width, beta);
    for (const auto& c : r.checks) {
      out << fmt::format("{:<6} {:>6g} {:>14} {:>14} {:>14} {:>14}\n",
                         c.mode == AccountingMode::dfs ? "dfs" : "joint", c.beta, c.closed.forward,
                         c.measured.forward, c.closed.backward, c.measured.backward);
    }
    out << "counts: exact\n";
    const json report = to_json(r);
    out << fmt::format("reduction: {:.2f}% ({:.6f})\n", 100.0 * red, red);
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      std::ofstream(out_dir / "flops.json") << report.dump(2) << '\n';
    }
    return kExitOk;
  } catch (const std::exception& e) {
    return classify(e);
  }
}

int cmd_gradcheck(std::uint64_t seed, std::size_t models, bool inject_fault, std::ostream& out) {
  constexpr double kTolerance = 1e-4;
  try {
    std::size_t failures = 0;
    for (std::size_t i = 0; i < models; ++i) {
      RandomNet net = random_net(seed, i);
      net.config.head_shared_grad = inject_fault;
      Model model = build(net.config);
      randomize_biases(model, net.config.seed);
      std::string status = "ok";
      try {
        const RoutingReport routing = routing_check(model, net.x, net.labels);
        const double dfs_err = fd_mismatch(model, net.x, net.labels);
        ModelConfig joint_cfg = net.config;
        joint_cfg.mode = WiringMode::joint;
        Model joint = build(joint_cfg);
        randomize_biases(joint, net.config.seed);
        const double joint_err = fd_mismatch(joint, net.x, net.labels);
        if (dfs_err > kTolerance || joint_err > kTolerance) {
          status = fmt::format("FAIL fd mismatch dfs {:.3g} joint {:.3g}", dfs_err, joint_err);
          ++failures;
        } else {
          status = fmt::format("ok ({} routing clauses, fd err dfs {:.2g} joint {:.2g})",
                               routing.checks.size(), dfs_err, joint_err);
        }
      } catch (const RoutingViolation& v) {
        status = fmt::format("FAIL {}", v.what());
        ++failures;
      }
      out << fmt::format("model {:>2} L={} widths=[{}] beta={:.3f}: {}\n", i, net.config.layers,
                         fmt::join(net.config.widths, ","), net.config.beta, status);
    }
    out << fmt::format("gradcheck: {}/{} models passed\n", models - failures, models);
    return failures == 0 ? kExitOk : kExitFailure;
  } catch (const std::exception& e) {
    return classify(e);
  }
}

int cmd_budget(const std::filesystem::path& checkpoint, const std::vector<double>& budgets,
               const std::filesystem::path& out_dir, std::ostream& out) {
  try {
    const Checkpoint ckpt = read_checkpoint(checkpoint);
    if (!ckpt.config.contains("run")) {
      throw FormatError("checkpoint carries no run config; cannot rebuild its datasets");
    }
    const RunConfig rc = parse_run_config(ckpt.config.at("run"));
    const Splits splits = make_datasets(rc.data);
    const Model& model = ckpt.model;
    const Dataset& calibration = splits.val.size() > 0 ? splits.val : splits.train;

    const CostProfile profile = inference_cost_profile(model.config);
    const std::vector<double> costs(profile.exit_cost.begin(), profile.exit_cost.end());
    const ExitDecisions calib = exit_decisions(model, calibration);
    const ExitDecisions test = exit_decisions(model, splits.test);
    const std::vector<double> grid = budgets.empty() ? budget_grid(profile, 10) : budgets;

    std::vector<BudgetResult> rows;
    for (double b : grid) {
      try {
        rows.push_back(budgeted_eval(calib, test, costs, b));
      } catch (const InfeasibleBudget& e) {
        spdlog::warn("{}", e.what());
        BudgetResult r;
        r.budget = b;
        r.feasible = false;
        rows.push_back(r);
      }
    }
    const std::filesystem::path dir = out_dir.empty() ? checkpoint.parent_path() : out_dir;
    if (!dir.empty()) std::filesystem::create_directories(dir);
    write_budget_csv(rows, model.config.layers, dir / "budget.csv");
    for (const auto& r : rows) {
      if (r.feasible) {
        out << fmt::format("budget {:>12.1f}  threshold {:.4f}  avg_cost {:>12.1f}  top1 {:.4f}\n",
                           r.budget, r.threshold, r.avg_cost, r.top1);
      } else {
        out << fmt::format("budget {:>12.1f}  infeasible\n", r.budget);
      }
    }
    out << fmt::format("wrote {}\n", (dir / "budget.csv").string());
    return kExitOk;
  } catch (const std::exception& e) {
    return classify(e);
  }
}

int cmd_sweep(const std::filesystem::path& config_path, const std::vector<double>& betas,
              std::size_t seeds, std::size_t jobs, const std::filesystem::path& out_dir,
              std::ostream& out) {
  struct Cell {
    double beta = 0.0;
    std::uint64_t seed = 0;
    std::optional<EvalResult> result;
    std::string error;
  };
  try {
    const RunConfig base = load_run_config(config_path);
    if (betas.empty() || seeds == 0) throw ConfigError("sweep: need at least one beta and one seed");
    for (double b : betas) {
      if (!(b > 0.0 && b < 1.0)) throw ConfigError(fmt::format("sweep: beta {} outside (0, 1)", b));
    }
    const std::filesystem::path dir = !out_dir.empty() ? out_dir
                                      : !base.out_dir.empty() ? std::filesystem::path(base.out_dir)
                                                              : std::filesystem::path("sweep");
    std::filesystem::create_directories(dir);

    std::vector<Cell> cells;
    for (double b : betas) {
      for (std::size_t s = 0; s < seeds; ++s) cells.push_back({b, base.seed + s, std::nullopt, {}});
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < cells.size(); i = next++) {
        Cell& cell = cells[i];
        RunConfig rc = base;
        rc.model.beta = cell.beta;
        rc.seed = cell.seed;
        try {
          cell.result = run_training(rc, dir / cell_dir(cell.beta, cell.seed)).test;
        } catch (const std::exception& e) {
          cell.error = e.what();
        }
      }
    };
    {
      std::vector<std::jthread> pool;
      for (std::size_t t = 0; t < std::max<std::size_t>(1, jobs); ++t) pool.emplace_back(worker);
    }

    std::ofstream csv(dir / "sweep.csv", std::ios::binary);
    csv << "beta,seed,exit_id,top1,loss\n";
    std::size_t failed = 0;
    for (const Cell& c : cells) {
      if (!c.result) {
        ++failed;
        spdlog::error("cell beta={} seed={} failed: {}", c.beta, c.seed, c.error);
        continue;
      }
      for (std::size_t e = 0; e < c.result->exit_top1.size(); ++e) {
        csv << fmt::format("{:g},{},{},{:.17g},{:.17g}\n", c.beta, c.seed, e + 1,
                           c.result->exit_top1[e], c.result->exit_loss[e]);
      }
      csv << fmt::format("{:g},{},ensemble,{:.17g},{:.17g}\n", c.beta, c.seed,
                         c.result->ensemble_top1, c.result->ensemble_loss);
    }

    // Aggregate rows: seed column is "mean" or "std" (sample std, 0 for one seed).
    for (double b : betas) {
      std::vector<const EvalResult*> ok;
      for (const Cell& c : cells) {
        if (c.beta == b && c.result) ok.push_back(&*c.result);
      }
      if (ok.empty()) continue;
      const std::size_t exits = ok.front()->exit_top1.size();
      for (std::size_t e = 0; e <= exits; ++e) {
        auto pick = [&](const EvalResult* r, bool loss) {
          if (e == exits) return loss ? r->ensemble_loss : r->ensemble_top1;
          return loss ? r->exit_loss[e] : r->exit_top1[e];
        };
        auto stats = [&](bool loss) {
          double mean = 0.0;
          for (const auto* r : ok) mean += pick(r, loss);
          mean /= static_cast<double>(ok.size());
          double var = 0.0;
          for (const auto* r : ok) var += (pick(r, loss) - mean) * (pick(r, loss) - mean);
          const double sd = ok.size() > 1 ? std::sqrt(var / static_cast<double>(ok.size() - 1)) : 0.0;
          return std::pair{mean, sd};
        };
        const auto [top1_mean, top1_sd] = stats(false);
        const auto [loss_mean, loss_sd] = stats(true);
        const std::string exit_id = e == exits ? "ensemble" : std::to_string(e + 1);
        csv << fmt::format("{:g},mean,{},{:.17g},{:.17g}\n", b, exit_id, top1_mean, loss_mean);
        csv << fmt::format("{:g},std,{},{:.17g},{:.17g}\n", b, exit_id, top1_sd, loss_sd);
        out << fmt::format("beta {:<5g} exit {:<8} top1 {:.4f} +- {:.4f}\n", b, exit_id, top1_mean,
                           top1_sd);
      }
    }
    out << fmt::format("sweep: {}/{} cells succeeded; wrote {}\n", cells.size() - failed,
                       cells.size(), (dir / "sweep.csv").string());
    return failed == cells.size() ? kExitFailure : kExitOk;
  } catch (const std::exception& e) {
    return classify(e);
  }
}

int run_cli(int argc, const char* const* argv) {
  configure_logging();
  CLI::App app{"Multi-exit network training lab: feature partitioning and routed gradients"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  app.add_option("--config", config_path, "Run configuration (JSON)");
  app.add_option("--out", out_dir, "Output directory");
  auto* seed_opt = app.add_option("--seed", seed, "Random seed");
  app.add_option("--jobs", jobs, "Concurrent sweep cells")->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "Train one model and write metrics + checkpoint");

  auto* flops = app.add_subcommand("flops", "Check tape operation counts against closed forms");
  std::size_t layers = 0, width = 8;
  double beta = 0.5;
  flops->add_option("--layers", layers, "Layer count L")->required();
  flops->add_option("--width", width, "Square width N");
  flops->add_option("--beta", beta, "Partition ratio");

  auto* grad = app.add_subcommand("gradcheck", "Routing table + finite-difference checks");
  std::size_t models = 20;
  bool inject_fault = false;
  grad->add_option("--models", models, "Random models to check");
  grad->add_flag("--inject-fault", inject_fault, "Flip the head detach flag (must fail)");

  auto* budget = app.add_subcommand("budget", "Budgeted early-exit evaluation curve");
  std::string checkpoint;
  std::vector<double> budgets;
  budget->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required();
  budget->add_option("--budgets", budgets, "Budgets in ops/sample (default: 10-point grid)")
      ->delimiter(',');

  auto* sweep = app.add_subcommand("sweep", "beta x seed grid of training runs");
  std::vector<double> betas{0.1, 0.5, 0.9};
  std::size_t seeds = 5;
  sweep->add_option("--beta", betas, "Comma-separated beta values")->delimiter(',');
  sweep->add_option("--seeds", seeds, "Seeds per beta");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  const std::optional<std::uint64_t> seed_override =
      seed_opt->count() > 0 ? std::optional(seed) : std::nullopt;
  if (*train || *sweep) {
    if (config_path.empty()) {
      std::cerr << "--config is required for " << (*train ? "train" : "sweep") << '\n';
      return kExitUsage;
    }
  }
  if (*train) return cmd_train(config_path, out_dir, seed_override, std::cout);
  if (*flops) return cmd_flops(layers, width, beta, std::cout, out_dir);
  if (*grad) return cmd_gradcheck(seed_override.value_or(0), models, inject_fault, std::cout);
  if (*budget) return cmd_budget(checkpoint, budgets, out_dir, std::cout);
  if (*sweep) return cmd_sweep(config_path, betas, seeds, jobs, out_dir, std::cout);
  return kExitUsage;
}

}  // namespace dfs
