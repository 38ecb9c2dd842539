#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfs/autograd.hpp"
#include "dfs/data.hpp"
#include "dfs/model.hpp"

namespace dfs {

// ---------------------------------------------------------------------------
// Operation accounting
//
// The reference network is square: batch, input, every layer width, and every
// head output are N, so each layer and each head is one N x N by N x N product
// (2N^3 operations). Biases are off; activations and losses are free.
//
//   joint: forward 4LN^3, backward (8L - 2)N^3
//   dfs:   forward 4LN^3, backward 6LN^3   (any beta)
// ---------------------------------------------------------------------------

enum class AccountingMode { joint, dfs };

struct AccountingModel {
  std::size_t layers = 2;
  std::size_t width = 4;
  double beta = 0.5;
  AccountingMode mode = AccountingMode::joint;
};

MacCounts closed_form(const AccountingModel& model);

/// Fraction of training operations saved per step: 1 - 10L / (12L - 2).
double reduction(std::size_t layers);

struct NodeCount {
  NodeId id = 0;
  std::string op;
  std::uint64_t forward = 0;
  std::uint64_t backward = 0;
};

struct CountCheck {
  AccountingMode mode = AccountingMode::joint;
  double beta = 0.5;
  MacCounts closed;
  MacCounts measured;
  std::vector<NodeCount> nodes;  // matmul nodes only
  bool exact() const noexcept { return closed == measured; }
};

struct CountReport {
  std::size_t layers = 0;
  std::size_t width = 0;
  std::vector<CountCheck> checks;
  bool passed = false;
};

/// One forward + backward (all exit losses seeded) of the square reference
/// network on a fresh tape; returns the tape's counts and per-matmul dump.
CountCheck measure_training_step(std::size_t layers, std::size_t width, double beta,
                                 AccountingMode mode, std::uint64_t seed = 0);

/// Measures joint at `beta` and dfs at `beta` plus every beta in {1/4, 1/2, 3/4}
/// with integral beta * N, and demands exact equality with closed_form and
/// identical dfs counts across beta. Throws ConfigError if beta * N is not
/// integral and AccountingViolation (with a per-node dump) on any mismatch.
CountReport verify_counts(std::size_t layers, std::size_t width, double beta);

nlohmann::json to_json(const CountReport& report);

// ---------------------------------------------------------------------------
// Gradient conflict
// ---------------------------------------------------------------------------

struct PairCosine {
  std::size_t loss_a = 0;  // 1-based exit ids
  std::size_t loss_b = 0;
  std::optional<double> cosine;  // empty when either gradient is all zero
};

struct BlockConflict {
  std::string name;
  ParamBlock::Role role = ParamBlock::Role::full;
  std::size_t layer = 0;
  std::vector<std::size_t> sources;  // exits whose loss reaches this block
  std::vector<PairCosine> pairs;
  std::size_t negative_pairs = 0;
  std::size_t undefined_pairs = 0;
};

struct ConflictReport {
  WiringMode mode = WiringMode::joint;
  std::vector<BlockConflict> blocks;
  std::size_t negative_pairs = 0;  // over all blocks
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// One backward per exit loss, then pairwise cosines of the per-loss gradients
/// for every parameter block. In partitioned modes every w_i- block and every
/// head must have exactly one source; otherwise RoutingViolation is thrown.
ConflictReport gradient_conflict_report(const Model& model, const Tensor& x,
                                        const std::vector<std::size_t>& labels);

nlohmann::json to_json(const ConflictReport& report);

// ---------------------------------------------------------------------------
// Budgeted (anytime) classification
// ---------------------------------------------------------------------------

/// Cumulative per-sample inference cost of exit i: layers 1..i plus head i,
/// 2 operations per multiply-accumulate.
struct CostProfile {
  std::vector<std::uint64_t> exit_cost;
};

CostProfile inference_cost_profile(const ModelConfig& config, std::size_t batch = 1);

/// Per exit, per sample: max softmax probability and predicted class.
struct ExitDecisions {
  std::vector<std::vector<double>> confidence;
  std::vector<std::vector<std::size_t>> prediction;
  std::vector<std::size_t> labels;

  std::size_t exits() const noexcept { return confidence.size(); }
  std::size_t samples() const noexcept { return labels.size(); }
};

ExitDecisions exit_decisions(const Model& model, const Dataset& data);

/// A sample leaves at the first exit whose confidence is >= threshold, else at the last.
std::vector<std::size_t> assign_exits(const ExitDecisions& d, double threshold);
double average_cost(const ExitDecisions& d, std::span<const double> costs, double threshold);

/// Largest threshold in [0, 1] whose average cost is within budget, by 64
/// rounds of bisection. Requires budget >= costs[0].
double calibrate_threshold(const ExitDecisions& d, std::span<const double> costs, double budget);

struct BudgetResult {
  double budget = 0.0;
  bool feasible = true;
  double threshold = 0.0;
  double avg_cost = 0.0;
  double top1 = 0.0;
  std::vector<std::size_t> histogram;  // samples per exit
};

/// Threshold calibrated on `calibration`, then lowered if needed so that the
/// test split's own (label-free) average cost also stays within budget.
/// Throws InfeasibleBudget when budget < costs[0].
BudgetResult budgeted_eval(const ExitDecisions& calibration, const ExitDecisions& test,
                           std::span<const double> costs, double budget);
BudgetResult budgeted_eval(const Model& model, const Dataset& calibration, const Dataset& test,
                           double budget);

/// `points` budgets evenly spaced from c_1 to c_L inclusive.
std::vector<double> budget_grid(const CostProfile& profile, std::size_t points);

void write_budget_csv(std::span<const BudgetResult> rows, std::size_t exits,
                      const std::filesystem::path& path);
std::vector<BudgetResult> read_budget_csv(const std::filesystem::path& path);

}  // namespace dfs
