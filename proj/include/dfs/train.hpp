#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfs/autograd.hpp"
#include "dfs/data.hpp"
#include "dfs/model.hpp"

namespace dfs {

struct TrainConfig {
  std::size_t total_steps = 3000;
  std::size_t batch_size = 64;
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // Fractions of total_steps at which the learning rate drops by 10x.
  std::array<double, 3> drop_points{250.0 / 300.0, 280.0 / 300.0, 295.0 / 300.0};
  std::size_t eval_every = 500;
  std::uint64_t seed = 0;
  bool ensemble_probabilities = false;  // average softmax instead of logits

  void validate() const;  // throws ConfigError
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct OptimizerState {
  std::vector<Tensor> velocity;
  static OptimizerState zeros_like(std::span<const ParamRef> params);
};

inline constexpr std::size_t kEnsembleExit = 0;

struct MetricsRow {
  std::size_t step = 0;
  std::string split;
  std::size_t exit_id = kEnsembleExit;  // 1..L, or kEnsembleExit
  double loss = 0.0;
  double top1 = 0.0;

  std::string exit_label() const;
  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

Var cross_entropy(GradTape& tape, Var logits, std::span<const std::size_t> labels);
std::vector<Var> exit_losses(GradTape& tape, const ExitOutputs& outputs,
                             std::span<const std::size_t> labels);

/// Losses seeded (each at unit weight) for a backward step: all exits, or the
/// last one alone in final_only mode.
std::vector<Var> total_loss(WiringMode mode, std::span<const Var> exit_losses);

/// v <- momentum * v + (g + wd * w);  w <- w - lr * v.  Decay is skipped for
/// parameters whose ParamRef::decay is false.
void sgd_step(std::span<const ParamRef> params, std::span<const Tensor> grads,
              OptimizerState& state, double lr, double momentum, double weight_decay);

double lr_at(std::size_t step, const TrainConfig& config);

struct EvalResult {
  std::vector<double> exit_top1;
  std::vector<double> exit_loss;
  double ensemble_top1 = 0.0;
  double ensemble_loss = 0.0;
};

/// Class index per row of the mean of the given per-exit scores.
std::vector<std::size_t> ensemble_predictions(std::span<const Tensor> exit_scores);

/// Per-exit logits (depth order) for every row of `x`, computed in chunks.
std::vector<Tensor> predict(const Model& model, const Tensor& x);

EvalResult evaluate(const Model& model, const Dataset& data, bool ensemble_probabilities = false);

struct TrainResult {
  Model model;
  std::vector<MetricsRow> history;
};

/// Deterministic mini-batch SGD. Emits metrics for the training set and every
/// `eval_sets` entry at step 0, every eval_every steps, and after the last step.
/// Throws DivergenceError on a non-finite loss.
TrainResult train_loop(Model model, const Dataset& train, const TrainConfig& config,
                       std::span<const Dataset* const> eval_sets = {});

void write_metrics_csv(std::span<const MetricsRow> rows, const std::filesystem::path& path);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

/// {final: {split: {exit_1.., ensemble}}, best_val: {...}}
nlohmann::json metrics_summary(std::span<const MetricsRow> rows);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Checkpoint layout: "DFSCKPT1", u32 little-endian manifest length, UTF-8 JSON
// manifest {config, tensors: [{name, shape, offset, len}]}, then the tensors as
// little-endian float64. offset/len are byte counts relative to the blob start.
// The manifest's config holds the model config under "model" plus anything the
// caller passes in `extra`.
void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const nlohmann::json& extra = nlohmann::json::object());

struct Checkpoint {
  Model model;
  nlohmann::json config;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace dfs
