#pragma once

#include <optional>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfs/data.hpp"
#include "dfs/model.hpp"
#include "dfs/train.hpp"

namespace dfs {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct DataSpec {
  std::string kind = "spirals";  // spirals | gaussians | idx
  std::size_t classes = 3;
  std::size_t train_per_class = 200;
  std::size_t val_per_class = 100;
  std::size_t test_per_class = 100;
  double noise = 0.15;
  std::uint64_t seed = 1234;
  bool normalize = true;
  // idx only
  std::string train_images, train_labels, test_images, test_labels;
  double val_fraction = 0.1;

  friend bool operator==(const DataSpec&, const DataSpec&) = default;
};

/// Everything one training run needs. Serialized as a single JSON document:
///   {"seed", "out", "model": {...}, "train": {...}, "data": {...}}
/// Unknown keys are rejected at every level.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir;
  ModelConfig model;  // input_dim / classes are filled in from the data
  TrainConfig train;
  DataSpec data;
};

RunConfig parse_run_config(const nlohmann::json& j);
/// Throws ConfigError; malformed JSON reports line and column.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config_text(const std::string& text);
nlohmann::json to_json(const RunConfig& config);

struct Splits {
  Dataset train;
  Dataset val;   // may be empty
  Dataset test;
};

/// Builds train/val/test; features are standardized with train statistics.
Splits make_datasets(const DataSpec& spec);

struct RunOutcome {
  TrainResult result;
  EvalResult test;
};

/// Trains and writes metrics.csv, summary.json and model.ckpt into `out_dir`.
RunOutcome run_training(const RunConfig& config, const std::filesystem::path& out_dir);

// Subcommands. Each returns a process exit code: 0 success, 1 runtime or
// assertion failure, 2 usage or configuration error.
int cmd_train(const std::filesystem::path& config_path, const std::filesystem::path& out_dir,
              std::optional<std::uint64_t> seed, std::ostream& out);
int cmd_flops(std::size_t layers, std::size_t width, double beta, std::ostream& out,
              const std::filesystem::path& out_dir = {});
int cmd_gradcheck(std::uint64_t seed, std::size_t models, bool inject_fault, std::ostream& out);
int cmd_budget(const std::filesystem::path& checkpoint, const std::vector<double>& budgets,
               const std::filesystem::path& out_dir, std::ostream& out);
int cmd_sweep(const std::filesystem::path& config_path, const std::vector<double>& betas,
              std::size_t seeds, std::size_t jobs, const std::filesystem::path& out_dir,
              std::ostream& out);

/// Full command line entry point (CLI11); returns the exit code.
int run_cli(int argc, const char* const* argv);

void configure_logging();

}  // namespace dfs
