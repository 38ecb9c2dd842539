#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dfs/tensor.hpp"

namespace dfs {

struct Dataset {
  Tensor x;                          // n x d
  std::vector<std::size_t> y;        // n labels in [0, classes)
  std::size_t classes = 0;
  std::string split = "train";

  std::size_t size() const noexcept { return y.size(); }
  std::size_t dim() const { return x.cols(); }
  void validate() const;  // throws DataError
  Dataset subset(std::span<const std::size_t> rows) const;
};

enum class SyntheticKind { spirals, gaussians };

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::spirals;
  std::size_t classes = 3;
  std::size_t samples_per_class = 200;
  double noise = 0.15;
  std::uint64_t seed = 0;
};

/// K interleaved arms: t ~ U[0, 1), radius t, angle 4*pi*t + 2*pi*k/K plus
/// Gaussian noise of std `noise` radians. Samples are stored class by class.
Dataset gen_spirals(const SyntheticSpec& spec);

/// K isotropic blobs with centers evenly spaced on a circle of radius 2.
Dataset gen_gaussians(const SyntheticSpec& spec);

Dataset generate(const SyntheticSpec& spec);

/// IDX reader: rank-3 u8 images (magic 0x00000803) and rank-1 u8 labels
/// (magic 0x00000801), big-endian header. Pixels are scaled by 1/255 and each
/// image is flattened row-major. `classes` defaults to max label + 1.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::optional<std::size_t> classes = std::nullopt);

/// Inverse of load_idx for data whose pixels are multiples of 1/255.
void write_idx(const Dataset& data, std::size_t rows, std::size_t cols,
               const std::filesystem::path& images, const std::filesystem::path& labels);

/// Shuffled row indices split into batches; the permutation is a function of
/// (seed, epoch) only and the last batch may be short.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::uint64_t seed, std::uint64_t epoch);

struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

// Per-feature standardization. Stats are fitted on the training split and
// applied unchanged to the others; the std is floored at 1e-8.
NormStats fit_normalization(const Dataset& data);
Dataset apply_normalization(Dataset data, const NormStats& stats);
std::pair<Dataset, NormStats> normalize(const Dataset& data);

}  // namespace dfs
