#include "dfs/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include <fmt/format.h>

#include "dfs/errors.hpp"

namespace dfs {

namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr double kStdFloor = 1e-8;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(fmt::format("cannot open {}", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset,
                        const std::filesystem::path& path) {
  if (offset + 4 > buf.size()) {
    throw FormatError(fmt::format("{}: truncated header", path.string()));
  }
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace

void Dataset::validate() const {
  if (y.empty()) throw DataError("dataset is empty");
  if (x.rank() != 2 || x.rows() != y.size()) {
    throw DataError(fmt::format("dataset has {} labels for features {}", y.size(),
                                shape_string(x.shape())));
  }
  for (std::size_t label : y) {
    if (label >= classes) {
      throw DataError(fmt::format("label {} out of range [0, {})", label, classes));
    }
  }
  if (!x.all_finite()) throw DataError("dataset contains non-finite features");
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.classes = classes;
  out.split = split;
  const std::size_t d = x.cols();
  out.x = Tensor::matrix(rows.size(), d);
  out.y.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(&x.data()[rows[i] * d], d, &out.x.data()[i * d]);
    out.y.push_back(y[rows[i]]);
  }
  return out;
}

Dataset gen_spirals(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw ConfigError("spirals need at least 2 classes");
  if (spec.noise < 0.0) throw ConfigError("noise must be non-negative");
  RngStream rng(spec.seed);
  const std::size_t n = spec.classes * spec.samples_per_class;
  Dataset out;
  out.classes = spec.classes;
  out.x = Tensor::matrix(n, 2);
  out.y.reserve(n);
  std::size_t row = 0;
  for (std::size_t k = 0; k < spec.classes; ++k) {
    const double offset = 2.0 * std::numbers::pi * static_cast<double>(k) /
                          static_cast<double>(spec.classes);
    for (std::size_t j = 0; j < spec.samples_per_class; ++j, ++row) {
      const double t = rng.uniform();
      const double angle = 4.0 * std::numbers::pi * t + offset + spec.noise * rng.normal();
      out.x.at(row, 0) = t * std::cos(angle);
      out.x.at(row, 1) = t * std::sin(angle);
      out.y.push_back(k);
    }
  }
  return out;
}

Dataset gen_gaussians(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw ConfigError("gaussians need at least 2 classes");
  if (spec.noise < 0.0) throw ConfigError("noise must be non-negative");
  RngStream rng(spec.seed);
  const std::size_t n = spec.classes * spec.samples_per_class;
  Dataset out;
  out.classes = spec.classes;
  out.x = Tensor::matrix(n, 2);
  out.y.reserve(n);
  std::size_t row = 0;
  for (std::size_t k = 0; k < spec.classes; ++k) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) /
                         static_cast<double>(spec.classes);
    for (std::size_t j = 0; j < spec.samples_per_class; ++j, ++row) {
      out.x.at(row, 0) = 2.0 * std::cos(angle) + spec.noise * rng.normal();
      out.x.at(row, 1) = 2.0 * std::sin(angle) + spec.noise * rng.normal();
      out.y.push_back(k);
    }
  }
  return out;
}

Dataset generate(const SyntheticSpec& spec) {
  return spec.kind == SyntheticKind::spirals ? gen_spirals(spec) : gen_gaussians(spec);
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::optional<std::size_t> classes) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);

  const std::uint32_t img_magic = read_be32(img, 0, images);
  if (img_magic != kIdxImages) {
    throw FormatError(fmt::format("{}: bad magic 0x{:08x}, expected 0x{:08x}", images.string(),
                                  img_magic, kIdxImages));
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, labels);
  if (lab_magic != kIdxLabels) {
    throw FormatError(fmt::format("{}: bad magic 0x{:08x}, expected 0x{:08x}", labels.string(),
                                  lab_magic, kIdxLabels));
  }
  const std::size_t count = read_be32(img, 4, images);
  const std::size_t rows = read_be32(img, 8, images);
  const std::size_t cols = read_be32(img, 12, images);
  const std::size_t label_count = read_be32(lab, 4, labels);
  if (count != label_count) {
    throw FormatError(fmt::format("image count {} does not match label count {}", count,
                                  label_count));
  }
  const std::size_t d = rows * cols;
  if (img.size() != 16 + count * d) {
    throw FormatError(fmt::format("{}: payload is {} bytes, header promises {}", images.string(),
                                  img.size() - 16, count * d));
  }
  if (lab.size() != 8 + count) {
    throw FormatError(fmt::format("{}: payload is {} bytes, header promises {}", labels.string(),
                                  lab.size() - 8, count));
  }

  Dataset out;
  out.x = Tensor::matrix(count, d);
  for (std::size_t i = 0; i < count * d; ++i) out.x[i] = static_cast<double>(img[16 + i]) / 255.0;
  out.y.reserve(count);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < count; ++i) {
    out.y.push_back(lab[8 + i]);
    max_label = std::max(max_label, out.y.back());
  }
  out.classes = classes.value_or(max_label + 1);
  out.validate();
  return out;
}

void write_idx(const Dataset& data, std::size_t rows, std::size_t cols,
               const std::filesystem::path& images, const std::filesystem::path& labels) {
  if (data.x.cols() != rows * cols) {
    throw DimensionError(fmt::format("write_idx: {} features cannot form {}x{} images",
                                     data.x.cols(), rows, cols));
  }
  std::ofstream img(images, std::ios::binary);
  std::ofstream lab(labels, std::ios::binary);
  if (!img || !lab) throw FormatError("write_idx: cannot open output files");
  const auto n = static_cast<std::uint32_t>(data.size());
  write_be32(img, kIdxImages);
  write_be32(img, n);
  write_be32(img, static_cast<std::uint32_t>(rows));
  write_be32(img, static_cast<std::uint32_t>(cols));
  for (double v : data.x.data()) {
    const double scaled = std::round(v * 255.0);
    if (scaled < 0.0 || scaled > 255.0) throw DataError("write_idx: pixel outside [0, 1]");
    img.put(static_cast<char>(static_cast<unsigned char>(scaled)));
  }
  write_be32(lab, kIdxLabels);
  write_be32(lab, n);
  for (std::size_t label : data.y) {
    if (label > 255) throw DataError("write_idx: label does not fit in a byte");
    lab.put(static_cast<char>(static_cast<unsigned char>(label)));
  }
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  // Fisher-Yates with our own generator: std::shuffle is not portable.
  RngStream rng = RngStream::derive(seed, epoch);
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

NormStats fit_normalization(const Dataset& data) {
  const std::size_t n = data.x.rows(), d = data.x.cols();
  if (n < 2) throw DataError("normalization needs at least 2 samples");
  NormStats stats{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) stats.mean[c] += data.x.at(r, c);
  }
  for (double& m : stats.mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = data.x.at(r, c) - stats.mean[c];
      stats.stddev[c] += diff * diff;
    }
  }
  for (double& s : stats.stddev) s = std::max(std::sqrt(s / static_cast<double>(n)), kStdFloor);
  return stats;
}

Dataset apply_normalization(Dataset data, const NormStats& stats) {
  const std::size_t d = data.x.cols();
  if (stats.mean.size() != d) {
    throw DimensionError(fmt::format("normalization stats cover {} features, data has {}",
                                     stats.mean.size(), d));
  }
  for (std::size_t r = 0; r < data.x.rows(); ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      data.x.at(r, c) = (data.x.at(r, c) - stats.mean[c]) / stats.stddev[c];
    }
  }
  return data;
}

std::pair<Dataset, NormStats> normalize(const Dataset& data) {
  NormStats stats = fit_normalization(data);
  return {apply_normalization(data, stats), stats};
}

}  // namespace dfs
