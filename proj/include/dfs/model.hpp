#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dfs/autograd.hpp"
#include "dfs/tensor.hpp"

namespace dfs {

/// How exits share the backbone.
///  joint           every exit back-propagates into every earlier layer
///  dfs             partitioned features, referenced forward, routed backward
///  partition_only  partitioned features without cross-referencing
///  final_only      joint wiring, only the last exit is trained
enum class WiringMode { joint, dfs, partition_only, final_only };

std::string to_string(WiringMode mode);
WiringMode parse_wiring_mode(const std::string& name);

struct ModelConfig {
  std::size_t layers = 4;
  std::vector<std::size_t> widths{32, 32, 32, 32};
  std::size_t input_dim = 2;
  std::size_t classes = 3;
  double beta = 0.5;
  WiringMode mode = WiringMode::dfs;
  bool bias = true;
  // Lets loss i reach w_i+ through the head's reference to f_i+. Off keeps the
  // routing table exact; on is the ablation (and the gradcheck fault).
  bool head_shared_grad = false;
  std::uint64_t seed = 0;

  bool partitioned() const noexcept {
    return mode == WiringMode::dfs || mode == WiringMode::partition_only;
  }
  /// Throws ConfigError naming the first violated invariant.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ChannelSplit {
  std::size_t shared = 0;
  std::size_t specific = 0;
  friend bool operator==(const ChannelSplit&, const ChannelSplit&) = default;
};

/// shared = clamp(round_half_away(beta * channels), 1, channels - 1).
ChannelSplit partition_channels(std::size_t channels, double beta);

/// Mutable window onto a contiguous column range of a matrix.
class ColumnView {
 public:
  ColumnView(Tensor& base, std::size_t lo, std::size_t hi) : base_(&base), lo_(lo), hi_(hi) {}
  std::size_t rows() const { return base_->rows(); }
  std::size_t cols() const noexcept { return hi_ - lo_; }
  double& at(std::size_t r, std::size_t c) { return base_->at(r, lo_ + c); }
  double at(std::size_t r, std::size_t c) const { return base_->at(r, lo_ + c); }
  Tensor copy() const { return slice_cols(*base_, lo_, hi_); }

 private:
  Tensor* base_;
  std::size_t lo_, hi_;
};

struct LayerParams {
  Tensor w;                     // in_dim x out_dim
  std::size_t split = 0;        // w+ = columns [0, split), w- = [split, out_dim)
  std::optional<Tensor> bias;   // 1 x out_dim

  std::size_t in_dim() const { return w.rows(); }
  std::size_t out_dim() const { return w.cols(); }
  bool partitioned() const { return split < w.cols(); }
  ColumnView shared() { return {w, 0, split}; }
  ColumnView specific() { return {w, split, w.cols()}; }

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct ExitHead {
  Tensor w;                     // feat_dim x classes
  std::optional<Tensor> bias;   // 1 x classes

  std::size_t feat_dim() const { return w.rows(); }
  friend bool operator==(const ExitHead&, const ExitHead&) = default;
};

/// Named handle to one trainable tensor inside a Model.
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  bool decay = true;  // weights decay, biases do not
};

struct Model {
  ModelConfig config;
  std::vector<LayerParams> layers;
  std::vector<ExitHead> heads;

  /// Layer weights (and biases) first, then head weights (and biases), in depth order.
  std::vector<ParamRef> parameters();
  std::vector<std::pair<std::string, Shape>> parameter_shapes() const;

  friend bool operator==(const Model&, const Model&) = default;
};

bool bitwise_equal(const Model& a, const Model& b);

/// Allocates and initializes a model. Backbone weights are He-initialized;
/// head weights use the same draw scaled by 0.1 so initial logits are close to
/// uniform. Biases start at zero.
Model build(const ModelConfig& config, RngStream& rng);
Model build(const ModelConfig& config);

/// Empty model with the right shapes (all zeros). Used when loading checkpoints.
Model allocate(const ModelConfig& config);

struct ExitOutputs {
  std::vector<Var> logits;  // one per exit, depth order
  std::vector<Var> params;  // parallel to Model::parameters()

  std::vector<Tensor> values(const GradTape& tape) const;
};

/// Records one forward pass. Forward values do not depend on the wiring mode
/// for identical parameters and widths; only the gradient routing does.
ExitOutputs forward(const Model& model, const Tensor& x, GradTape& tape);

/// Parameter handles for the w+ / w- column blocks and the exit heads, used by
/// the routing and conflict analyses.
struct ParamBlock {
  std::string name;
  std::size_t param_index = 0;  // into Model::parameters()
  std::size_t lo = 0, hi = 0;   // column range inside that parameter
  enum class Role { shared, specific, full, head } role = Role::full;
  std::size_t layer = 0;        // 1-based
};

std::vector<ParamBlock> parameter_blocks(const Model& model);
Tensor block_of(const Tensor& grad, const ParamBlock& block);

struct RoutingReport {
  std::vector<std::string> checks;  // one line per verified clause
};

/// Seeds subsets of the exit losses and checks the structural zeros of the
/// gradient routing table. Throws RoutingViolation naming the layer and clause.
RoutingReport routing_check(const Model& model, const Tensor& x,
                            const std::vector<std::size_t>& labels);

}  // namespace dfs
