#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dfs/tensor.hpp"

namespace dfs {

using NodeId = std::size_t;

/// Handle to a tape node as seen by one consumer. A detached handle forwards
/// the node's value but carries no gradient back through the consuming edge.
struct Var {
  NodeId id = 0;
  bool detached = false;
};

inline Var detach(Var v) {
  v.detached = true;
  return v;
}

enum class OpKind {
  leaf,
  matmul,
  concat_cols,
  slice_cols,
  relu,
  add,
  add_bias,
  softmax_ce,
  sum,
};

const char* op_name(OpKind kind);

struct Edge {
  NodeId node = 0;
  bool detached = false;
};

struct TapeNode {
  NodeId id = 0;
  OpKind kind = OpKind::leaf;
  std::vector<Edge> inputs;
  Tensor value;
  bool requires_grad = false;
  // Per output column: does it depend on a trainable leaf through live edges?
  // Scalars have a single entry.
  std::vector<bool> grad_cols;
  std::string label;

  // Op attributes.
  std::size_t lo = 0, hi = 0;  // slice_cols
  std::vector<std::size_t> targets;  // softmax_ce
  Tensor probs;                      // softmax_ce cache

  std::uint64_t forward_macs = 0;
  std::uint64_t backward_macs = 0;
};

struct MacCounts {
  std::uint64_t forward = 0;
  std::uint64_t backward = 0;
  std::uint64_t total() const noexcept { return forward + backward; }
  friend bool operator==(const MacCounts&, const MacCounts&) = default;
};

/// Gradients keyed by parameter node id.
using GradMap = std::map<NodeId, Tensor>;

struct BackwardOptions {
  // Restrict matmul operand gradients to the columns that can reach a
  // trainable leaf. Turning this off changes only the MAC count.
  bool prune = true;
};

struct BackwardStats {
  std::size_t live_nodes = 0;
  std::size_t allocated_grads = 0;
};

/// Recorded forward graph with reverse-mode differentiation.
///
/// Nodes are appended in topological order. Matmul costs 2*m*k*n operations
/// in the forward pass and the same per operand-gradient block it computes in
/// the backward pass; every other op is free.
///
/// For the finite-difference oracle the tape can capture the value crossing
/// each detached edge, and a later tape can be built that substitutes those
/// captured values in the same order.
class GradTape {
 public:
  GradTape() = default;
  static GradTape capturing();
  static GradTape pinned(std::vector<Tensor> detached_values);

  Var parameter(Tensor value, std::string label = {});
  Var constant(Tensor value, std::string label = {});

  NodeId record(OpKind kind, std::span<const Var> inputs, Tensor value);

  Var matmul(Var a, Var b);
  Var concat_cols(Var a, Var b);
  Var slice_cols(Var t, std::size_t lo, std::size_t hi);
  Var relu(Var t);
  Var add(Var a, Var b);
  Var add_bias(Var t, Var bias);
  /// Mean over rows of -log softmax(logits)[target]; a 1 x 1 node.
  Var softmax_cross_entropy(Var logits, std::span<const std::size_t> targets);
  Var sum(Var t);

  /// Checked detach: same as dfs::detach but validates the id.
  Var detach(Var v) const;

  const Tensor& value(Var v) const;
  const TapeNode& node(NodeId id) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  std::span<const TapeNode> nodes() const noexcept { return nodes_; }

  /// Sum over `losses` (each seeded with 1) of d loss / d param, for every
  /// listed parameter. Parameters with no live path get an all-zero tensor.
  GradMap backward(std::span<const Var> losses, std::span<const Var> params,
                   BackwardOptions options = {});

  MacCounts macs() const noexcept { return macs_; }
  const BackwardStats& last_backward() const noexcept { return stats_; }
  const std::vector<Tensor>& captured_detached() const noexcept { return captured_; }

 private:
  void check_id(NodeId id) const;
  const Tensor& edge_value(Var v);
  Var push(TapeNode node);

  std::vector<TapeNode> nodes_;
  MacCounts macs_;
  BackwardStats stats_;

  bool capture_ = false;
  bool pin_ = false;
  std::vector<Tensor> pins_;
  std::size_t pin_cursor_ = 0;
  std::vector<Tensor> captured_;
};

MacCounts macs(const GradTape& tape);

/// Forward pass that records onto `tape` and returns the loss nodes whose sum
/// is differentiated. It must read the parameter storage passed to the oracle.
using LossFn = std::function<std::vector<Var>(GradTape& tape)>;

/// Central finite difference of the summed losses with respect to `param`,
/// where every detached edge is held at its value from an unperturbed baseline
/// run. This matches reverse-mode gradients up to O(step^2).
Tensor detach_aware_fd_gradient(const LossFn& forward, Tensor& param, double step = 1e-5);

/// max_i |a_i - b_i| / max(1, |b_i|)
double max_relative_error(const Tensor& a, const Tensor& b);

}  // namespace dfs
