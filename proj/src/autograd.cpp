#include "dfs/autograd.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "dfs/errors.hpp"

namespace dfs {

namespace {

bool any_of(const std::vector<bool>& mask) {
  return std::find(mask.begin(), mask.end(), true) != mask.end();
}

std::vector<std::size_t> selected(const std::vector<bool>& mask, bool prune) {
  std::vector<std::size_t> idx;
  idx.reserve(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!prune || mask[i]) idx.push_back(i);
  }
  return idx;
}

std::size_t value_cols(const Tensor& t) { return t.rank() == 2 ? t.cols() : t.size(); }

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::relu: return "relu";
    case OpKind::add: return "add";
    case OpKind::add_bias: return "add_bias";
    case OpKind::softmax_ce: return "softmax_ce";
    case OpKind::sum: return "sum";
  }
  return "?";
}

GradTape GradTape::capturing() {
  GradTape tape;
  tape.capture_ = true;
  return tape;
}

GradTape GradTape::pinned(std::vector<Tensor> detached_values) {
  GradTape tape;
  tape.pin_ = true;
  tape.pins_ = std::move(detached_values);
  return tape;
}

void GradTape::check_id(NodeId id) const {
  if (id >= nodes_.size()) {
    throw GraphError(fmt::format("node {} is not on the tape (size {})", id, nodes_.size()));
  }
}

const Tensor& GradTape::edge_value(Var v) {
  check_id(v.id);
  const Tensor& live = nodes_[v.id].value;
  if (!v.detached) return live;
  if (pin_) {
    if (pin_cursor_ >= pins_.size()) {
      throw GraphError("pinned replay saw more detached edges than the baseline run");
    }
    const Tensor& pinned = pins_[pin_cursor_++];
    if (pinned.shape() != live.shape()) {
      throw GraphError(fmt::format("pinned value {} does not match edge value {}",
                                   shape_string(pinned.shape()), shape_string(live.shape())));
    }
    return pinned;
  }
  if (capture_) captured_.push_back(live);
  return live;
}

Var GradTape::push(TapeNode node) {
  node.id = nodes_.size();
  auto edge_mask = [&](const Edge& e) {
    const TapeNode& in = nodes_[e.node];
    return e.detached ? std::vector<bool>(in.grad_cols.size(), false) : in.grad_cols;
  };
  const std::size_t out_cols = value_cols(node.value);
  switch (node.kind) {
    case OpKind::leaf:
      node.grad_cols.assign(out_cols, node.requires_grad);
      break;
    case OpKind::matmul: {
      const bool any = any_of(edge_mask(node.inputs[0])) || any_of(edge_mask(node.inputs[1]));
      node.grad_cols.assign(out_cols, any);
      const Tensor& a = nodes_[node.inputs[0].node].value;
      node.forward_macs = 2ULL * a.rows() * a.cols() * node.value.cols();
      break;
    }
    case OpKind::concat_cols:
      for (const Edge& e : node.inputs) {
        const auto m = edge_mask(e);
        node.grad_cols.insert(node.grad_cols.end(), m.begin(), m.end());
      }
      break;
    case OpKind::slice_cols: {
      const auto m = edge_mask(node.inputs[0]);
      node.grad_cols.assign(m.begin() + static_cast<std::ptrdiff_t>(node.lo),
                            m.begin() + static_cast<std::ptrdiff_t>(node.hi));
      break;
    }
    case OpKind::relu:
      node.grad_cols = edge_mask(node.inputs[0]);
      break;
    case OpKind::add:
    case OpKind::add_bias: {
      auto m = edge_mask(node.inputs[0]);
      const auto other = edge_mask(node.inputs[1]);
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = m[i] || other[i];
      node.grad_cols = std::move(m);
      break;
    }
    case OpKind::softmax_ce:
    case OpKind::sum:
      node.grad_cols.assign(1, any_of(edge_mask(node.inputs[0])));
      break;
  }
  node.requires_grad = any_of(node.grad_cols);
  macs_.forward += node.forward_macs;
  nodes_.push_back(std::move(node));
  return Var{nodes_.back().id, false};
}

Var GradTape::parameter(Tensor value, std::string label) {
  TapeNode node;
  node.kind = OpKind::leaf;
  node.value = std::move(value);
  node.requires_grad = true;
  node.label = std::move(label);
  return push(std::move(node));
}

Var GradTape::constant(Tensor value, std::string label) {
  TapeNode node;
  node.kind = OpKind::leaf;
  node.value = std::move(value);
  node.requires_grad = false;
  node.label = std::move(label);
  return push(std::move(node));
}

NodeId GradTape::record(OpKind kind, std::span<const Var> inputs, Tensor value) {
  std::size_t arity = 0;
  switch (kind) {
    case OpKind::matmul:
    case OpKind::add:
    case OpKind::add_bias:
    case OpKind::concat_cols: arity = 2; break;
    case OpKind::relu:
    case OpKind::sum: arity = 1; break;
    default:
      throw ContractError(fmt::format("record: {} needs attributes; use its dedicated method",
                                      op_name(kind)));
  }
  if (inputs.size() != arity) {
    throw GraphError(fmt::format("record: {} takes {} inputs, got {}", op_name(kind), arity,
                                 inputs.size()));
  }
  TapeNode node;
  node.kind = kind;
  for (const Var& v : inputs) {
    check_id(v.id);
    node.inputs.push_back(Edge{v.id, v.detached});
  }
  node.value = std::move(value);
  if (kind == OpKind::matmul) {
    const Tensor& a = nodes_[inputs[0].id].value;
    const Tensor& b = nodes_[inputs[1].id].value;
    if (a.cols() != b.rows() || node.value.rows() != a.rows() || node.value.cols() != b.cols()) {
      throw DimensionError("record: matmul value shape inconsistent with inputs");
    }
  }
  return push(std::move(node)).id;
}

Var GradTape::matmul(Var a, Var b) {
  const Tensor& va = edge_value(a);
  Tensor v = dfs::matmul(va, edge_value(b));
  const Var in[] = {a, b};
  return Var{record(OpKind::matmul, in, std::move(v))};
}

Var GradTape::concat_cols(Var a, Var b) {
  const Tensor& va = edge_value(a);
  Tensor v = dfs::concat_cols(va, edge_value(b));
  const Var in[] = {a, b};
  return Var{record(OpKind::concat_cols, in, std::move(v))};
}

Var GradTape::slice_cols(Var t, std::size_t lo, std::size_t hi) {
  TapeNode node;
  node.kind = OpKind::slice_cols;
  node.value = dfs::slice_cols(edge_value(t), lo, hi);
  node.inputs = {Edge{t.id, t.detached}};
  node.lo = lo;
  node.hi = hi;
  return push(std::move(node));
}

Var GradTape::relu(Var t) {
  Tensor v = dfs::relu(edge_value(t));
  const Var in[] = {t};
  return Var{record(OpKind::relu, in, std::move(v))};
}

Var GradTape::add(Var a, Var b) {
  const Tensor& va = edge_value(a);
  Tensor v = dfs::add(va, edge_value(b));
  const Var in[] = {a, b};
  return Var{record(OpKind::add, in, std::move(v))};
}

Var GradTape::add_bias(Var t, Var bias) {
  const Tensor& vt = edge_value(t);
  Tensor v = dfs::add_row(vt, edge_value(bias));
  const Var in[] = {t, bias};
  return Var{record(OpKind::add_bias, in, std::move(v))};
}

Var GradTape::softmax_cross_entropy(Var logits, std::span<const std::size_t> targets) {
  const Tensor& z = edge_value(logits);
  const std::size_t m = z.rows(), k = z.cols();
  if (targets.size() != m) {
    throw DimensionError(fmt::format("cross entropy: {} targets for {} rows", targets.size(), m));
  }
  if (m == 0) throw DataError("cross entropy: empty batch");
  TapeNode node;
  node.kind = OpKind::softmax_ce;
  node.inputs = {Edge{logits.id, logits.detached}};
  node.targets.assign(targets.begin(), targets.end());
  node.probs = softmax_rows(z);
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] >= k) {
      throw DataError(fmt::format("cross entropy: label {} out of range [0, {})", targets[r], k));
    }
    // log-sum-exp form keeps large margins finite.
    const auto row = z.data().subspan(r * k, k);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double x : row) s += std::exp(x - mx);
    total += (mx + std::log(s)) - row[targets[r]];
  }
  node.value = Tensor::scalar(total / static_cast<double>(m));
  return push(std::move(node));
}

Var GradTape::sum(Var t) {
  const Tensor& v = edge_value(t);
  double s = 0.0;
  for (double x : v.data()) s += x;
  const Var in[] = {t};
  return Var{record(OpKind::sum, in, Tensor::scalar(s))};
}

Var GradTape::detach(Var v) const {
  check_id(v.id);
  return dfs::detach(v);
}

const Tensor& GradTape::value(Var v) const {
  check_id(v.id);
  return nodes_[v.id].value;
}

const TapeNode& GradTape::node(NodeId id) const {
  check_id(id);
  return nodes_[id];
}

GradMap GradTape::backward(std::span<const Var> losses, std::span<const Var> params,
                           BackwardOptions options) {
  if (pin_) throw ContractError("backward on a pinned replay tape is not supported");
  for (const Var& l : losses) {
    check_id(l.id);
    if (nodes_[l.id].value.size() != 1) {
      throw ContractError(fmt::format("loss node {} is not a scalar ({})", l.id,
                                      shape_string(nodes_[l.id].value.shape())));
    }
  }
  for (const Var& p : params) {
    if (p.id >= nodes_.size() || nodes_[p.id].kind != OpKind::leaf ||
        !nodes_[p.id].requires_grad) {
      throw GraphError(fmt::format("node {} is not a parameter on this tape", p.id));
    }
  }

  const std::size_t n = nodes_.size();
  std::vector<bool> live(n, false);
  for (const Var& l : losses) {
    if (!l.detached && nodes_[l.id].requires_grad) live[l.id] = true;
  }
  for (std::size_t id = n; id-- > 0;) {
    if (!live[id]) continue;
    for (const Edge& e : nodes_[id].inputs) {
      if (!e.detached && nodes_[e.node].requires_grad) live[e.node] = true;
    }
  }

  std::vector<Tensor> grads(n);
  std::vector<bool> has(n, false);
  stats_ = BackwardStats{};
  stats_.live_nodes = static_cast<std::size_t>(std::count(live.begin(), live.end(), true));
  auto slot = [&](NodeId id) -> Tensor& {
    if (!has[id]) {
      grads[id] = Tensor(nodes_[id].value.shape());
      has[id] = true;
      ++stats_.allocated_grads;
    }
    return grads[id];
  };
  auto edge_live = [&](const Edge& e) { return !e.detached && live[e.node]; };

  for (const Var& l : losses) {
    if (live[l.id]) slot(l.id)[0] += 1.0;
  }

  for (std::size_t id = n; id-- > 0;) {
    if (!live[id] || !has[id]) continue;
    TapeNode& node = nodes_[id];
    const Tensor& g = grads[id];
    switch (node.kind) {
      case OpKind::leaf:
        break;
      case OpKind::matmul: {
        const Edge ea = node.inputs[0], eb = node.inputs[1];
        const Tensor& a = nodes_[ea.node].value;
        const Tensor& b = nodes_[eb.node].value;
        const std::size_t m = a.rows(), k = a.cols(), nc = b.cols();
        std::uint64_t cost = 0;
        if (edge_live(ea)) {
          // dA[:, j] = dC . B[j, :]^T for the columns of A that matter.
          const auto cols = selected(nodes_[ea.node].grad_cols, options.prune);
          Tensor& da = slot(ea.node);
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = &g.data()[i * nc];
            for (std::size_t j : cols) {
              const double* brow = &b.data()[j * nc];
              double s = 0.0;
              for (std::size_t c = 0; c < nc; ++c) s += grow[c] * brow[c];
              da.at(i, j) += s;
            }
          }
          cost += 2ULL * m * nc * cols.size();
        }
        if (edge_live(eb)) {
          // dB[:, j] = A^T . dC[:, j] for the columns of B that matter.
          const auto cols = selected(nodes_[eb.node].grad_cols, options.prune);
          Tensor& db = slot(eb.node);
          for (std::size_t i = 0; i < m; ++i) {
            const double* arow = &a.data()[i * k];
            const double* grow = &g.data()[i * nc];
            for (std::size_t r = 0; r < k; ++r) {
              const double av = arow[r];
              double* drow = &db.data()[r * nc];
              for (std::size_t j : cols) drow[j] += av * grow[j];
            }
          }
          cost += 2ULL * k * m * cols.size();
        }
        node.backward_macs += cost;
        macs_.backward += cost;
        break;
      }
      case OpKind::concat_cols: {
        const std::size_t rows = g.rows(), width = g.cols();
        std::size_t offset = 0;
        for (const Edge& e : node.inputs) {
          const std::size_t w = nodes_[e.node].value.cols();
          if (edge_live(e)) {
            Tensor& d = slot(e.node);
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < w; ++c) d.at(r, c) += g[r * width + offset + c];
            }
          }
          offset += w;
        }
        break;
      }
      case OpKind::slice_cols: {
        const Edge e = node.inputs[0];
        if (!edge_live(e)) break;
        Tensor& d = slot(e.node);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < g.cols(); ++c) d.at(r, node.lo + c) += g.at(r, c);
        }
        break;
      }
      case OpKind::relu: {
        const Edge e = node.inputs[0];
        if (!edge_live(e)) break;
        Tensor& d = slot(e.node);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (node.value[i] > 0.0) d[i] += g[i];
        }
        break;
      }
      case OpKind::add:
        for (const Edge& e : node.inputs) {
          if (!edge_live(e)) continue;
          Tensor& d = slot(e.node);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        break;
      case OpKind::add_bias: {
        const Edge et = node.inputs[0], eb = node.inputs[1];
        if (edge_live(et)) {
          Tensor& d = slot(et.node);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        if (edge_live(eb)) {
          Tensor& d = slot(eb.node);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < g.cols(); ++c) d[c] += g.at(r, c);
          }
        }
        break;
      }
      case OpKind::softmax_ce: {
        const Edge e = node.inputs[0];
        if (!edge_live(e)) break;
        Tensor& d = slot(e.node);
        const std::size_t m = node.probs.rows(), k = node.probs.cols();
        const double scale = g.item() / static_cast<double>(m);
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t c = 0; c < k; ++c) {
            const double onehot = c == node.targets[r] ? 1.0 : 0.0;
            d.at(r, c) += scale * (node.probs.at(r, c) - onehot);
          }
        }
        break;
      }
      case OpKind::sum: {
        const Edge e = node.inputs[0];
        if (!edge_live(e)) break;
        Tensor& d = slot(e.node);
        const double s = g.item();
        for (double& v : d.data()) v += s;
        break;
      }
    }
  }

  GradMap out;
  for (const Var& p : params) {
    out.insert_or_assign(p.id, has[p.id] ? grads[p.id] : Tensor(nodes_[p.id].value.shape()));
  }
  return out;
}

MacCounts macs(const GradTape& tape) { return tape.macs(); }

Tensor detach_aware_fd_gradient(const LossFn& forward, Tensor& param, double step) {
  GradTape baseline = GradTape::capturing();
  forward(baseline);
  const std::vector<Tensor> pins = baseline.captured_detached();

  auto evaluate = [&] {
    GradTape replay = GradTape::pinned(pins);
    double total = 0.0;
    for (const Var& l : forward(replay)) total += replay.value(l).item();
    return total;
  };

  Tensor grad(param.shape());
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double saved = param[i];
    param[i] = saved + step;
    const double plus = evaluate();
    param[i] = saved - step;
    const double minus = evaluate();
    param[i] = saved;
    grad[i] = (plus - minus) / (2.0 * step);
  }
  return grad;
}

double max_relative_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(fmt::format("max_relative_error: shapes differ ({} vs {})",
                                     shape_string(a.shape()), shape_string(b.shape())));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(1.0, std::abs(b[i])));
  }
  return worst;
}

}  // namespace dfs
