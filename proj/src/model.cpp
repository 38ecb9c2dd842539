#include "dfs/model.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "dfs/errors.hpp"

namespace dfs {

namespace {

constexpr double kHeadInitGain = 0.1;

bool all_zero(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return v == 0.0; });
}

std::size_t layer_in_dim(const ModelConfig& c, const std::vector<ChannelSplit>& splits,
                         std::size_t i) {
  if (i == 0) return c.input_dim;
  if (c.mode == WiringMode::partition_only) return splits[i - 1].shared;
  return c.widths[i - 1];
}

std::vector<ChannelSplit> layer_splits(const ModelConfig& c) {
  std::vector<ChannelSplit> splits;
  for (std::size_t i = 0; i < c.layers; ++i) {
    if (c.partitioned() && i + 1 < c.layers) {
      splits.push_back(partition_channels(c.widths[i], c.beta));
    } else {
      splits.push_back(ChannelSplit{c.widths[i], 0});
    }
  }
  return splits;
}

}  // namespace

std::string to_string(WiringMode mode) {
  switch (mode) {
    case WiringMode::joint: return "joint";
    case WiringMode::dfs: return "dfs";
    case WiringMode::partition_only: return "partition_only";
    case WiringMode::final_only: return "final_only";
  }
  return "?";
}

WiringMode parse_wiring_mode(const std::string& name) {
  if (name == "joint") return WiringMode::joint;
  if (name == "dfs") return WiringMode::dfs;
  if (name == "partition_only") return WiringMode::partition_only;
  if (name == "final_only") return WiringMode::final_only;
  throw ConfigError(fmt::format(
      "unknown mode '{}' (expected joint, dfs, partition_only or final_only)", name));
}

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("layers must be >= 1");
  if (widths.size() != layers) {
    throw ConfigError(fmt::format("widths has {} entries for {} layers", widths.size(), layers));
  }
  if (input_dim == 0) throw ConfigError("input_dim must be positive");
  if (classes < 2) throw ConfigError(fmt::format("classes must be >= 2, got {}", classes));
  if (!(beta > 0.0 && beta < 1.0)) {
    throw ConfigError(fmt::format("beta must lie strictly inside (0, 1), got {}", beta));
  }
  for (std::size_t i = 0; i < layers; ++i) {
    if (widths[i] == 0) throw ConfigError(fmt::format("width of layer {} is zero", i + 1));
    if (partitioned() && i + 1 < layers && widths[i] < 2) {
      throw ConfigError(fmt::format(
          "layer {} has width {}; a partitioned layer needs >= 1 unit on each side", i + 1,
          widths[i]));
    }
  }
}

ChannelSplit partition_channels(std::size_t channels, double beta) {
  if (channels < 2) {
    throw ConfigError(fmt::format("cannot partition {} channel(s)", channels));
  }
  // std::round rounds halves away from zero.
  const double r = std::round(beta * static_cast<double>(channels));
  const auto shared = static_cast<std::size_t>(
      std::clamp(r, 1.0, static_cast<double>(channels - 1)));
  return {shared, channels - shared};
}

std::vector<ParamRef> Model::parameters() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.push_back({fmt::format("layer{}.w", i + 1), &layers[i].w, true});
    if (layers[i].bias) out.push_back({fmt::format("layer{}.b", i + 1), &*layers[i].bias, false});
  }
  for (std::size_t i = 0; i < heads.size(); ++i) {
    out.push_back({fmt::format("head{}.w", i + 1), &heads[i].w, true});
    if (heads[i].bias) out.push_back({fmt::format("head{}.b", i + 1), &*heads[i].bias, false});
  }
  return out;
}

std::vector<std::pair<std::string, Shape>> Model::parameter_shapes() const {
  std::vector<std::pair<std::string, Shape>> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.emplace_back(fmt::format("layer{}.w", i + 1), layers[i].w.shape());
    if (layers[i].bias) out.emplace_back(fmt::format("layer{}.b", i + 1), layers[i].bias->shape());
  }
  for (std::size_t i = 0; i < heads.size(); ++i) {
    out.emplace_back(fmt::format("head{}.w", i + 1), heads[i].w.shape());
    if (heads[i].bias) out.emplace_back(fmt::format("head{}.b", i + 1), heads[i].bias->shape());
  }
  return out;
}

bool bitwise_equal(const Model& a, const Model& b) {
  if (!(a.config == b.config) || a.layers.size() != b.layers.size() ||
      a.heads.size() != b.heads.size()) {
    return false;
  }
  auto opt_eq = [](const std::optional<Tensor>& x, const std::optional<Tensor>& y) {
    return x.has_value() == y.has_value() && (!x || x->bitwise_equal(*y));
  };
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (!a.layers[i].w.bitwise_equal(b.layers[i].w) || a.layers[i].split != b.layers[i].split ||
        !opt_eq(a.layers[i].bias, b.layers[i].bias)) {
      return false;
    }
  }
  for (std::size_t i = 0; i < a.heads.size(); ++i) {
    if (!a.heads[i].w.bitwise_equal(b.heads[i].w) || !opt_eq(a.heads[i].bias, b.heads[i].bias)) {
      return false;
    }
  }
  return true;
}

Model allocate(const ModelConfig& config) {
  config.validate();
  Model model;
  model.config = config;
  const auto splits = layer_splits(config);
  for (std::size_t i = 0; i < config.layers; ++i) {
    LayerParams layer;
    layer.w = Tensor::matrix(layer_in_dim(config, splits, i), config.widths[i]);
    layer.split = splits[i].shared;
    if (config.bias) layer.bias = Tensor::matrix(1, config.widths[i]);
    model.layers.push_back(std::move(layer));

    const bool last = i + 1 == config.layers;
    const std::size_t feat = config.mode == WiringMode::partition_only && !last
                                 ? splits[i].specific
                                 : config.widths[i];
    ExitHead head;
    head.w = Tensor::matrix(feat, config.classes);
    if (config.bias) head.bias = Tensor::matrix(1, config.classes);
    model.heads.push_back(std::move(head));
  }
  return model;
}

Model build(const ModelConfig& config, RngStream& rng) {
  Model model = allocate(config);
  for (auto& layer : model.layers) layer.w = he_init(layer.w.rows(), layer.w.cols(), rng);
  for (auto& head : model.heads) {
    head.w = he_init(head.w.rows(), head.w.cols(), rng);
    for (double& v : head.w.data()) v *= kHeadInitGain;
  }
  return model;
}

Model build(const ModelConfig& config) {
  RngStream rng(config.seed);
  return build(config, rng);
}

std::vector<Tensor> ExitOutputs::values(const GradTape& tape) const {
  std::vector<Tensor> out;
  out.reserve(logits.size());
  for (const Var& v : logits) out.push_back(tape.value(v));
  return out;
}

ExitOutputs forward(const Model& model, const Tensor& x, GradTape& tape) {
  const ModelConfig& cfg = model.config;
  if (x.rank() != 2 || x.cols() != cfg.input_dim) {
    throw DimensionError(fmt::format("forward: input {} does not match input_dim {}",
                                     shape_string(x.shape()), cfg.input_dim));
  }
  const std::size_t L = cfg.layers;
  ExitOutputs out;

  struct Bound {
    Var w;
    std::optional<Var> b;
  };
  std::vector<Bound> layer_vars, head_vars;
  for (std::size_t i = 0; i < L; ++i) {
    const auto& p = model.layers[i];
    Bound bound{tape.parameter(p.w, fmt::format("layer{}.w", i + 1)), std::nullopt};
    out.params.push_back(bound.w);
    if (p.bias) {
      bound.b = tape.parameter(*p.bias, fmt::format("layer{}.b", i + 1));
      out.params.push_back(*bound.b);
    }
    layer_vars.push_back(bound);
  }
  for (std::size_t i = 0; i < L; ++i) {
    const auto& h = model.heads[i];
    Bound bound{tape.parameter(h.w, fmt::format("head{}.w", i + 1)), std::nullopt};
    out.params.push_back(bound.w);
    if (h.bias) {
      bound.b = tape.parameter(*h.bias, fmt::format("head{}.b", i + 1));
      out.params.push_back(*bound.b);
    }
    head_vars.push_back(bound);
  }

  // input . w[:, lo:hi] (+ b[lo:hi]); the full range skips the slice nodes.
  auto affine = [&](Var input, const Bound& p, std::size_t lo, std::size_t hi,
                    std::size_t width) {
    const bool whole = lo == 0 && hi == width;
    Var w = whole ? p.w : tape.slice_cols(p.w, lo, hi);
    Var z = tape.matmul(input, w);
    if (p.b) z = tape.add_bias(z, whole ? *p.b : tape.slice_cols(*p.b, lo, hi));
    return z;
  };
  auto head = [&](Var feat, std::size_t i) {
    Var z = tape.matmul(feat, head_vars[i].w);
    if (head_vars[i].b) z = tape.add_bias(z, *head_vars[i].b);
    return z;
  };

  const Var input = tape.constant(x, "x");
  switch (cfg.mode) {
    case WiringMode::joint:
    case WiringMode::final_only: {
      Var f = input;
      for (std::size_t i = 0; i < L; ++i) {
        const std::size_t width = model.layers[i].out_dim();
        f = tape.relu(affine(f, layer_vars[i], 0, width, width));
        out.logits.push_back(head(f, i));
      }
      break;
    }
    case WiringMode::dfs: {
      // Forward references both partitions everywhere; backward keeps only the
      // edges f_i+ -> f_{i+1}, f_i- -> head_i and f_L -> head_L.
      Var in = input;
      for (std::size_t i = 0; i < L; ++i) {
        const auto& p = model.layers[i];
        const std::size_t width = p.out_dim();
        if (i + 1 == L) {
          Var f = tape.relu(affine(in, layer_vars[i], 0, width, width));
          out.logits.push_back(head(f, i));
          break;
        }
        Var shared = tape.relu(affine(in, layer_vars[i], 0, p.split, width));
        Var specific = tape.relu(affine(in, layer_vars[i], p.split, width, width));
        Var head_in =
            tape.concat_cols(cfg.head_shared_grad ? shared : detach(shared), specific);
        out.logits.push_back(head(head_in, i));
        in = tape.concat_cols(shared, detach(specific));
      }
      break;
    }
    case WiringMode::partition_only: {
      Var in = input;
      for (std::size_t i = 0; i < L; ++i) {
        const auto& p = model.layers[i];
        const std::size_t width = p.out_dim();
        if (i + 1 == L) {
          Var f = tape.relu(affine(in, layer_vars[i], 0, width, width));
          out.logits.push_back(head(f, i));
          break;
        }
        Var shared = tape.relu(affine(in, layer_vars[i], 0, p.split, width));
        Var specific = tape.relu(affine(in, layer_vars[i], p.split, width, width));
        out.logits.push_back(head(specific, i));
        in = shared;
      }
      break;
    }
  }
  return out;
}

std::vector<ParamBlock> parameter_blocks(const Model& model) {
  std::vector<ParamBlock> out;
  std::size_t index = 0;
  const bool split_blocks = model.config.partitioned();
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& p = model.layers[i];
    if (split_blocks && p.partitioned()) {
      out.push_back({fmt::format("w{}+", i + 1), index, 0, p.split, ParamBlock::Role::shared, i + 1});
      out.push_back({fmt::format("w{}-", i + 1), index, p.split, p.out_dim(),
                     ParamBlock::Role::specific, i + 1});
    } else {
      out.push_back({fmt::format("w{}", i + 1), index, 0, p.out_dim(), ParamBlock::Role::full, i + 1});
    }
    index += p.bias ? 2 : 1;
  }
  for (std::size_t i = 0; i < model.heads.size(); ++i) {
    const auto& h = model.heads[i];
    out.push_back({fmt::format("wc{}", i + 1), index, 0, h.w.cols(), ParamBlock::Role::head, i + 1});
    index += h.bias ? 2 : 1;
  }
  return out;
}

Tensor block_of(const Tensor& grad, const ParamBlock& block) {
  return slice_cols(grad, block.lo, block.hi);
}

RoutingReport routing_check(const Model& model, const Tensor& x,
                            const std::vector<std::size_t>& labels) {
  GradTape tape;
  const ExitOutputs out = forward(model, x, tape);
  const std::size_t L = model.config.layers;
  std::vector<Var> losses;
  for (const Var& z : out.logits) losses.push_back(tape.softmax_cross_entropy(z, labels));

  const auto blocks = parameter_blocks(model);
  auto probe = [&](const std::vector<std::size_t>& exits) {
    std::vector<Var> seeded;
    for (std::size_t e : exits) seeded.push_back(losses[e - 1]);
    return tape.backward(seeded, out.params);
  };
  auto grad_block = [&](const GradMap& g, const ParamBlock& b) {
    return block_of(g.at(out.params[b.param_index].id), b);
  };
  auto find = [&](ParamBlock::Role role, std::size_t layer) -> const ParamBlock& {
    for (const auto& b : blocks) {
      if (b.role == role && b.layer == layer) return b;
    }
    throw GraphError(fmt::format("no parameter block for layer {}", layer));
  };

  RoutingReport report;
  auto fail = [](std::size_t layer, const std::string& clause) {
    throw RoutingViolation(fmt::format("routing violation at layer {}: {}", layer, clause));
  };

  if (model.config.partitioned()) {
    for (std::size_t i = 1; i < L; ++i) {
      const GradMap own = probe({i});
      if (!all_zero(grad_block(own, find(ParamBlock::Role::shared, i)))) {
        fail(i, fmt::format("(a) g_w{}+ must be exactly zero under loss {} alone", i, i));
      }
      report.checks.push_back(fmt::format("layer {} (a): loss {} alone -> w+ zero", i, i));

      std::vector<std::size_t> deeper;
      for (std::size_t k = i + 1; k <= L; ++k) deeper.push_back(k);
      const GradMap later = probe(deeper);
      if (!all_zero(grad_block(later, find(ParamBlock::Role::specific, i)))) {
        fail(i, fmt::format("(b) g_w{}- must be exactly zero under losses {}..{}", i, i + 1, L));
      }
      report.checks.push_back(fmt::format("layer {} (b): losses {}..{} -> w- zero", i, i + 1, L));
    }
  }

  for (std::size_t i = 1; i <= L; ++i) {
    const ParamBlock& hb = find(ParamBlock::Role::head, i);
    std::vector<std::size_t> others;
    for (std::size_t k = 1; k <= L; ++k) {
      if (k != i) others.push_back(k);
    }
    if (!all_zero(grad_block(probe(others), hb))) {
      fail(i, fmt::format("(c) g_wc{} must be exactly zero unless loss {} is seeded", i, i));
    }
    report.checks.push_back(fmt::format("head {} (c): gradient only from loss {}", i, i));
  }
  return report;
}

}  // namespace dfs
