#include "dfs/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "dfs/errors.hpp"

namespace dfs {

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'F', 'S', 'C', 'K', 'P', 'T', '1'};
constexpr std::size_t kEvalChunk = 1024;

double mean_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t m = logits.rows(), k = logits.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    const auto row = logits.data().subspan(r * k, k);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    total += mx + std::log(s) - row[labels[r]];
  }
  return total / static_cast<double>(m);
}

std::size_t argmax_row(const Tensor& t, std::size_t r) {
  const std::size_t k = t.cols();
  const auto row = t.data().subspan(r * k, k);
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

double top1_of(const Tensor& scores, std::span<const std::size_t> labels) {
  std::size_t hits = 0;
  for (std::size_t r = 0; r < scores.rows(); ++r) hits += argmax_row(scores, r) == labels[r];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

Tensor mean_of(std::span<const Tensor> ts) {
  Tensor out(ts.front().shape());
  for (const Tensor& t : ts) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += t[i];
  }
  for (double& v : out.data()) v /= static_cast<double>(ts.size());
  return out;
}

void put_le32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_le64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(const std::string& buf, std::size_t offset, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= std::uint64_t{static_cast<unsigned char>(buf[offset + static_cast<std::size_t>(i)])}
         << (8 * i);
  }
  return v;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError(fmt::format("lr must be > 0, got {}", lr0));
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError(fmt::format("momentum must lie in [0, 1), got {}", momentum));
  }
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
  double prev = 0.0;
  for (double d : drop_points) {
    if (!(d > prev && d < 1.0)) {
      throw ConfigError("drop_points must be strictly increasing fractions inside (0, 1)");
    }
    prev = d;
  }
}

OptimizerState OptimizerState::zeros_like(std::span<const ParamRef> params) {
  OptimizerState state;
  for (const auto& p : params) state.velocity.emplace_back(p.value->shape());
  return state;
}

std::string MetricsRow::exit_label() const {
  return exit_id == kEnsembleExit ? std::string("ensemble") : std::to_string(exit_id);
}

Var cross_entropy(GradTape& tape, Var logits, std::span<const std::size_t> labels) {
  return tape.softmax_cross_entropy(logits, labels);
}

std::vector<Var> exit_losses(GradTape& tape, const ExitOutputs& outputs,
                             std::span<const std::size_t> labels) {
  std::vector<Var> out;
  for (const Var& z : outputs.logits) out.push_back(cross_entropy(tape, z, labels));
  return out;
}

std::vector<Var> total_loss(WiringMode mode, std::span<const Var> exit_losses) {
  if (exit_losses.empty()) return {};
  if (mode == WiringMode::final_only) return {exit_losses.back()};
  return {exit_losses.begin(), exit_losses.end()};
}

void sgd_step(std::span<const ParamRef> params, std::span<const Tensor> grads,
              OptimizerState& state, double lr, double momentum, double weight_decay) {
  if (grads.size() != params.size() || state.velocity.size() != params.size()) {
    throw ContractError(fmt::format("sgd_step: {} params, {} grads, {} velocities", params.size(),
                                    grads.size(), state.velocity.size()));
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& w = *params[p].value;
    const Tensor& g = grads[p];
    Tensor& v = state.velocity[p];
    if (g.shape() != w.shape() || v.shape() != w.shape()) {
      throw ContractError(fmt::format("sgd_step: shape mismatch for {}", params[p].name));
    }
    const double wd = params[p].decay ? weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] + (g[i] + wd * w[i]);
      w[i] -= lr * v[i];
    }
  }
}

double lr_at(std::size_t step, const TrainConfig& config) {
  double lr = config.lr0;
  const auto s = static_cast<double>(step);
  for (double frac : config.drop_points) {
    if (s >= frac * static_cast<double>(config.total_steps)) lr *= 0.1;
  }
  return lr;
}

std::vector<std::size_t> ensemble_predictions(std::span<const Tensor> exit_scores) {
  if (exit_scores.empty()) throw ContractError("ensemble of zero exits");
  const Tensor mean = mean_of(exit_scores);
  std::vector<std::size_t> out(mean.rows());
  for (std::size_t r = 0; r < mean.rows(); ++r) out[r] = argmax_row(mean, r);
  return out;
}

std::vector<Tensor> predict(const Model& model, const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols(), L = model.config.layers;
  std::vector<Tensor> out(L, Tensor::matrix(n, model.config.classes));
  for (std::size_t start = 0; start < n; start += kEvalChunk) {
    const std::size_t end = std::min(n, start + kEvalChunk);
    Tensor chunk({end - start, d},
                 std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(start * d),
                                     x.data().begin() + static_cast<std::ptrdiff_t>(end * d)));
    GradTape tape;
    const auto logits = forward(model, chunk, tape).values(tape);
    for (std::size_t e = 0; e < L; ++e) {
      std::copy(logits[e].data().begin(), logits[e].data().end(),
                out[e].data().begin() + static_cast<std::ptrdiff_t>(start * model.config.classes));
    }
  }
  return out;
}

EvalResult evaluate(const Model& model, const Dataset& data, bool ensemble_probabilities) {
  if (data.size() == 0) throw DataError(fmt::format("cannot evaluate on empty split '{}'", data.split));
  const auto logits = predict(model, data.x);
  EvalResult result;
  for (const Tensor& z : logits) {
    result.exit_top1.push_back(top1_of(z, data.y));
    result.exit_loss.push_back(mean_cross_entropy(z, data.y));
  }
  if (ensemble_probabilities) {
    std::vector<Tensor> probs;
    for (const Tensor& z : logits) probs.push_back(softmax_rows(z));
    const Tensor mean = mean_of(probs);
    result.ensemble_top1 = top1_of(mean, data.y);
    double total = 0.0;
    for (std::size_t r = 0; r < mean.rows(); ++r) total -= std::log(mean.at(r, data.y[r]));
    result.ensemble_loss = total / static_cast<double>(mean.rows());
  } else {
    const Tensor mean = mean_of(logits);
    result.ensemble_top1 = top1_of(mean, data.y);
    result.ensemble_loss = mean_cross_entropy(mean, data.y);
  }
  return result;
}

TrainResult train_loop(Model model, const Dataset& train, const TrainConfig& config,
                       std::span<const Dataset* const> eval_sets) {
  config.validate();
  train.validate();
  if (train.dim() != model.config.input_dim) {
    throw DimensionError(fmt::format("dataset has {} features, model expects {}", train.dim(),
                                     model.config.input_dim));
  }
  TrainResult result;
  auto params = model.parameters();
  OptimizerState state = OptimizerState::zeros_like(params);

  auto emit = [&](std::size_t step) {
    auto record = [&](const Dataset& data, const std::string& split) {
      const EvalResult ev = evaluate(model, data, config.ensemble_probabilities);
      for (std::size_t e = 0; e < ev.exit_top1.size(); ++e) {
        result.history.push_back({step, split, e + 1, ev.exit_loss[e], ev.exit_top1[e]});
      }
      result.history.push_back({step, split, kEnsembleExit, ev.ensemble_loss, ev.ensemble_top1});
    };
    record(train, "train");
    for (const Dataset* d : eval_sets) record(*d, d->split);
  };

  emit(0);
  std::size_t step = 0;
  for (std::uint64_t epoch = 0; step < config.total_steps; ++epoch) {
    for (const auto& rows : batches(train.size(), config.batch_size, config.seed, epoch)) {
      if (step == config.total_steps) break;
      const Dataset batch = train.subset(rows);
      GradTape tape;
      const ExitOutputs out = forward(model, batch.x, tape);
      const auto losses = exit_losses(tape, out, batch.y);
      const auto seeded = total_loss(model.config.mode, losses);
      double objective = 0.0;
      for (const Var& l : seeded) objective += tape.value(l).item();
      if (!std::isfinite(objective)) {
        throw DivergenceError(step, fmt::format("non-finite loss at step {}", step));
      }
      const GradMap grads = tape.backward(seeded, out.params);
      std::vector<Tensor> ordered;
      ordered.reserve(out.params.size());
      for (const Var& p : out.params) ordered.push_back(grads.at(p.id));
      sgd_step(params, ordered, state, lr_at(step, config), config.momentum, config.weight_decay);
      ++step;
      if (step % config.eval_every == 0 || step == config.total_steps) {
        emit(step);
        spdlog::debug("step {} loss {:.6f}", step, objective);
      }
    }
  }
  result.model = std::move(model);
  return result;
}

void write_metrics_csv(std::span<const MetricsRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(fmt::format("cannot write {}", path.string()));
  out << "step,split,exit_id,loss,top1\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{},{},{:.17g},{:.17g}\n", r.step, r.split, r.exit_label(), r.loss, r.top1);
  }
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(fmt::format("cannot read {}", path.string()));
  std::string line;
  std::getline(in, line);
  if (line != "step,split,exit_id,loss,top1") throw FormatError("metrics.csv: unexpected header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string step, split, exit_id, loss, top1;
    std::getline(ss, step, ',');
    std::getline(ss, split, ',');
    std::getline(ss, exit_id, ',');
    std::getline(ss, loss, ',');
    std::getline(ss, top1, ',');
    try {
      rows.push_back({std::stoull(step), split,
                      exit_id == "ensemble" ? kEnsembleExit : std::stoull(exit_id),
                      std::stod(loss), std::stod(top1)});
    } catch (const std::exception&) {
      throw FormatError(fmt::format("metrics.csv: bad row '{}'", line));
    }
  }
  return rows;
}

nlohmann::json metrics_summary(std::span<const MetricsRow> rows) {
  nlohmann::json summary = nlohmann::json::object();
  if (rows.empty()) return summary;
  const std::size_t last = rows.back().step;
  summary["final_step"] = last;
  nlohmann::json final_block = nlohmann::json::object();
  for (const auto& r : rows) {
    if (r.step != last) continue;
    auto& split = final_block[r.split];
    if (r.exit_id == kEnsembleExit) {
      split["ensemble_top1"] = r.top1;
    } else {
      split["exit_top1"].push_back(r.top1);
    }
  }
  summary["final"] = final_block;

  nlohmann::json best = nullptr;
  for (const auto& r : rows) {
    if (r.split != "val" || r.exit_id != kEnsembleExit) continue;
    if (best.is_null() || r.top1 > best["ensemble_top1"].get<double>()) {
      best = {{"step", r.step}, {"ensemble_top1", r.top1}};
    }
  }
  summary["best_val"] = best;
  return summary;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"layers", c.layers},       {"widths", c.widths},
          {"input_dim", c.input_dim}, {"classes", c.classes},
          {"beta", c.beta},           {"mode", to_string(c.mode)},
          {"bias", c.bias},           {"head_shared_grad", c.head_shared_grad},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.layers = j.at("layers").get<std::size_t>();
    c.widths = j.at("widths").get<std::vector<std::size_t>>();
    c.input_dim = j.at("input_dim").get<std::size_t>();
    c.classes = j.at("classes").get<std::size_t>();
    c.beta = j.at("beta").get<double>();
    c.mode = parse_wiring_mode(j.at("mode").get<std::string>());
    c.bias = j.at("bias").get<bool>();
    c.head_shared_grad = j.at("head_shared_grad").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("model config: {}", e.what()));
  }
}

void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const nlohmann::json& extra) {
  Model copy = model;
  nlohmann::json config = extra.is_object() ? extra : nlohmann::json::object();
  config["model"] = to_json(model.config);

  nlohmann::json tensors = nlohmann::json::array();
  std::string blob;
  for (const auto& p : copy.parameters()) {
    const std::size_t offset = blob.size();
    for (double v : p.value->data()) put_le64(blob, std::bit_cast<std::uint64_t>(v));
    tensors.push_back({{"name", p.name},
                       {"shape", p.value->shape()},
                       {"offset", offset},
                       {"len", blob.size() - offset}});
  }
  const std::string manifest = nlohmann::json{{"config", config}, {"tensors", tensors}}.dump();

  std::string bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_le32(bytes, static_cast<std::uint32_t>(manifest.size()));
  bytes += manifest;
  bytes += blob;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(fmt::format("cannot write checkpoint {}", path.string()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(fmt::format("short write to {}", path.string()));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(fmt::format("cannot open checkpoint {}", path.string()));
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};

  if (bytes.size() < 12 || !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic),
                                       bytes.begin())) {
    throw FormatError(fmt::format("{}: not a checkpoint (bad magic)", path.string()));
  }
  const auto header_len = static_cast<std::size_t>(get_le(bytes, 8, 4));
  if (12 + header_len > bytes.size()) {
    throw FormatError(fmt::format("{}: manifest length {} exceeds file size", path.string(),
                                  header_len));
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(12, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("{}: manifest is not valid JSON: {}", path.string(), e.what()));
  }
  const std::size_t blob_start = 12 + header_len;
  const std::size_t blob_size = bytes.size() - blob_start;

  Checkpoint ckpt;
  try {
    ckpt.config = manifest.at("config");
    ckpt.model = allocate(model_config_from_json(ckpt.config.at("model")));
    const auto& tensors = manifest.at("tensors");
    auto slots = ckpt.model.parameters();
    if (tensors.size() != slots.size()) {
      throw FormatError(fmt::format("manifest lists {} tensors, model has {}", tensors.size(),
                                    slots.size()));
    }
    std::size_t covered = 0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const auto& entry = tensors[i];
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto len = entry.at("len").get<std::size_t>();
      if (name != slots[i].name || shape != slots[i].value->shape()) {
        throw FormatError(fmt::format("tensor {} {} does not match model parameter {} {}", name,
                                      shape_string(shape), slots[i].name,
                                      shape_string(slots[i].value->shape())));
      }
      if (len != 8 * slots[i].value->size() || offset + len > blob_size) {
        throw FormatError(fmt::format("tensor {}: offset {} len {} inconsistent with blob of {} bytes",
                                      name, offset, len, blob_size));
      }
      for (std::size_t k = 0; k < slots[i].value->size(); ++k) {
        (*slots[i].value)[k] = std::bit_cast<double>(get_le(bytes, blob_start + offset + 8 * k, 8));
      }
      covered += len;
    }
    if (covered != blob_size) {
      throw FormatError(fmt::format("blob holds {} bytes, manifest accounts for {}", blob_size,
                                    covered));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("{}: malformed manifest: {}", path.string(), e.what()));
  } catch (const ConfigError& e) {
    throw FormatError(fmt::format("{}: invalid model config: {}", path.string(), e.what()));
  }
  return ckpt;
}

Model load_checkpoint(const std::filesystem::path& path) { return read_checkpoint(path).model; }

}  // namespace dfs
