#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "seq2seq/common.hpp"
#include "seq2seq/model.hpp"
#include "seq2seq/noising.hpp"

namespace seq2seq {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

enum class TrainMode { Pretrain, Finetune };

struct TrainConfig {
  double lr_start = 1e-4;
  double lr_end = 5e-6;
  std::int64_t total_steps = 0;
  AdamConfig adam;
  double weight_decay = 0.1;
  int accumulation = 1;  // micro-batches per optimizer update
  int batch_size = 8;    // pairs per micro-batch
  std::int64_t freeze_encoder_steps = 0;
  TrainMode mode = TrainMode::Pretrain;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0 = checkpoint only at completion
  double grad_clip = 0.0;             // global-norm clip, 0 = off
  std::int64_t halt_after_step = 0;   // clean stop for resume drills, 0 = off

  void validate() const {
    if (total_steps < 1) throw ConfigError("trainer: total_steps must be >= 1");
    if (lr_start <= 0 || lr_end <= 0) throw ConfigError("trainer: learning rates must be > 0");
    if (lr_end > lr_start) throw ConfigError("trainer: lr_end must be <= lr_start");
    if (accumulation < 1 || batch_size < 1)
      throw ConfigError("trainer: accumulation and batch_size must be >= 1");
    if (freeze_encoder_steps < 0 || freeze_encoder_steps > total_steps)
      throw ConfigError("trainer: freeze_encoder_steps must lie in [0, total_steps]");
  }
};

/// Linear decay from lr_start at step 0 to lr_end at total_steps.
inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    throw std::invalid_argument("lr_at: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(cfg.total_steps) + "]");
  return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * static_cast<double>(step) /
                            static_cast<double>(cfg.total_steps);
}

template <typename T>
struct OptimizerState {
  ModelParams<T> m, v;
  std::int64_t step = 0;
};

template <typename T>
OptimizerState<T> make_optimizer_state(const ModelParams<T>& p) {
  return OptimizerState<T>{zeros_like(p), zeros_like(p), 0};
}

/// One Adam update with bias correction at lr_at(state.step), decoupled
/// weight decay lr*lambda*theta on everything except biases and layernorms.
/// Encoder tensors are skipped entirely (no update, no moments) while
/// state.step < freeze_encoder_steps.
template <typename T>
void apply_update(ModelParams<T>& params, const ModelParams<T>& grads, OptimizerState<T>& state,
                  const TrainConfig& cfg) {
  const double lr = lr_at(state.step, cfg);
  const std::int64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(cfg.adam.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.adam.beta2, static_cast<double>(t));
  const bool frozen_window = state.step < cfg.freeze_encoder_steps;

  auto pe = enumerate_params(params);
  auto ge = enumerate_params(grads);
  auto me = enumerate_params(state.m);
  auto ve = enumerate_params(state.v);

  double clip_scale = 1.0;
  if (cfg.grad_clip > 0) {
    double sq = 0;
    for (std::size_t i = 0; i < ge.size(); ++i) {
      if (frozen_window && is_encoder_param(ge[i].name)) continue;
      for (std::size_t k = 0; k < ge[i].size(); ++k) {
        const double g = static_cast<double>(ge[i].data[k]);
        sq += g * g;
      }
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg.grad_clip) clip_scale = cfg.grad_clip / norm;
  }

  for (std::size_t i = 0; i < pe.size(); ++i) {
    if (frozen_window && is_encoder_param(pe[i].name)) continue;
    const bool decay = decays(pe[i].kind);
    for (std::size_t k = 0; k < pe[i].size(); ++k) {
      const double g_raw = static_cast<double>(ge[i].data[k]);
      if (!std::isfinite(g_raw))
        throw std::runtime_error("trainer: non-finite gradient in " + pe[i].name + " at step " +
                                 std::to_string(state.step));
      const double g = g_raw * clip_scale;
      const double m = cfg.adam.beta1 * static_cast<double>(me[i].data[k]) +
                       (1.0 - cfg.adam.beta1) * g;
      const double v = cfg.adam.beta2 * static_cast<double>(ve[i].data[k]) +
                       (1.0 - cfg.adam.beta2) * g * g;
      me[i].data[k] = static_cast<T>(m);
      ve[i].data[k] = static_cast<T>(v);
      const double m_hat = m / bc1;
      const double v_hat = v / bc2;
      double update = m_hat / (std::sqrt(v_hat) + cfg.adam.eps);
      if (decay) update += cfg.weight_decay * static_cast<double>(pe[i].data[k]);
      pe[i].data[k] = static_cast<T>(static_cast<double>(pe[i].data[k]) - lr * update);
    }
  }
  state.step = t;
}

// --- checkpoint directory layout --------------------------------------------

struct TrainerCounters {
  std::int64_t step = 0;
  std::int64_t pairs_consumed = 0;
  std::int64_t tokens_seen = 0;
  bool partial = false;
};

template <typename T>
void save_optimizer(const OptimizerState<T>& st, const std::filesystem::path& path) {
  TensorFile file;
  file.header = {{"step", std::to_string(st.step)}};
  auto dump = [&](const ModelParams<T>& p, const std::string& prefix) {
    for (const auto& e : enumerate_params(p)) {
      NamedTensor t;
      t.name = prefix + e.name;
      t.shape = e.cols == 1 ? std::vector<std::size_t>{e.rows}
                            : std::vector<std::size_t>{e.rows, e.cols};
      t.data.resize(e.size());
      for (std::size_t i = 0; i < e.size(); ++i) t.data[i] = static_cast<float>(e.data[i]);
      file.tensors.push_back(std::move(t));
    }
  };
  dump(st.m, "m.");
  dump(st.v, "v.");
  write_tensor_file(path, file);
}

template <typename T>
OptimizerState<T> load_optimizer(const std::filesystem::path& path, const ModelParams<T>& like) {
  TensorFile file = read_tensor_file(path);
  OptimizerState<T> st = make_optimizer_state(like);
  for (const auto& [k, v] : file.header)
    if (k == "step") st.step = std::stoll(v);
  std::map<std::string, const NamedTensor*> by_name;
  for (const NamedTensor& t : file.tensors) by_name[t.name] = &t;
  auto fill = [&](ModelParams<T>& p, const std::string& prefix) {
    for (auto& e : enumerate_params(p)) {
      auto it = by_name.find(prefix + e.name);
      if (it == by_name.end()) throw FileError("optimizer state: missing tensor " + prefix + e.name);
      if (it->second->data.size() != e.size())
        throw FileError("optimizer state: size mismatch for " + prefix + e.name);
      for (std::size_t i = 0; i < e.size(); ++i) e.data[i] = static_cast<T>(it->second->data[i]);
    }
  };
  fill(st.m, "m.");
  fill(st.v, "v.");
  return st;
}

inline void save_counters(const TrainerCounters& c, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileError("cannot write rng state file: " + path.string());
  os << "step=" << c.step << "\n"
     << "pairs_consumed=" << c.pairs_consumed << "\n"
     << "tokens_seen=" << c.tokens_seen << "\n"
     << "partial=" << (c.partial ? 1 : 0) << "\n";
}

inline TrainerCounters load_counters(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError("cannot read rng state file: " + path.string());
  TrainerCounters c;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "step") c.step = std::stoll(val);
    else if (key == "pairs_consumed") c.pairs_consumed = std::stoll(val);
    else if (key == "tokens_seen") c.tokens_seen = std::stoll(val);
    else if (key == "partial") c.partial = (val == "1");
  }
  return c;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ModelParams<T>& params,
                     const OptimizerState<T>& opt, const TrainerCounters& counters,
                     const std::string& config_snapshot) {
  std::filesystem::create_directories(dir);
  save_model(params, dir / "model.bin");
  save_optimizer(opt, dir / "optimizer.bin");
  save_counters(counters, dir / "rng.txt");
  std::ofstream os(dir / "config.txt", std::ios::binary);
  os << config_snapshot;
}

struct TrainResult {
  std::int64_t steps_done = 0;
  double initial_loss = 0;
  double final_loss = 0;
  bool partial = false;
  std::filesystem::path last_checkpoint;
};

using PairSource = std::function<std::optional<NoisedPair>()>;
using MetricsSink = std::function<void(std::int64_t step, const std::string& split, double loss,
                                       double lr, std::int64_t tokens, double wallclock)>;

/// The optimization loop. Per step, gradients of `accumulation` micro-batches
/// are combined token-weighted (so accumulation=k equals one k-times-larger
/// batch exactly) before a single apply_update. Finetune mode prefixes [CLM]
/// to every encoder input. Data exhaustion mid-run stops cleanly and flags
/// the final checkpoint as partial. The pair stream is deterministic given
/// its seed, so counters.pairs_consumed fully describes the data position;
/// resume re-drains that many pairs and continues bit-exactly.
template <typename T>
TrainResult train(ModelParams<T>& params, const PairSource& data, const TrainConfig& cfg,
                  const SpecialTokens& sp, const std::filesystem::path& out_dir,
                  const std::string& config_snapshot, OptimizerState<T>* opt_in = nullptr,
                  TrainerCounters* counters_in = nullptr, const MetricsSink& metrics = {}) {
  cfg.validate();
  OptimizerState<T> opt = opt_in ? std::move(*opt_in) : make_optimizer_state(params);
  TrainerCounters counters = counters_in ? *counters_in : TrainerCounters{};

  // Fast-forward the deterministic pair stream to the resume position.
  for (std::int64_t i = 0; i < counters.pairs_consumed; ++i) data();

  std::ofstream metrics_file;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const auto metrics_path = out_dir / "metrics.csv";
    const bool fresh = !std::filesystem::exists(metrics_path) || counters.step == 0;
    metrics_file.open(metrics_path, fresh ? std::ios::trunc : std::ios::app);
    if (fresh) metrics_file << "step,split,loss,lr,tokens,wallclock\n";
  }

  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  bool exhausted = false;

  for (std::int64_t step = counters.step; step < cfg.total_steps && !exhausted; ++step) {
    ModelParams<T> grad_sum = zeros_like(params);
    double loss_sum = 0;
    std::size_t token_sum = 0;

    for (int micro = 0; micro < cfg.accumulation && !exhausted; ++micro) {
      std::vector<NoisedPair> pairs;
      pairs.reserve(cfg.batch_size);
      while (pairs.size() < static_cast<std::size_t>(cfg.batch_size)) {
        auto pair = data();
        if (!pair) {
          exhausted = true;
          break;
        }
        ++counters.pairs_consumed;
        if (cfg.mode == TrainMode::Finetune &&
            (pair->encoder_ids.empty() || pair->encoder_ids.front() != sp.clm))
          pair->encoder_ids.insert(pair->encoder_ids.begin(), sp.clm);
        pairs.push_back(std::move(*pair));
      }
      if (pairs.empty()) break;

      Batch batch = make_batch(pairs, sp);
      const std::size_t tokens = batch.active_positions();
      auto lg = loss_and_grads(params, batch);
      const auto ps = enumerate_params(grad_sum);
      const auto gs = enumerate_params(lg.grads);
      for (std::size_t i = 0; i < ps.size(); ++i)
        for (std::size_t k = 0; k < ps[i].size(); ++k)
          ps[i].data[k] += gs[i].data[k] * static_cast<T>(tokens);
      loss_sum += lg.loss * static_cast<double>(tokens);
      token_sum += tokens;
    }
    if (token_sum == 0) break;

    const auto entries = enumerate_params(grad_sum);
    for (const auto& e : entries)
      for (std::size_t k = 0; k < e.size(); ++k) e.data[k] /= static_cast<T>(token_sum);
    const double loss = loss_sum / static_cast<double>(token_sum);
    const double lr = lr_at(opt.step, cfg);
    apply_update(params, grad_sum, opt, cfg);
    counters.step = opt.step;
    counters.tokens_seen += static_cast<std::int64_t>(token_sum);

    if (result.steps_done == 0) result.initial_loss = loss;
    result.final_loss = loss;
    ++result.steps_done;

    const double wallclock =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (metrics_file.is_open())
      metrics_file << counters.step << ",train," << loss << "," << lr << ","
                   << counters.tokens_seen << "," << wallclock << "\n";
    if (metrics) metrics(counters.step, "train", loss, lr, counters.tokens_seen, wallclock);

    const bool cadence_hit =
        cfg.checkpoint_every > 0 && counters.step % cfg.checkpoint_every == 0;
    const bool halting = cfg.halt_after_step > 0 && counters.step >= cfg.halt_after_step;
    const bool done = counters.step >= cfg.total_steps;
    if (!out_dir.empty() && (cadence_hit || done || halting)) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06lld", static_cast<long long>(counters.step));
      counters.partial = false;
      result.last_checkpoint = out_dir / name;
      save_checkpoint(result.last_checkpoint, params, opt, counters, config_snapshot);
    }
    if (halting) break;
  }

  if (exhausted) {
    counters.partial = true;
    result.partial = true;
    if (!out_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06lld", static_cast<long long>(counters.step));
      result.last_checkpoint = out_dir / name;
      save_checkpoint(result.last_checkpoint, params, opt, counters, config_snapshot);
    }
  }

  if (opt_in) *opt_in = std::move(opt);
  if (counters_in) *counters_in = counters;
  return result;
}

}  // namespace seq2seq
