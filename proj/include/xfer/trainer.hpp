#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <vector>

#include "xfer/model.hpp"

namespace xfer {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long batch_size = 32;
  int epochs = 5;
  std::optional<double> grad_clip = 1.0;  // global max-norm
  std::uint64_t seed = 0;

  void validate() const {
    if (lr <= 0) throw ValidationError("TrainConfig: lr must be > 0");
    if (weight_decay < 0) {
      throw ValidationError("TrainConfig: weight_decay must be >= 0");
    }
    if (epochs < 1) throw ValidationError("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) {
      throw ValidationError("TrainConfig: batch_size must be >= 1");
    }
  }
};

// Linear decay to zero: base_lr * (1 - step/total_steps).
inline double lr_at(long step, long total_steps, double base_lr) {
  if (total_steps < 1) {
    throw ValidationError("lr_at: total_steps must be >= 1");
  }
  if (step < 0 || step > total_steps) {
    throw ValidationError("lr_at: step outside [0, total_steps]");
  }
  return base_lr * (1.0 - static_cast<double>(step) / total_steps);
}

template <typename S>
struct OptimState {
  std::vector<typename Node<S>::Vec> m;
  std::vector<typename Node<S>::Vec> v;
  long step = 0;

  static OptimState init(const std::vector<Parameter<S>>& params) {
    OptimState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& p : params) {
      st.m.push_back(Node<S>::Vec::Zero(p.tensor.numel()));
      st.v.push_back(Node<S>::Vec::Zero(p.tensor.numel()));
    }
    return st;
  }
};

// Decoupled-weight-decay Adam step at learning rate `lr_t`.
template <typename S>
void adamw_step(std::vector<Parameter<S>>& params, OptimState<S>& state,
                const TrainConfig& config, double lr_t) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(config.beta1, state.step);
  const double bc2 = 1.0 - std::pow(config.beta2, state.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& n = *params[i].tensor.node;
    if (n.grad.size() != n.value.size()) {
      throw std::runtime_error("adamw_step: missing gradient for " +
                               params[i].name);
    }
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = S(config.beta1) * m + S(1.0 - config.beta1) * n.grad;
    v = S(config.beta2) * v + S(1.0 - config.beta2) * n.grad.square();
    n.value -= S(lr_t) * ((m / S(bc1)) / ((v / S(bc2)).sqrt() + S(config.eps)) +
                          S(config.weight_decay) * n.value);
  }
}

template <typename S>
void clip_grad_norm(std::vector<Parameter<S>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    const auto& n = *p.tensor.node;
    if (n.grad.size() > 0) {
      sq += static_cast<double>(n.grad.template cast<double>().square().sum());
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const S scale = S(max_norm / norm);
    for (auto& p : params) {
      auto& n = *p.tensor.node;
      if (n.grad.size() > 0) n.grad *= scale;
    }
  }
}

struct TracePoint {
  long step;
  double lr;
  double loss;
};

inline void write_loss_trace(const std::vector<TracePoint>& trace,
                             const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,lr,loss\n";
  for (const auto& t : trace) {
    out << t.step << "," << t.lr << "," << t.loss << "\n";
  }
}

// Fixed-epoch training with per-epoch (seeded) block shuffling, linear lr
// decay across all steps, and drop-last batching.  The model is updated in
// place; the per-step loss trace is returned.
template <typename S>
std::vector<TracePoint> train(CausalLm<S>& model, const BlockSet& blocks,
                              const TrainConfig& config) {
  config.validate();
  if (blocks.n_blocks() == 0) {
    throw ValidationError("train: empty block set");
  }
  if (blocks.block_len != model.cfg.context_len) {
    throw ValidationError("train: block_len " +
                          std::to_string(blocks.block_len) +
                          " != context_len " +
                          std::to_string(model.cfg.context_len));
  }
  auto params = model.params();
  auto state = OptimState<S>::init(params);
  Rng shuffle_rng(splitmix64(config.seed ^ fnv1a("shuffle")));
  Rng dropout_rng(splitmix64(config.seed ^ fnv1a("dropout")));

  const long steps_per_epoch = blocks.n_blocks() / config.batch_size;
  const long total_steps = steps_per_epoch * config.epochs;
  std::vector<TracePoint> trace;
  trace.reserve(total_steps);

  std::vector<long> order(blocks.n_blocks());
  std::iota(order.begin(), order.end(), 0);
  std::vector<TokenId> batch_ids(config.batch_size * blocks.block_len);

  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (long s = 0; s < steps_per_epoch; ++s) {
      for (long b = 0; b < config.batch_size; ++b) {
        const auto row = blocks.block(order[s * config.batch_size + b]);
        std::copy(row.begin(), row.end(),
                  batch_ids.begin() + b * blocks.block_len);
      }
      Tensor<S> logits = model.forward_batch(batch_ids, config.batch_size,
                                             blocks.block_len, &dropout_rng);
      Tensor<S> loss =
          lm_batch_loss(logits, batch_ids, config.batch_size, blocks.block_len);
      zero_grad(params);
      backward(loss);
      if (config.grad_clip) clip_grad_norm(params, *config.grad_clip);
      const double lr_t = lr_at(step, total_steps, config.lr);
      adamw_step(params, state, config, lr_t);
      trace.push_back({step, lr_t, static_cast<double>(loss.item())});
      ++step;
    }
  }
  return trace;
}

// Token-weighted mean cross-entropy over all blocks; pure (no parameter
// mutation, no gradient recording).
template <typename S>
double evaluate(const CausalLm<S>& model, const BlockSet& blocks,
                long batch_size = 32) {
  if (blocks.n_blocks() == 0) {
    throw ValidationError("evaluate: empty block set");
  }
  NoGradGuard guard;
  double total_loss = 0.0;
  long total_rows = 0;
  std::vector<TokenId> batch_ids;
  for (long start = 0; start < blocks.n_blocks(); start += batch_size) {
    const long rows = std::min(batch_size, blocks.n_blocks() - start);
    batch_ids.resize(rows * blocks.block_len);
    for (long b = 0; b < rows; ++b) {
      const auto row = blocks.block(start + b);
      std::copy(row.begin(), row.end(),
                batch_ids.begin() + b * blocks.block_len);
    }
    Tensor<S> logits =
        model.forward_batch(batch_ids, rows, blocks.block_len, nullptr);
    Tensor<S> loss = lm_batch_loss(logits, batch_ids, rows, blocks.block_len);
    // All blocks share block_len, so per-block mean = token-weighted mean.
    total_loss += static_cast<double>(loss.item()) * rows;
    total_rows += rows;
  }
  return total_loss / total_rows;
}

}  // namespace xfer
