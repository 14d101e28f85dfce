#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xfer/engine/tensor.hpp"

namespace xfer {

struct ModelConfig {
  int n_layers = 0;
  int n_heads = 0;
  long hidden = 0;
  long context_len = 0;
  TokenId vocab_size = 0;
  bool tie_embeddings = true;
  double init_std = 0.02;
  double layer_norm_eps = 1e-5;
  double dropout = 0.1;

  // 6 layers / 6 heads / 768 hidden / 256 context; ~65M parameters at a
  // 30k vocabulary.
  static ModelConfig paper(TokenId vocab) {
    return {6, 6, 768, 256, vocab};
  }
  // Small enough that end-to-end runs finish in minutes on one CPU core.
  static ModelConfig desk(TokenId vocab) {
    return {2, 2, 64, 64, vocab};
  }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || hidden < 1) {
      throw ValidationError("ModelConfig: layers/heads/hidden must be >= 1");
    }
    if (hidden % n_heads != 0) {
      throw ValidationError("ModelConfig: hidden (" + std::to_string(hidden) +
                            ") not divisible by n_heads (" +
                            std::to_string(n_heads) + ")");
    }
    if (context_len < 2) {
      throw ValidationError("ModelConfig: context_len must be >= 2");
    }
    if (vocab_size < 2) {
      throw ValidationError("ModelConfig: vocab_size must be >= 2");
    }
  }
};

// Decoder-only pre-norm transformer with learned absolute positions,
// 4x MLP expansion, and (by default) tied input/output embeddings.
template <typename S>
struct CausalLm {
  struct Block {
    Tensor<S> ln1_g, ln1_b;
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<S> ln2_g, ln2_b;
    Tensor<S> fc_w, fc_b, proj_w, proj_b;
  };

  ModelConfig cfg;
  Tensor<S> tok_emb;  // [V, H]
  Tensor<S> pos_emb;  // [C, H]
  std::vector<Block> blocks;
  Tensor<S> lnf_g, lnf_b;
  Tensor<S> lm_head;  // [V, H]; same node as tok_emb when tied

  std::vector<Parameter<S>> params() {
    std::vector<Parameter<S>> out;
    out.push_back({"tok_emb", tok_emb});
    out.push_back({"pos_emb", pos_emb});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      out.push_back({p + "ln1.g", b.ln1_g});
      out.push_back({p + "ln1.b", b.ln1_b});
      out.push_back({p + "attn.wq", b.wq});
      out.push_back({p + "attn.bq", b.bq});
      out.push_back({p + "attn.wk", b.wk});
      out.push_back({p + "attn.bk", b.bk});
      out.push_back({p + "attn.wv", b.wv});
      out.push_back({p + "attn.bv", b.bv});
      out.push_back({p + "attn.wo", b.wo});
      out.push_back({p + "attn.bo", b.bo});
      out.push_back({p + "ln2.g", b.ln2_g});
      out.push_back({p + "ln2.b", b.ln2_b});
      out.push_back({p + "mlp.fc_w", b.fc_w});
      out.push_back({p + "mlp.fc_b", b.fc_b});
      out.push_back({p + "mlp.proj_w", b.proj_w});
      out.push_back({p + "mlp.proj_b", b.proj_b});
    }
    out.push_back({"lnf.g", lnf_g});
    out.push_back({"lnf.b", lnf_b});
    if (!cfg.tie_embeddings) out.push_back({"lm_head", lm_head});
    return out;
  }

  std::size_t n_params() {
    std::size_t n = 0;
    for (const auto& p : params()) n += p.tensor.numel();
    return n;
  }

  // Logits for a batch of rows, shape [batch, seq, vocab].  `dropout_rng`
  // enables dropout (training); pass nullptr for deterministic inference.
  Tensor<S> forward_batch(std::span<const TokenId> ids, long batch, long seq,
                          Rng* dropout_rng = nullptr) const {
    if (static_cast<long>(ids.size()) != batch * seq) {
      throw std::runtime_error("forward: id count does not match batch*seq");
    }
    if (seq < 1 || seq > cfg.context_len) {
      throw std::runtime_error("forward: sequence length " +
                               std::to_string(seq) +
                               " outside [1, context_len]");
    }
    for (TokenId t : ids) {
      if (t < 0 || t >= cfg.vocab_size) {
        throw std::runtime_error("forward: token id " + std::to_string(t) +
                                 " outside vocabulary of size " +
                                 std::to_string(cfg.vocab_size));
      }
    }
    const long h = cfg.hidden;
    const long nh = cfg.n_heads;
    const long hd = h / nh;

    std::vector<long> tok_ids(ids.begin(), ids.end());
    std::vector<long> pos_ids(batch * seq);
    for (long b = 0; b < batch; ++b) {
      for (long t = 0; t < seq; ++t) pos_ids[b * seq + t] = t;
    }

    auto drop = [&](Tensor<S> t) {
      return dropout_rng ? dropout(t, cfg.dropout, *dropout_rng) : t;
    };

    Tensor<S> x = add(embedding(tok_emb, std::move(tok_ids)),
                      embedding(pos_emb, std::move(pos_ids)));
    x = drop(reshape(x, {batch, seq, h}));

    const Tensor<S> mask = causal_mask(seq);
    const S scale = S(1) / std::sqrt(static_cast<S>(hd));
    for (const auto& blk : blocks) {
      // Attention sublayer.
      Tensor<S> n1 = affine_norm(x, blk.ln1_g, blk.ln1_b);
      Tensor<S> q = heads(add(matmul(n1, blk.wq), blk.bq), batch, seq, nh, hd);
      Tensor<S> k = heads(add(matmul(n1, blk.wk), blk.bk), batch, seq, nh, hd);
      Tensor<S> v = heads(add(matmul(n1, blk.wv), blk.bv), batch, seq, nh, hd);
      Tensor<S> scores =
          add(mul_scalar(matmul(q, transpose(k, 2, 3)), scale), mask);
      Tensor<S> probs = drop(softmax(scores));
      Tensor<S> ctx = reshape(transpose(matmul(probs, v), 1, 2),
                              {batch, seq, h});
      x = add(x, drop(add(matmul(ctx, blk.wo), blk.bo)));

      // MLP sublayer.
      Tensor<S> n2 = affine_norm(x, blk.ln2_g, blk.ln2_b);
      Tensor<S> f = gelu(add(matmul(n2, blk.fc_w), blk.fc_b));
      x = add(x, drop(add(matmul(f, blk.proj_w), blk.proj_b)));
    }
    x = affine_norm(x, lnf_g, lnf_b);
    return matmul(x, transpose(lm_head));  // [B, T, V]
  }

  // Single-row convenience: logits [len, vocab], no dropout.
  Tensor<S> forward(std::span<const TokenId> block) const {
    const long len = static_cast<long>(block.size());
    return reshape(forward_batch(block, 1, len, nullptr),
                   {len, cfg.vocab_size});
  }

 private:
  Tensor<S> affine_norm(const Tensor<S>& x, const Tensor<S>& g,
                        const Tensor<S>& b) const {
    return add(mul(layer_norm(x, S(cfg.layer_norm_eps)), g), b);
  }

  // [B, T, H] -> [B, nh, T, hd]
  static Tensor<S> heads(const Tensor<S>& x, long b, long t, long nh,
                         long hd) {
    return transpose(reshape(x, {b, t, nh, hd}), 1, 2);
  }

  Tensor<S> causal_mask(long t) const {
    auto m = Tensor<S>::zeros({t, t});
    for (long i = 0; i < t; ++i) {
      for (long j = i + 1; j < t; ++j) {
        m.value()[i * t + j] = S(-1e9);
      }
    }
    return m;
  }
};

namespace detail {

// One reproducible stream per parameter, so redrawing a subset of the
// parameters never shifts the values of the others.
inline std::uint64_t param_seed(std::uint64_t seed, std::string_view name) {
  return splitmix64(seed ^ fnv1a(name));
}

template <typename S>
Tensor<S> init_weight(Shape shape, const ModelConfig& cfg, std::uint64_t seed,
                      std::string_view name) {
  Rng rng(param_seed(seed, name));
  auto t = Tensor<S>::randn(std::move(shape), static_cast<S>(cfg.init_std), rng);
  t.set_requires_grad(true);
  return t;
}

template <typename S>
Tensor<S> init_const(Shape shape, S v) {
  auto t = Tensor<S>::constant(std::move(shape), v);
  t.set_requires_grad(true);
  return t;
}

template <typename S>
void draw_embeddings(CausalLm<S>& m, std::uint64_t seed,
                     bool redraw_positions) {
  const long h = m.cfg.hidden;
  m.tok_emb = init_weight<S>({m.cfg.vocab_size, h}, m.cfg, seed, "tok_emb");
  if (redraw_positions) {
    m.pos_emb = init_weight<S>({m.cfg.context_len, h}, m.cfg, seed, "pos_emb");
  }
  m.lm_head = m.cfg.tie_embeddings
                  ? m.tok_emb
                  : init_weight<S>({m.cfg.vocab_size, h}, m.cfg, seed,
                                   "lm_head");
}

}  // namespace detail

template <typename S>
CausalLm<S> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  CausalLm<S> m;
  m.cfg = cfg;
  const long h = cfg.hidden;
  detail::draw_embeddings(m, seed, /*redraw_positions=*/true);
  m.blocks.resize(cfg.n_layers);
  for (int i = 0; i < cfg.n_layers; ++i) {
    auto& b = m.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    auto w = [&](const std::string& n, Shape shape) {
      return detail::init_weight<S>(std::move(shape), cfg, seed, p + n);
    };
    b.ln1_g = detail::init_const<S>({h}, S(1));
    b.ln1_b = detail::init_const<S>({h}, S(0));
    b.wq = w("attn.wq", {h, h});
    b.bq = detail::init_const<S>({h}, S(0));
    b.wk = w("attn.wk", {h, h});
    b.bk = detail::init_const<S>({h}, S(0));
    b.wv = w("attn.wv", {h, h});
    b.bv = detail::init_const<S>({h}, S(0));
    b.wo = w("attn.wo", {h, h});
    b.bo = detail::init_const<S>({h}, S(0));
    b.ln2_g = detail::init_const<S>({h}, S(1));
    b.ln2_b = detail::init_const<S>({h}, S(0));
    b.fc_w = w("mlp.fc_w", {h, 4 * h});
    b.fc_b = detail::init_const<S>({4 * h}, S(0));
    b.proj_w = w("mlp.proj_w", {4 * h, h});
    b.proj_b = detail::init_const<S>({h}, S(0));
  }
  m.lnf_g = detail::init_const<S>({h}, S(1));
  m.lnf_b = detail::init_const<S>({h}, S(0));
  return m;
}

// Redraw input/output embeddings (one shared matrix when tied) and, unless
// `preserve_positions`, the position embeddings.  All other parameters are
// untouched.
template <typename S>
void reinit_embeddings(CausalLm<S>& model, std::uint64_t seed,
                       bool preserve_positions = false) {
  detail::draw_embeddings(model, seed, !preserve_positions);
}

// Re-allocate the embedding/LM-head rows to `new_vocab` and redraw them;
// the transformer trunk is untouched.  Equals reinit_embeddings when
// new_vocab == current vocab.
template <typename S>
void resize_vocab(CausalLm<S>& model, TokenId new_vocab, std::uint64_t seed,
                  bool preserve_positions = false) {
  if (new_vocab < 2) {
    throw ValidationError("resize_vocab: new_vocab must be >= 2");
  }
  model.cfg.vocab_size = new_vocab;
  detail::draw_embeddings(model, seed, !preserve_positions);
}

// Deep copy: fresh leaf tensors, identical values.
template <typename S>
CausalLm<S> clone_model(const CausalLm<S>& model) {
  CausalLm<S> out = model;
  auto copy = [](Tensor<S>& t) {
    auto c = detach(t);
    c.set_requires_grad(true);
    t = c;
  };
  copy(out.tok_emb);
  copy(out.pos_emb);
  for (auto& b : out.blocks) {
    for (Tensor<S>* t : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk,
                         &b.wv, &b.bv, &b.wo, &b.bo, &b.ln2_g, &b.ln2_b,
                         &b.fc_w, &b.fc_b, &b.proj_w, &b.proj_b}) {
      copy(*t);
    }
  }
  copy(out.lnf_g);
  copy(out.lnf_b);
  if (out.cfg.tie_embeddings) {
    out.lm_head = out.tok_emb;
  } else {
    copy(out.lm_head);
  }
  return out;
}

// Mean next-token cross-entropy in nats/token over positions 1..len-1.
template <typename S>
Tensor<S> lm_cross_entropy(const Tensor<S>& logits,
                           std::span<const TokenId> block) {
  if (block.size() < 2) {
    throw ValidationError("lm_cross_entropy: need at least 2 tokens");
  }
  const long len = static_cast<long>(block.size());
  Tensor<S> inputs = slice(logits, 0, 0, len - 1);
  return cross_entropy(inputs, block.subspan(1));
}

// Batched variant: logits [B, T, V], rows of `ids` length T each.
template <typename S>
Tensor<S> lm_batch_loss(const Tensor<S>& logits, std::span<const TokenId> ids,
                        long batch, long seq) {
  const long v = logits.shape().back();
  Tensor<S> inputs =
      reshape(slice(logits, 1, 0, seq - 1), {batch * (seq - 1), v});
  std::vector<TokenId> targets;
  targets.reserve(batch * (seq - 1));
  for (long b = 0; b < batch; ++b) {
    for (long t = 1; t < seq; ++t) targets.push_back(ids[b * seq + t]);
  }
  return cross_entropy(inputs, std::span<const TokenId>(targets));
}

}  // namespace xfer
