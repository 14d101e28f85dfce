#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "xfer/model.hpp"

using namespace xfer;

namespace {

// Closed-form parameter count: embeddings + per-block attention/MLP/norms
// + final norm, doubled embedding when untied.
std::size_t expected_params(const ModelConfig& c) {
  const std::size_t h = c.hidden;
  const std::size_t per_block = 12 * h * h + 13 * h;
  std::size_t n = std::size_t(c.vocab_size) * h + std::size_t(c.context_len) * h +
                  c.n_layers * per_block + 2 * h;
  if (!c.tie_embeddings) n += std::size_t(c.vocab_size) * h;
  return n;
}

ModelConfig tiny(TokenId vocab = 11) {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.hidden = 8;
  c.context_len = 8;
  c.vocab_size = vocab;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_THROWS_AS(ModelConfig{}.validate(), ValidationError);
  ModelConfig bad = tiny();
  bad.n_heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK_NOTHROW(tiny().validate());
  CHECK_NOTHROW(ModelConfig::paper(30000).validate());
  CHECK_NOTHROW(ModelConfig::desk(512).validate());
}

TEST_CASE("parameter count matches the closed form") {
  for (TokenId v : {5, 11, 64}) {
    auto m = init_model<double>(tiny(v), 0);
    CHECK(m.n_params() == expected_params(tiny(v)));
  }
  ModelConfig untied = tiny();
  untied.tie_embeddings = false;
  auto mu = init_model<double>(untied, 0);
  CHECK(mu.n_params() == expected_params(untied));

  // Desk and paper profiles against hand-computed totals.
  CHECK(expected_params(ModelConfig::desk(512)) == 136960u);
  auto desk = init_model<float>(ModelConfig::desk(512), 1);
  CHECK(desk.n_params() == 136960u);
  CHECK(expected_params(ModelConfig::paper(30000)) == 65765376u);
}

TEST_CASE("init is deterministic and per-parameter independent") {
  auto a = init_model<double>(tiny(), 42);
  auto b = init_model<double>(tiny(), 42);
  CHECK((a.tok_emb.value() == b.tok_emb.value()).all());
  CHECK((a.blocks[0].wq.value() == b.blocks[0].wq.value()).all());

  auto c = init_model<double>(tiny(), 43);
  CHECK_FALSE((a.tok_emb.value() == c.tok_emb.value()).all());

  // The trunk does not depend on the vocabulary size.
  auto small_v = init_model<double>(tiny(5), 42);
  CHECK((a.blocks[0].wq.value() == small_v.blocks[0].wq.value()).all());
  CHECK((a.blocks[0].fc_w.value() == small_v.blocks[0].fc_w.value()).all());
  CHECK((a.pos_emb.value() == small_v.pos_emb.value()).all());
}

TEST_CASE("tied embeddings share one node") {
  auto m = init_model<double>(tiny(), 0);
  CHECK(m.lm_head.node == m.tok_emb.node);
  CHECK(m.params().size() == 2u + 16u + 2u);  // no separate lm_head entry

  ModelConfig untied = tiny();
  untied.tie_embeddings = false;
  auto mu = init_model<double>(untied, 0);
  CHECK(mu.lm_head.node != mu.tok_emb.node);
  CHECK(mu.params().size() == 2u + 16u + 3u);
}

TEST_CASE("forward shapes and batch consistency") {
  auto m = init_model<double>(tiny(), 3);
  std::vector<TokenId> row = {1, 4, 0, 7};
  auto logits = m.forward(row);
  REQUIRE(logits.shape() == Shape{4, 11});

  // A batch of two identical rows gives the single-row logits twice.
  std::vector<TokenId> two = {1, 4, 0, 7, 1, 4, 0, 7};
  auto blog = m.forward_batch(two, 2, 4, nullptr);
  REQUIRE(blog.shape() == Shape{2, 4, 11});
  for (long i = 0; i < 44; ++i) {
    CHECK(blog.value()[i] == doctest::Approx(logits.value()[i]).epsilon(1e-12));
    CHECK(blog.value()[44 + i] ==
          doctest::Approx(logits.value()[i]).epsilon(1e-12));
  }

  std::vector<TokenId> bad = {1, 99, 0};
  CHECK_THROWS(m.forward(bad));
  std::vector<TokenId> long_row(m.cfg.context_len + 1, 0);
  CHECK_THROWS(m.forward(long_row));
}

TEST_CASE("causal mask: future tokens never change earlier logits") {
  auto m = init_model<double>(tiny(), 8);
  std::vector<TokenId> base = {2, 5, 1, 3, 7, 0};
  auto l0 = m.forward(base);
  for (std::size_t flip = 2; flip < base.size(); ++flip) {
    auto alt = base;
    alt[flip] = (alt[flip] + 1) % 11;
    auto l1 = m.forward(alt);
    // Positions before `flip` see an identical prefix.
    for (std::size_t pos = 0; pos < flip; ++pos) {
      for (long v = 0; v < 11; ++v) {
        CHECK(l1.value()[pos * 11 + v] ==
              doctest::Approx(l0.value()[pos * 11 + v]).epsilon(1e-12));
      }
    }
    // The flipped position itself must differ somewhere at or after it.
    double diff = 0;
    for (std::size_t pos = flip; pos < base.size(); ++pos) {
      for (long v = 0; v < 11; ++v) {
        diff += std::abs(l1.value()[pos * 11 + v] - l0.value()[pos * 11 + v]);
      }
    }
    CHECK(diff > 0.0);
  }
}

TEST_CASE("full-model gradients pass the finite-difference check") {
  // All-parameter check on the tiny model, 64-bit.
  auto m = init_model<double>(tiny(7), 9);
  std::vector<TokenId> row = {1, 4, 0, 6, 2};
  std::vector<Tensor<double>> leaves;
  for (auto& p : m.params()) leaves.push_back(p.tensor);
  const double err = gradcheck::max_rel_err(
      leaves, [&m, &row](const auto&) {
        return lm_cross_entropy(m.forward(row), std::span<const TokenId>(row));
      });
  CHECK(err < 1e-4);
}

TEST_CASE("reinit_embeddings redraws only the embeddings") {
  auto m = init_model<double>(tiny(), 5);
  const auto trunk_before = m.blocks[0].wq.value();
  const auto tok_before = m.tok_emb.value();
  const auto pos_before = m.pos_emb.value();

  reinit_embeddings(m, 77);
  CHECK((m.blocks[0].wq.value() == trunk_before).all());
  CHECK_FALSE((m.tok_emb.value() == tok_before).all());
  CHECK_FALSE((m.pos_emb.value() == pos_before).all());
  CHECK(m.lm_head.node == m.tok_emb.node);  // tie survives the redraw
  CHECK(m.tok_emb.requires_grad());

  // preserve_positions leaves pos_emb alone.
  auto m2 = init_model<double>(tiny(), 5);
  reinit_embeddings(m2, 77, /*preserve_positions=*/true);
  CHECK((m2.pos_emb.value() == pos_before).all());
  CHECK((m2.tok_emb.value() == m.tok_emb.value()).all());
}

TEST_CASE("resize_vocab changes only the embedding rows") {
  auto m = init_model<double>(tiny(5), 5);
  const auto trunk_before = m.blocks[0].fc_w.value();
  resize_vocab(m, 13, 99);
  CHECK(m.cfg.vocab_size == 13);
  CHECK(m.tok_emb.shape() == Shape{13, 8});
  CHECK((m.blocks[0].fc_w.value() == trunk_before).all());
  std::vector<TokenId> row = {12, 0, 3};
  CHECK_NOTHROW(m.forward(row));
  CHECK_THROWS_AS(resize_vocab(m, 1, 0), ValidationError);

  // Same trunk seed + same resize seed = same model regardless of the
  // vocabulary the trunk was first drawn at.
  auto m2 = init_model<double>(tiny(23), 5);
  resize_vocab(m2, 13, 99);
  CHECK((m2.tok_emb.value() == m.tok_emb.value()).all());
  CHECK((m2.blocks[0].wq.value() == m.blocks[0].wq.value()).all());
}

TEST_CASE("clone_model is a deep copy") {
  auto m = init_model<double>(tiny(), 4);
  auto c = clone_model(m);
  CHECK(c.tok_emb.node != m.tok_emb.node);
  CHECK((c.tok_emb.value() == m.tok_emb.value()).all());
  CHECK(c.lm_head.node == c.tok_emb.node);
  c.blocks[0].wq.value()[0] += 1.0;
  CHECK(c.blocks[0].wq.value()[0] != m.blocks[0].wq.value()[0]);

  std::vector<TokenId> row = {1, 2, 3};
  auto lm = m.forward(row);
  auto lc = clone_model(m).forward(row);
  CHECK((lm.value() == lc.value()).all());
}

TEST_CASE("lm_cross_entropy shifts targets by one") {
  auto m = init_model<double>(tiny(), 6);
  std::vector<TokenId> row = {3, 3, 3, 3};
  auto loss = lm_cross_entropy(m.forward(row), std::span<const TokenId>(row));
  CHECK(loss.numel() == 1);
  CHECK(loss.item() > 0.0);
  std::vector<TokenId> one = {3};
  CHECK_THROWS_AS(
      lm_cross_entropy(m.forward(one), std::span<const TokenId>(one)),
      ValidationError);

  // Batched loss equals the mean of per-row losses.
  std::vector<TokenId> ids = {1, 2, 3, 4, 5, 6, 7, 0};
  auto blog = m.forward_batch(ids, 2, 4, nullptr);
  auto bl = lm_batch_loss(blog, ids, 2, 4);
  std::span<const TokenId> r0(ids.data(), 4), r1(ids.data() + 4, 4);
  auto l0 = lm_cross_entropy(m.forward(r0), r0);
  auto l1 = lm_cross_entropy(m.forward(r1), r1);
  CHECK(bl.item() ==
        doctest::Approx((l0.item() + l1.item()) / 2.0).epsilon(1e-10));
}
