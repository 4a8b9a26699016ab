#include <doctest.h>

#include <set>

#include "../support.hpp"

using namespace cuprec;
using namespace cuprec::testing;

namespace {

StepScorer hashed(std::uint64_t seed, std::size_t vocab = 6) {
  return [seed, vocab](const std::vector<int>& p) { return hashed_log_probs(p, vocab, seed); };
}

}  // namespace

TEST_CASE("beam of one is greedy") {
  for (std::uint64_t s = 1; s <= 30; ++s) {
    const auto b = beam_search(hashed(s, 9), 9, 1, 5);
    const auto g = greedy_decode(hashed(s, 9), 9, 5);
    REQUIRE(b.size() == 1);
    CHECK(b[0].tokens == g.tokens);
    CHECK(b[0].log_likelihood == g.log_likelihood);
  }
}

TEST_CASE("single step returns the top-b first tokens") {
  const auto lp = hashed_log_probs({}, 8, 3);
  const auto out = beam_search(hashed(3, 8), 8, 3, 1);
  std::vector<std::pair<double, int>> order;
  for (int t = 0; t < 8; ++t)
    if (t != kPad && t != kBos) order.emplace_back(-lp(t), t);
  std::sort(order.begin(), order.end());
  REQUIRE(out.size() == 3);
  for (int r = 0; r < 3; ++r) {
    CHECK(out[static_cast<std::size_t>(r)].tokens == std::vector<int>{order[static_cast<std::size_t>(r)].second});
    CHECK(out[static_cast<std::size_t>(r)].finished);
  }
}

TEST_CASE("hypothesis scores are exact sums and beams beat greedy") {
  for (std::uint64_t s = 1; s <= 20; ++s) {
    const auto g = greedy_decode(hashed(s), 6, 3);
    for (int b = 1; b <= 3; ++b) {
      const auto out = beam_search(hashed(s), 6, b, 3);
      for (const auto& h : out) {
        double sum = 0;
        std::vector<int> prefix;
        for (int t : h.tokens) {
          const double lp = hashed_log_probs(prefix, 6, s)(t);
          CHECK(lp <= 0.0);
          sum += lp;
          prefix.push_back(t);
        }
        CHECK(std::abs(sum - h.log_likelihood) < 1e-12);
        CHECK(h.finished == (h.tokens.back() == kEos || h.tokens.size() == 3));
      }
      for (std::size_t k = 1; k < out.size(); ++k) CHECK(out[k - 1].log_likelihood >= out[k].log_likelihood);
      CHECK(out.front().log_likelihood >= g.log_likelihood - 1e-12);
    }
  }
}

TEST_CASE("trie-constrained decoding only emits listed sequences") {
  TokenTrie trie;
  trie.insert({4, 5, kEos});
  trie.insert({4, 6, kEos});
  trie.insert({7, kEos});
  CHECK(trie.size() == 3);
  CHECK(trie.next({}) == std::vector<int>{4, 7});
  CHECK(trie.next({4}) == std::vector<int>{5, 6});
  CHECK(trie.next({9}).empty());
  const auto out = beam_search(hashed(5, 10), 10, 5, 4, 0.0, [&](const std::vector<int>& p) { return trie.next(p); });
  CHECK(out.size() == 3);
  for (const auto& h : out) CHECK(h.tokens.back() == kEos);
}

TEST_CASE("length normalisation divides by length^alpha") {
  Hypothesis h{{4, 5, 2}, -3.0, true};
  CHECK(hypothesis_score(h, 0.0) == -3.0);
  CHECK(std::abs(hypothesis_score(h, 1.0) - -1.0) < 1e-12);
  DecodeConfig c;
  c.length_alpha = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DecodeConfig::from_json(nlohmann::json{{"beams", 3}, {"constraint", "item_trie"}});
  CHECK(c.beams == 3);
  CHECK(c.constraint == DecodeConstraint::ItemTrie);
  CHECK_THROWS_AS(DecodeConfig::from_json(nlohmann::json{{"constraint", "magic"}}), ConfigError);
}

TEST_CASE("recommend with the item trie yields valid, pooled, unique items") {
  MicroWorld w = make_world(tiny_run_config());
  const DecodeContext ctx{w.corpus, w.templates, w.nbr()};
  DecodeConfig dc;
  dc.beams = 4;
  dc.constraint = DecodeConstraint::ItemTrie;
  for (const auto& ex : w.examples.test[static_cast<std::size_t>(Task::TopN)]) {
    const auto rec = recommend(*w.model, ctx, ex, dc);
    CHECK(rec.invalid == 0);
    CHECK(rec.items.size() == 4);
    std::set<int> seen;
    for (const auto& r : rec.items) {
      CHECK(std::find(ex.pool.begin(), ex.pool.end(), r.item) != ex.pool.end());
      CHECK(seen.insert(r.item).second);
    }
  }
  const auto& seq = w.examples.test[static_cast<std::size_t>(Task::Sequential)].front();
  const auto a = recommend(*w.model, ctx, seq, dc);
  const auto b = recommend(*w.model, ctx, seq, dc);
  REQUIRE(a.items.size() == b.items.size());
  for (std::size_t k = 0; k < a.items.size(); ++k) CHECK(a.items[k].item == b.items[k].item);
  CHECK_THROWS(recommend(*w.model, ctx, w.examples.test[static_cast<std::size_t>(Task::Explanation)].front(), dc));
}

TEST_CASE("unconstrained decoding counts invalid generations") {
  MicroWorld w = make_world(tiny_run_config());
  const DecodeContext ctx{w.corpus, w.templates, w.nbr()};
  DecodeConfig dc;
  dc.beams = 6;
  const auto rec = recommend(*w.model, ctx, w.examples.test[0].front(), dc);
  CHECK(rec.items.size() + rec.invalid + rec.duplicates == 6);
}

TEST_CASE("explain reproduces an overfit sentence") {
  RunConfig c = tiny_run_config();
  c.tasks = {Task::Explanation};
  c.train.epochs = 150;
  c.train.learning_rate = 1e-2;
  c.model.d_model = 16;
  c.model.composer.heads = 2;
  MicroWorld w = make_world(c);
  auto& list = w.examples.train[static_cast<std::size_t>(Task::Explanation)];
  REQUIRE(!list.empty());
  TaskExample only = list.front();
  // Synthetic sentences have three words; BLEU-4 needs at least one 4-gram.
  only.target_text += " explain why";
  list = {only};
  const auto tr = prepare_examples(*w.model, w.templates, w.corpus, w.nbr(), w.examples.train);
  train(*w.model, tr, tr, c.resolved().train);
  const DecodeContext ctx{w.corpus, w.templates, w.nbr()};
  DecodeConfig dc;
  dc.beams = 1;
  const std::string out = explain(*w.model, ctx, only, dc);
  CHECK(out == only.target_text);
  dc.beams = 3;
  CHECK(explain(*w.model, ctx, only, dc) == explain(*w.model, ctx, only, dc));
  MetricsReport rep = score_explanations({only}, {out});
  CHECK(rep.at("BLEU-4") == doctest::Approx(1.0));
  CHECK(rep.at("ROUGE-L") == doctest::Approx(1.0));
}
