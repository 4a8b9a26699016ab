#include <doctest.h>

#include "../support.hpp"

using namespace cuprec;

TEST_CASE("hit ratio cases") {
  const std::vector<int> ranked{10, 11, 12, 13, 14, 15, 16};
  CHECK(hit_ratio_at_k(ranked, 10, 5) == 1.0);
  CHECK(hit_ratio_at_k(ranked, 15, 5) == 0.0);
  CHECK(hit_ratio_at_k(ranked, 99, 5) == 0.0);
  CHECK(hit_ratio_at_k({}, 1, 5) == 0.0);
  CHECK_THROWS(hit_ratio_at_k(ranked, 10, 0));
}

TEST_CASE("ndcg cases") {
  std::vector<int> ranked(12);
  std::iota(ranked.begin(), ranked.end(), 0);
  CHECK(ndcg_at_k(ranked, 0, 5) == 1.0);
  CHECK(ndcg_at_k(ranked, 2, 3) == 0.5);
  CHECK(ndcg_at_k(ranked, 10, 10) == 0.0);
  for (int t = 0; t < 12; ++t)
    for (int k = 1; k <= 12; ++k) {
      const double n = ndcg_at_k(ranked, t, k), h = hit_ratio_at_k(ranked, t, k);
      CHECK(0.0 <= n);
      CHECK(n <= h);
      CHECK(h <= 1.0);
    }
  std::vector<int> tail = ranked;
  tail[8] = 100;
  CHECK(ndcg_at_k(tail, 3, 5) == ndcg_at_k(ranked, 3, 5));
}

TEST_CASE("text normalisation") {
  CHECK(normalize_text("  The CAT, sat!  ") == std::vector<std::string>{"the", "cat", "sat"});
  CHECK(normalize_text("...").empty());
}

TEST_CASE("bleu cases") {
  CHECK(bleu4("a fine red bike today", "a fine red bike today") == 1.0);
  CHECK(bleu4("alpha beta gamma delta", "one two three four") <= 1e-6);
  CHECK(bleu4("", "anything") == 0.0);
  const double hand = std::pow((5.0 / 6) * (3.0 / 5) * (1.0 / 4) * (1e-9 / 3), 0.25);
  CHECK(std::abs(bleu4("the cat sat on the mat", "the cat is on the mat") - hand) < 1e-6);
  // Brevity penalty: 4-word candidate against an 8-word reference.
  const double bp = std::exp(1.0 - 8.0 / 4.0);
  CHECK(std::abs(bleu4("w x y z", "w x y z a b c d") - bp) < 1e-12);
  CHECK(bleu4("the the the the", "the cat") <= 1.0);
}

TEST_CASE("rouge cases") {
  for (auto v : {RougeVariant::R1, RougeVariant::R2, RougeVariant::RL}) {
    CHECK(rouge("great sturdy item", "great sturdy item", v) == 1.0);
    CHECK(rouge("one two", "three four", v) == 0.0);
    CHECK(rouge("", "", v) == 0.0);
  }
  CHECK(std::abs(rouge("a b c d", "a c d e", RougeVariant::RL) - 0.75) < 1e-12);
  CHECK(std::abs(rouge("a b c d", "a c d e", RougeVariant::R1) - 0.75) < 1e-12);
  // Bigrams {ab,bc,cd} vs {ac,cd,de}: one shared.
  CHECK(std::abs(rouge("a b c d", "a c d e", RougeVariant::R2) - 1.0 / 3) < 1e-12);
}

TEST_CASE("aggregation over examples") {
  std::vector<TaskExample> ex(4);
  for (int k = 0; k < 4; ++k) ex[static_cast<std::size_t>(k)].item = k;
  std::vector<std::vector<int>> perfect;
  for (int k = 0; k < 4; ++k) perfect.push_back({k, 9, 8});
  const auto rep = score_rankings(Task::TopN, ex, perfect);
  for (const auto& [name, v] : rep.values) CHECK(v == 1.0);
  CHECK(rep.count == 4);
  CHECK(rep.to_json()["metrics"].size() == 5);
  CHECK(rep.to_table(true).find("100.0000") != std::string::npos);
  CHECK_THROWS_AS(score_rankings(Task::Sequential, {}, {}), DataError);

  std::vector<std::vector<int>> second;
  for (int k = 0; k < 4; ++k) second.push_back({9, k});
  const auto r2 = score_rankings(Task::Sequential, ex, second);
  CHECK(r2.at("HR@5") == 1.0);
  CHECK(std::abs(r2.at("NDCG@5") - 1.0 / std::log2(3.0)) < 1e-12);
}

TEST_CASE("random ranker hit ratio matches k over P") {
  const int P = 10, k = 3, trials = 10000;
  std::mt19937_64 rng(2);
  std::vector<int> pool(P);
  std::iota(pool.begin(), pool.end(), 0);
  double hits = 0;
  for (int t = 0; t < trials; ++t) {
    std::shuffle(pool.begin(), pool.end(), rng);
    hits += hit_ratio_at_k(pool, 4, k);
  }
  const double p = 0.3, sigma = std::sqrt(p * (1 - p) / trials);
  CHECK(std::abs(hits / trials - p) <= 3 * sigma);
}
