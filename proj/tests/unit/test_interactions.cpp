#include <doctest.h>

#include <set>
#include <sstream>

#include "../support.hpp"

using namespace cuprec;

namespace {

std::vector<InteractionRecord> parse(const std::string& text) {
  std::istringstream in(text);
  return parse_records(in);
}

InteractionRecord rec(std::string u, std::string i, double r, std::int64_t ts) {
  InteractionRecord x;
  x.user_id = std::move(u);
  x.item_id = std::move(i);
  x.rating = r;
  x.timestamp = ts;
  return x;
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("parse_records maps fields directly") {
  const auto r = parse(R"({"user":"u1","item":"i9","rating":5,"ts":100})" "\n");
  REQUIRE(r.size() == 1);
  CHECK(r[0].user_id == "u1");
  CHECK(r[0].item_id == "i9");
  CHECK(r[0].rating == 5.0);
  CHECK(r[0].timestamp == 100);
  CHECK_FALSE(r[0].explanation.has_value());
  CHECK(r[0].line == 1);
}

TEST_CASE("parse_records rejects bad lines by number") {
  CHECK(error_of(R"({"user":"","item":"i9","rating":5,"ts":100})") == "empty user_id at line 1");
  const std::string good = R"({"user":"u1","item":"i1","rating":4,"ts":1})" "\n";
  const std::string msg = error_of(good + good + good + "{not json}\n");
  CHECK(msg.find("line 4") != std::string::npos);
  CHECK(error_of(R"({"user":"u","item":"i","rating":6,"ts":1})").find("rating") != std::string::npos);
  CHECK(error_of(R"({"user":"u","item":"i","rating":0.5,"ts":1})").find("rating") != std::string::npos);
  CHECK(error_of(R"({"user":"u","item":"i","rating":3,"ts":1.5})").find("ts") != std::string::npos);
  CHECK(error_of(R"({"user":"u","item":"i","rating":3})").find("ts") != std::string::npos);
  CHECK(error_of(R"({"user":"a b","item":"i","rating":3,"ts":1})").find("user") != std::string::npos);
}

TEST_CASE("parse then serialize is a fixed point") {
  const std::string text =
      R"({"user":"u1","item":"i9","rating":5,"ts":100,"exp":"nice fit"})" "\n"
      R"({"user":"u2","item":"i3","rating":2.5,"ts":-4})" "\n";
  const auto once = parse(text);
  const auto twice = parse(serialize_records(once));
  CHECK(once == twice);
  CHECK(serialize_records(twice) == serialize_records(once));
}

TEST_CASE("build_corpus orders sequences and applies last write") {
  std::vector<InteractionRecord> rs = {rec("u", "c", 3, 30), rec("u", "a", 3, 10), rec("u", "b", 3, 20),
                                       rec("u", "a", 1, 40)};
  auto b = build_corpus(rs).corpus;
  REQUIRE(b.num_users() == 1);
  std::vector<std::string> order;
  for (int i : b.sequences[0]) order.push_back(b.items[static_cast<std::size_t>(i)]);
  CHECK(order == std::vector<std::string>{"a", "b", "c", "a"});
  bool found = false;
  for (const auto& o : b.feedback)
    if (b.items[static_cast<std::size_t>(o.item)] == "a") {
      CHECK(o.rating == 1.0);
      found = true;
    }
  CHECK(found);
}

TEST_CASE("equal timestamps break ties by item id") {
  auto b = build_corpus({rec("u", "z", 3, 5), rec("u", "m", 3, 5), rec("u", "a", 3, 5)}).corpus;
  std::vector<std::string> order;
  for (int i : b.sequences[0]) order.push_back(b.items[static_cast<std::size_t>(i)]);
  CHECK(order == std::vector<std::string>{"a", "m", "z"});
}

TEST_CASE("short users are dropped and reported") {
  std::vector<InteractionRecord> rs;
  for (int u = 0; u < 5; ++u)
    for (int k = 0; k < (u == 2 ? 2 : 3); ++k) rs.push_back(rec("u" + std::to_string(u), "i" + std::to_string(k), 4, k));
  const auto b = build_corpus(rs);
  CHECK(b.corpus.num_users() == 4);
  CHECK(b.dropped_users == std::vector<std::string>{"u2"});
  CHECK(b.corpus.user_index.count("u2") == 0);

  try {
    build_corpus({rec("x", "a", 3, 1), rec("x", "b", 3, 2)});
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()) == "no trainable users");
  }
}

TEST_CASE("leave-one-out splits") {
  auto c = build_corpus({rec("u", "a", 3, 1), rec("u", "b", 3, 2), rec("u", "c", 3, 3), rec("u", "d", 3, 4),
                         rec("v", "a", 3, 1), rec("v", "b", 3, 2), rec("v", "c", 3, 3)})
               .corpus;
  const auto s = build_splits(c);
  const auto id = [&](const char* x) { return c.item_index.at(x); };
  CHECK(s.users[0].train == std::vector<int>{id("a"), id("b")});
  CHECK(s.users[0].validation == id("c"));
  CHECK(s.users[0].test == id("d"));
  CHECK(s.users[1].train == std::vector<int>{id("a")});
  CHECK(s.users[1].validation == id("b"));
  CHECK(s.users[1].test == id("c"));
  const auto again = build_splits(c);
  CHECK(again.users[0].train == s.users[0].train);
}

TEST_CASE("sequential examples enumerate prefixes") {
  auto c = build_corpus({rec("u", "a", 3, 1), rec("u", "b", 3, 2), rec("u", "c", 3, 3), rec("u", "d", 3, 4),
                         rec("u", "e", 3, 5)})
               .corpus;
  const auto s = build_splits(c);
  const auto ex = make_examples(c, s, Task::Sequential, Phase::Train, 100, 1);
  REQUIRE(ex.size() == 2);
  CHECK(ex[0].history == std::vector<int>{0});
  CHECK(ex[0].item == 1);
  CHECK(ex[1].history == std::vector<int>{0, 1});
  CHECK(ex[1].item == 2);
  const auto val = make_examples(c, s, Task::Sequential, Phase::Validation, 100, 1);
  REQUIRE(val.size() == 1);
  CHECK(val[0].history == std::vector<int>{0, 1, 2});
  CHECK(val[0].item == 3);
}

TEST_CASE("topn pools hold the positive once and only unseen negatives") {
  SynthConfig sc;
  sc.num_clusters = 3;
  sc.items_per_cluster = 60;
  sc.users_per_cluster = 4;
  const Corpus c = synth_corpus(sc);
  const auto s = build_splits(c);
  const auto ex = make_examples(c, s, Task::TopN, Phase::Test, 100, 42);
  REQUIRE(ex.size() == c.num_users());
  for (const auto& e : ex) {
    CHECK(e.pool.size() == 100);
    CHECK(std::count(e.pool.begin(), e.pool.end(), e.item) == 1);
    const auto& seq = c.sequences[static_cast<std::size_t>(e.user)];
    const std::set<int> seen(seq.begin(), seq.end());
    for (int i : e.pool)
      if (i != e.item) CHECK(seen.count(i) == 0);
    CHECK(std::set<int>(e.pool.begin(), e.pool.end()).size() == e.pool.size());
  }
  CHECK(make_examples(c, s, Task::TopN, Phase::Test, 100, 42) == ex);
  CHECK_THROWS_AS(make_examples(c, s, Task::TopN, Phase::Test, 100, std::nullopt), ConfigError);
  CHECK_THROWS(make_examples(c, s, Task::TopN, Phase::Test, 1, 3));
}

TEST_CASE("no held-out item leaks into a training target") {
  SynthConfig sc;
  sc.noise = 0.3;
  const Corpus c = synth_corpus(sc);
  const auto s = build_splits(c);
  for (Task t : {Task::Sequential, Task::TopN, Task::Explanation}) {
    for (const auto& e : make_examples(c, s, t, Phase::Train, 30, 9)) {
      const auto& u = s.users[static_cast<std::size_t>(e.user)];
      const auto& seq = c.sequences[static_cast<std::size_t>(e.user)];
      // A held-out item can still be a target when it also occurs in the train region.
      const bool in_train = std::find(u.train.begin(), u.train.end(), e.item) != u.train.end();
      CHECK(in_train);
      CHECK(u.train.size() + 2 == seq.size());
    }
  }
}

TEST_CASE("synthetic corpus follows its clusters") {
  SynthConfig one;
  one.num_clusters = 1;
  one.items_per_cluster = 3;
  one.users_per_cluster = 6;
  one.seq_len = 7;
  one.noise = 0.0;
  const Corpus c = synth_corpus(one);
  std::map<int, int> succ;
  for (const auto& seq : c.sequences)
    for (std::size_t k = 0; k + 1 < seq.size(); ++k) {
      auto [it, fresh] = succ.emplace(seq[k], seq[k + 1]);
      CHECK(it->second == seq[k + 1]);
    }
  CHECK(succ.size() == 3);

  SynthConfig two;
  two.num_clusters = 2;
  two.noise = 0.0;
  const Corpus d = synth_corpus(two);
  std::array<std::set<int>, 2> items;
  for (std::size_t u = 0; u < d.num_users(); ++u)
    for (int i : d.sequences[u]) items[static_cast<std::size_t>(synth_cluster_of_user(two, static_cast<int>(u)))].insert(i);
  for (int i : items[0]) CHECK(items[1].count(i) == 0);

  CHECK(serialize_records(synth_records(two)) == serialize_records(synth_records(two)));
  for (const auto& r : synth_records(two)) {
    CHECK(r.rating == 5.0);
    REQUIRE(r.explanation.has_value());
    CHECK(r.explanation->rfind("great ", 0) == 0);
  }
}

TEST_CASE("corpus document round trip") {
  const Corpus c = synth_corpus(cuprec::testing::tiny_synth());
  const auto s = build_splits(c);
  const auto j = corpus_to_json(c, s);
  CHECK(j.at("schema_version") == kCorpusSchemaVersion);
  const auto [c2, s2] = corpus_from_json(j);
  CHECK(c2.users == c.users);
  CHECK(c2.sequences == c.sequences);
  CHECK(corpus_to_json(c2, s2) == j);
  auto bad = j;
  bad["schema_version"] = 99;
  CHECK_THROWS_AS(corpus_from_json(bad), DataError);
}

TEST_CASE("templates render ids with sigils") {
  auto c = build_corpus({rec("7", "a", 3, 1), rec("7", "b", 3, 2), rec("7", "c", 3, 3)}).corpus;
  TaskExample e;
  e.task = Task::Sequential;
  e.user = 0;
  e.history = {0, 1};
  e.item = 2;
  CHECK(render_input(PromptTemplates::defaults(), c, e) == "user_7 has interacted with item_a item_b predict the next item");
  CHECK(render_input(PromptTemplates::defaults(), c, e, 1) == "user_7 has interacted with item_b predict the next item");
  CHECK(render_target(c, e) == "item_c");
}
