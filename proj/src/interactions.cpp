#include "cuprec/interactions.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace cuprec {

namespace {

std::string at_line(std::size_t line) { return " at line " + std::to_string(line); }

bool has_space(const std::string& s) {
  return std::any_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

std::string require_string(const nlohmann::json& obj, const char* key, const char* field,
                           std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw DataError(std::string("missing ") + field + at_line(line));
  if (!it->is_string()) throw DataError(std::string("non-string ") + field + at_line(line));
  auto value = it->get<std::string>();
  if (value.empty()) throw DataError(std::string("empty ") + field + at_line(line));
  if (has_space(value)) throw DataError(std::string("whitespace in ") + field + at_line(line));
  return value;
}

}  // namespace

bool operator==(const InteractionRecord& a, const InteractionRecord& b) {
  return a.user_id == b.user_id && a.item_id == b.item_id && a.rating == b.rating &&
         a.timestamp == b.timestamp && a.explanation == b.explanation;
}

std::vector<InteractionRecord> parse_records(std::istream& in) {
  std::vector<InteractionRecord> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
      throw DataError("malformed JSON" + at_line(line));
    }
    if (!obj.is_object()) throw DataError("record is not an object" + at_line(line));

    InteractionRecord rec;
    rec.line = line;
    rec.user_id = require_string(obj, "user", "user_id", line);
    rec.item_id = require_string(obj, "item", "item_id", line);

    auto rating = obj.find("rating");
    if (rating == obj.end() || !rating->is_number())
      throw DataError("missing or non-numeric rating" + at_line(line));
    rec.rating = rating->get<double>();
    if (!(rec.rating >= 1.0 && rec.rating <= 5.0))
      throw DataError("rating out of range [1,5]" + at_line(line));

    auto ts = obj.find("ts");
    if (ts == obj.end() || !ts->is_number_integer())
      throw DataError("missing or non-integer ts" + at_line(line));
    rec.timestamp = ts->get<std::int64_t>();

    if (auto exp = obj.find("exp"); exp != obj.end() && !exp->is_null()) {
      if (!exp->is_string()) throw DataError("non-string exp" + at_line(line));
      rec.explanation = exp->get<std::string>();
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<InteractionRecord> parse_records_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return parse_records(in);
}

std::string serialize_records(const std::vector<InteractionRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json obj;
    obj["user"] = r.user_id;
    obj["item"] = r.item_id;
    obj["rating"] = r.rating;
    obj["ts"] = r.timestamp;
    if (r.explanation) obj["exp"] = *r.explanation;
    out += obj.dump();
    out += '\n';
  }
  return out;
}

const std::string* Corpus::explanation(int user, int item) const {
  auto it = explanations.find({user, item});
  return it == explanations.end() ? nullptr : &it->second;
}

CorpusBuild build_corpus(const std::vector<InteractionRecord>& records) {
  if (records.empty()) throw DataError("no records");

  // Group by user, keeping first-appearance order of users.
  std::vector<std::string> user_order;
  std::unordered_map<std::string, std::vector<std::size_t>> by_user;
  for (std::size_t k = 0; k < records.size(); ++k) {
    auto [it, inserted] = by_user.try_emplace(records[k].user_id);
    if (inserted) user_order.push_back(records[k].user_id);
    it->second.push_back(k);
  }

  CorpusBuild build;
  std::vector<std::string> kept;
  for (const auto& uid : user_order) {
    if (by_user[uid].size() < kMinSequenceLength)
      build.dropped_users.push_back(uid);
    else
      kept.push_back(uid);
  }
  if (kept.empty()) throw DataError("no trainable users");

  Corpus& c = build.corpus;
  std::set<std::string> kept_set(kept.begin(), kept.end());
  // Items and users in first-appearance order over the surviving records.
  for (const auto& r : records) {
    if (!kept_set.count(r.user_id)) continue;
    if (c.user_index.try_emplace(r.user_id, static_cast<int>(c.users.size())).second)
      c.users.push_back(r.user_id);
    if (c.item_index.try_emplace(r.item_id, static_cast<int>(c.items.size())).second)
      c.items.push_back(r.item_id);
  }

  c.sequences.resize(c.users.size());
  std::map<std::pair<int, int>, double> ratings;
  for (std::size_t u = 0; u < c.users.size(); ++u) {
    auto idx = by_user[c.users[u]];
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      const auto& ra = records[a];
      const auto& rb = records[b];
      if (ra.timestamp != rb.timestamp) return ra.timestamp < rb.timestamp;
      return ra.item_id < rb.item_id;
    });
    for (std::size_t k : idx) c.sequences[u].push_back(c.item_index.at(records[k].item_id));
  }
  // Last write (file order) wins for both ratings and explanations.
  for (const auto& r : records) {
    auto uit = c.user_index.find(r.user_id);
    if (uit == c.user_index.end()) continue;
    std::pair<int, int> key{uit->second, c.item_index.at(r.item_id)};
    ratings[key] = r.rating;
    if (r.explanation) c.explanations[key] = *r.explanation;
  }
  c.feedback.reserve(ratings.size());
  for (const auto& [key, rating] : ratings) c.feedback.push_back({key.first, key.second, rating});
  return build;
}

SplitSet build_splits(const Corpus& corpus) {
  SplitSet s;
  s.users.reserve(corpus.sequences.size());
  for (const auto& seq : corpus.sequences) {
    if (seq.size() < kMinSequenceLength) throw DataError("sequence shorter than 3");
    UserSplit us;
    us.train.assign(seq.begin(), seq.end() - 2);
    us.validation = seq[seq.size() - 2];
    us.test = seq.back();
    s.users.push_back(std::move(us));
  }
  return s;
}

const char* task_name(Task task) {
  switch (task) {
    case Task::Sequential: return "sequential";
    case Task::TopN: return "topn";
    case Task::Explanation: return "explanation";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  if (name == "sequential") return Task::Sequential;
  if (name == "topn") return Task::TopN;
  if (name == "explanation") return Task::Explanation;
  throw ConfigError("unknown task '" + name + "'");
}

Phase parse_phase(const std::string& name) {
  if (name == "train") return Phase::Train;
  if (name == "val" || name == "validation") return Phase::Validation;
  if (name == "test") return Phase::Test;
  throw ConfigError("unknown phase '" + name + "'");
}

bool operator==(const TaskExample& a, const TaskExample& b) {
  return a.task == b.task && a.user == b.user && a.history == b.history && a.pool == b.pool &&
         a.item == b.item && a.target_text == b.target_text;
}

PromptTemplates PromptTemplates::defaults() {
  PromptTemplates t;
  t.version = 1;
  t.sequential = "{user} has interacted with {history} predict the next item";
  t.topn = "pick the best item for {user} from {candidates}";
  t.explanation = "explain why {user} enjoys {item}";
  return t;
}

PromptTemplates PromptTemplates::from_json(const nlohmann::json& j) {
  PromptTemplates t;
  try {
    t.version = j.at("version").get<int>();
    t.sequential = j.at("sequential").get<std::string>();
    t.topn = j.at("topn").get<std::string>();
    t.explanation = j.at("explanation").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad template file: ") + e.what());
  }
  return t;
}

nlohmann::json PromptTemplates::to_json() const {
  return {{"version", version}, {"sequential", sequential}, {"topn", topn},
          {"explanation", explanation}};
}

std::string user_token(const Corpus& corpus, int user) { return "user_" + corpus.users.at(user); }
std::string item_token(const Corpus& corpus, int item) { return "item_" + corpus.items.at(item); }

namespace {

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
}

std::string join_items(const Corpus& corpus, const std::vector<int>& items, std::size_t skip) {
  std::string out;
  for (std::size_t k = std::min(skip, items.size()); k < items.size(); ++k) {
    if (!out.empty()) out += ' ';
    out += item_token(corpus, items[k]);
  }
  return out;
}

}  // namespace

std::string render_input(const PromptTemplates& templates, const Corpus& corpus,
                         const TaskExample& example, std::size_t skip_history) {
  std::string text;
  switch (example.task) {
    case Task::Sequential:
      text = templates.sequential;
      replace_all(text, "{history}", join_items(corpus, example.history, skip_history));
      break;
    case Task::TopN:
      text = templates.topn;
      replace_all(text, "{candidates}", join_items(corpus, example.pool, 0));
      break;
    case Task::Explanation:
      text = templates.explanation;
      replace_all(text, "{item}", item_token(corpus, example.item));
      break;
  }
  replace_all(text, "{user}", user_token(corpus, example.user));
  return text;
}

std::string render_target(const Corpus& corpus, const TaskExample& example) {
  if (example.task == Task::Explanation) return example.target_text;
  return item_token(corpus, example.item);
}

namespace {

std::vector<int> sample_pool(const Corpus& corpus, int user, int positive, std::size_t pool_size,
                             std::mt19937_64& rng) {
  std::vector<char> seen(corpus.num_items(), 0);
  for (int i : corpus.sequences[user]) seen[i] = 1;
  std::vector<int> candidates;
  for (std::size_t i = 0; i < corpus.num_items(); ++i)
    if (!seen[i]) candidates.push_back(static_cast<int>(i));
  if (candidates.size() < pool_size - 1)
    throw DataError("user " + corpus.users[user] + " has only " +
                    std::to_string(candidates.size()) + " unseen items for a pool of " +
                    std::to_string(pool_size));
  // Partial Fisher-Yates: the first pool_size-1 slots are a uniform sample.
  for (std::size_t k = 0; k + 1 < pool_size; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, candidates.size() - 1);
    std::swap(candidates[k], candidates[pick(rng)]);
  }
  std::vector<int> pool(candidates.begin(), candidates.begin() + (pool_size - 1));
  pool.push_back(positive);
  std::shuffle(pool.begin(), pool.end(), rng);
  return pool;
}

}  // namespace

std::vector<TaskExample> make_examples(const Corpus& corpus, const SplitSet& splits, Task task,
                                       Phase phase, std::size_t pool_size,
                                       std::optional<std::uint64_t> seed) {
  if (splits.users.size() != corpus.num_users())
    throw DataError("split does not match corpus");
  if (task == Task::TopN) {
    if (pool_size < 2) throw ConfigError("pool_size must be >= 2");
    if (!seed) throw ConfigError("seed required for TopN pool sampling");
  }

  std::vector<TaskExample> out;
  for (std::size_t u = 0; u < splits.users.size(); ++u) {
    const auto& s = splits.users[u];
    const int user = static_cast<int>(u);
    switch (task) {
      case Task::Sequential: {
        if (phase == Phase::Train) {
          for (std::size_t j = 1; j < s.train.size(); ++j) {
            TaskExample ex{Task::Sequential, user, {}, {}, s.train[j], {}};
            ex.history.assign(s.train.begin(), s.train.begin() + j);
            out.push_back(std::move(ex));
          }
        } else {
          TaskExample ex{Task::Sequential, user, s.train, {}, s.validation, {}};
          if (phase == Phase::Test) {
            ex.history.push_back(s.validation);
            ex.item = s.test;
          }
          out.push_back(std::move(ex));
        }
        break;
      }
      case Task::TopN: {
        std::mt19937_64 rng(derive_seed(derive_seed(*seed, static_cast<std::uint64_t>(phase)), u));
        if (phase == Phase::Train) {
          for (int positive : s.train) {
            TaskExample ex{Task::TopN, user, {}, {}, positive, {}};
            ex.pool = sample_pool(corpus, user, positive, pool_size, rng);
            out.push_back(std::move(ex));
          }
        } else {
          int positive = phase == Phase::Test ? s.test : s.validation;
          TaskExample ex{Task::TopN, user, {}, {}, positive, {}};
          ex.pool = sample_pool(corpus, user, positive, pool_size, rng);
          out.push_back(std::move(ex));
        }
        break;
      }
      case Task::Explanation: {
        if (phase == Phase::Train) {
          std::set<int> done;
          for (int item : s.train) {
            if (!done.insert(item).second) continue;
            if (const auto* e = corpus.explanation(user, item))
              out.push_back({Task::Explanation, user, {}, {}, item, *e});
          }
        } else {
          int item = phase == Phase::Test ? s.test : s.validation;
          if (const auto* e = corpus.explanation(user, item))
            out.push_back({Task::Explanation, user, {}, {}, item, *e});
        }
        break;
      }
    }
  }
  return out;
}

namespace {

const char* const kClusterAdjectives[] = {
    "cozy", "sturdy", "vivid", "gentle", "sleek", "rustic", "bold", "quiet",
    "bright", "classic", "playful", "elegant", "compact", "rugged", "fresh", "smooth"};
constexpr int kNumAdjectives = sizeof(kClusterAdjectives) / sizeof(kClusterAdjectives[0]);

void validate(const SynthConfig& c) {
  if (c.num_clusters < 1 || c.users_per_cluster < 1 || c.items_per_cluster < 1)
    throw ConfigError("synth counts must be >= 1");
  if (c.seq_len < static_cast<int>(kMinSequenceLength))
    throw ConfigError("synth seq_len must be >= 3");
  if (!(c.noise >= 0.0 && c.noise < 1.0)) throw ConfigError("synth noise must lie in [0,1)");
}

}  // namespace

int synth_cluster_of_user(const SynthConfig& config, int user_index) {
  return user_index / config.users_per_cluster;
}

std::vector<InteractionRecord> synth_records(const SynthConfig& config) {
  validate(config);
  std::mt19937_64 rng(derive_seed(config.seed, "synth"));
  const int total_items = config.num_clusters * config.items_per_cluster;

  // next[i]: successor of item i on its cluster's cycle.
  std::vector<int> next(total_items);
  for (int k = 0; k < config.num_clusters; ++k) {
    std::vector<int> order(config.items_per_cluster);
    std::iota(order.begin(), order.end(), k * config.items_per_cluster);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t j = 0; j < order.size(); ++j) next[order[j]] = order[(j + 1) % order.size()];
  }

  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> any_item(0, total_items - 1);
  std::uniform_int_distribution<int> in_cluster(0, config.items_per_cluster - 1);

  std::vector<InteractionRecord> out;
  const int num_users = config.num_clusters * config.users_per_cluster;
  for (int u = 0; u < num_users; ++u) {
    const int cluster = synth_cluster_of_user(config, u);
    const std::string sentence =
        std::string("great ") + kClusterAdjectives[cluster % kNumAdjectives] + " item";
    int state = cluster * config.items_per_cluster + in_cluster(rng);
    for (int t = 0; t < config.seq_len; ++t) {
      int item = state;
      if (config.noise > 0.0 && coin(rng) < config.noise) item = any_item(rng);
      const bool own = item / config.items_per_cluster == cluster;
      InteractionRecord r;
      r.user_id = std::to_string(u + 1);
      r.item_id = std::to_string(item + 1);
      r.rating = own ? 5.0 : 1.0;
      r.timestamp = 1000 + 10 * t;
      r.explanation = sentence;
      out.push_back(std::move(r));
      state = next[state];
    }
  }
  return out;
}

Corpus synth_corpus(const SynthConfig& config) { return build_corpus(synth_records(config)).corpus; }

nlohmann::json corpus_to_json(const Corpus& corpus, const SplitSet& splits) {
  nlohmann::json j;
  j["schema_version"] = kCorpusSchemaVersion;
  j["users"] = corpus.users;
  j["items"] = corpus.items;
  j["sequences"] = corpus.sequences;
  auto& exps = j["explanations"] = nlohmann::json::array();
  for (const auto& [key, text] : corpus.explanations) exps.push_back({key.first, key.second, text});
  auto& fb = j["feedback"] = nlohmann::json::array();
  for (const auto& o : corpus.feedback) fb.push_back({o.user, o.item, o.rating});
  auto& sp = j["splits"] = nlohmann::json::array();
  for (const auto& s : splits.users)
    sp.push_back({{"train", s.train}, {"validation", s.validation}, {"test", s.test}});
  return j;
}

std::pair<Corpus, SplitSet> corpus_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kCorpusSchemaVersion)
      throw DataError("unsupported corpus schema_version");
    Corpus c;
    c.users = j.at("users").get<std::vector<std::string>>();
    c.items = j.at("items").get<std::vector<std::string>>();
    for (std::size_t k = 0; k < c.users.size(); ++k) c.user_index[c.users[k]] = static_cast<int>(k);
    for (std::size_t k = 0; k < c.items.size(); ++k) c.item_index[c.items[k]] = static_cast<int>(k);
    c.sequences = j.at("sequences").get<std::vector<std::vector<int>>>();
    for (const auto& e : j.at("explanations"))
      c.explanations[{e.at(0).get<int>(), e.at(1).get<int>()}] = e.at(2).get<std::string>();
    for (const auto& o : j.at("feedback"))
      c.feedback.push_back({o.at(0).get<int>(), o.at(1).get<int>(), o.at(2).get<double>()});
    SplitSet s;
    for (const auto& u : j.at("splits"))
      s.users.push_back({u.at("train").get<std::vector<int>>(), u.at("validation").get<int>(),
                         u.at("test").get<int>()});
    if (s.users.size() != c.users.size() || c.sequences.size() != c.users.size())
      throw DataError("corpus document has inconsistent sizes");
    for (const auto& seq : c.sequences)
      for (int i : seq)
        if (i < 0 || static_cast<std::size_t>(i) >= c.items.size())
          throw DataError("corpus document references unknown item");
    return {std::move(c), std::move(s)};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed corpus document: ") + e.what());
  }
}

}  // namespace cuprec
