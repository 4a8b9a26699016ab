#include <doctest.h>

#include <fstream>

#include <set>

#include "../support.hpp"

using namespace cuprec;
using namespace cuprec::testing;

TEST_CASE("id spans share one whole-word slot") {
  Vocabulary v;
  v.add_words("has interacted with");
  auto t = v.tokenize("user_1234");
  REQUIRE(t.ids.size() == 5);
  CHECK(t.ids[0] == v.user_sigil());
  CHECK(v.token(t.ids[1]) == "1");
  CHECK(std::set<int>(t.whole_word.begin(), t.whole_word.end()).size() == 1);

  t = v.tokenize("item_7 item_8");
  REQUIRE(t.whole_word.size() == 4);
  CHECK(t.whole_word[0] == t.whole_word[1]);
  CHECK(t.whole_word[2] == t.whole_word[3]);
  CHECK(t.whole_word[0] != t.whole_word[2]);
  CHECK(t.whole_word[0] >= 1);

  CHECK(v.detokenize(v.tokenize("item_05").ids) == "item_05");
  CHECK(v.detokenize(v.tokenize("user_12 has interacted with item_3").ids) == "user_12 has interacted with item_3");
}

TEST_CASE("unknown words map to UNK and are counted") {
  Vocabulary v;
  const auto t = v.tokenize("mystery item_42");
  CHECK(t.ids[0] == kUnk);
  CHECK(t.unknown == 1);
  CHECK(v.detokenize(std::vector<int>(t.ids.begin() + 1, t.ids.end())) == "item_42");
}

TEST_CASE("embed_input row layout and ablations") {
  RunConfig c = tiny_run_config();
  c.model.composer.prompt_len = 3;
  MicroWorld w = make_world(c);
  auto& m = *w.model;
  const auto& ex = w.examples.train[0].front();
  EncoderInput in = prepare_input(m, w.templates, w.corpus, w.nbr(), ex);
  in.tokens.resize(10);
  in.whole_word.resize(10);
  CHECK(m.embed_input_matrix(in).rows() == 16);
  CHECK(m.embed_input_matrix(in) == m.embed_input_matrix(in));

  RunConfig bare = c;
  bare.model.use_collab_prompt = false;
  bare.model.use_task_prompt = false;
  MicroWorld b = make_world(bare);
  EncoderInput bin = prepare_input(*b.model, b.templates, b.corpus, nullptr, b.examples.train[0].front());
  CHECK(bin.neighbors.empty());
  CHECK(static_cast<std::size_t>(b.model->embed_input_matrix(bin).rows()) == bin.tokens.size());
}

TEST_CASE("long histories are truncated from the oldest end") {
  RunConfig c = tiny_run_config();
  c.model.max_len = 20;
  MicroWorld w = make_world(c);
  TaskExample ex;
  ex.task = Task::Sequential;
  ex.user = 0;
  ex.history = {0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5};
  ex.item = 1;
  const auto in = prepare_input(*w.model, w.templates, w.corpus, w.nbr(), ex);
  CHECK(in.dropped_history > 0);
  CHECK(in.tokens.size() + static_cast<std::size_t>(w.model->config().prompt_rows()) <= 20);
  // The newest item survives.
  const auto tail = w.model->vocab().encode_id(kItemSigil, w.corpus.items[5]);
  const std::string text = w.model->vocab().detokenize(in.tokens);
  CHECK(text.find(item_token(w.corpus, 5)) != std::string::npos);
  (void)tail;
}

TEST_CASE("forward shape, degenerate network and causal mask") {
  MicroWorld w = make_world(tiny_run_config());
  auto& m = *w.model;
  const auto in = prepare_input(m, w.templates, w.corpus, w.nbr(), w.examples.train[0].front());
  const std::vector<int> dec{kBos, 4, 5, 6};
  const Eigen::MatrixXd logits = m.forward(in, dec);
  CHECK(logits.rows() == 4);
  CHECK(static_cast<std::size_t>(logits.cols()) == m.vocab_size());
  CHECK(logits.allFinite());

  std::vector<int> changed = dec;
  changed[3] = 9;
  const Eigen::MatrixXd other = m.forward(in, changed);
  CHECK((other.topRows(3) - logits.topRows(3)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((other.row(3) - logits.row(3)).cwiseAbs().maxCoeff() > 0.0);

  for (auto* p : m.parameters())
    if (p != &m.output_bias()) p->value.setZero();
  m.output_bias().value.setConstant(0.25);
  const Eigen::MatrixXd flat = m.forward(in, dec);
  for (Eigen::Index r = 0; r < flat.rows(); ++r) CHECK((flat.row(r).array() - flat(r, 0)).abs().maxCoeff() == 0.0);
}

TEST_CASE("nll_loss closed forms") {
  CHECK(std::abs(nll_loss(Eigen::MatrixXd::Zero(1, 10), {3}) - std::log(10.0)) < 1e-12);
  double last = 1e9;
  for (double mag : {1.0, 5.0, 20.0, 80.0}) {
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(1, 5);
    l(0, 2) = mag;
    const double v = nll_loss(l, {2});
    CHECK(v < last);
    last = v;
  }
  CHECK(last < 1e-30);

  Eigen::MatrixXd l{{1.0, 2.0, 0.5}, {0.0, -1.0, 3.0}, {9.0, 9.0, 9.0}};
  const double a = -std::log(std::exp(2.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(0.5)));
  const double b = -std::log(std::exp(3.0) / (std::exp(0.0) + std::exp(-1.0) + std::exp(3.0)));
  CHECK(std::abs(nll_loss(l, {1, 2, kPad}) - (a + b) / 2) < 1e-9);
}

TEST_CASE("task-alternated schedule") {
  const auto s = task_alternated_schedule({4, 4, 4}, 2, 7);
  std::string seq;
  for (const auto& b : s.batches) seq += "STE"[static_cast<int>(b.task)];
  CHECK(seq == "STESTE");
  for (const auto& b : s.batches) CHECK(b.indices.size() == 2);
  const auto again = task_alternated_schedule({4, 4, 4}, 2, 7);
  for (std::size_t k = 0; k < s.batches.size(); ++k) CHECK(again.batches[k].indices == s.batches[k].indices);

  const auto skipped = task_alternated_schedule({3, 0, 6}, 2, 1);
  CHECK(skipped.skipped == std::vector<Task>{Task::TopN});
  for (const auto& b : skipped.batches) CHECK(b.task != Task::TopN);
  // The larger task is exhausted exactly once; the smaller one wraps.
  std::size_t explanation_rows = 0;
  for (const auto& b : skipped.batches)
    if (b.task == Task::Explanation) explanation_rows += b.indices.size();
  CHECK(explanation_rows == 6);
  CHECK_THROWS_AS(task_alternated_schedule({0, 0, 0}, 2, 1), DataError);
}

TEST_CASE("training lowers the loss and keeps the composer frozen when unused") {
  RunConfig c = tiny_run_config();
  c.train.epochs = 30;
  MicroWorld w = make_world(c);
  auto& m = *w.model;
  const auto tr = prepare_examples(m, w.templates, w.corpus, w.nbr(), w.examples.train);
  const auto va = prepare_examples(m, w.templates, w.corpus, w.nbr(), w.examples.validation);
  CHECK(tr.total() >= 50);
  const auto rep = train(m, tr, va, c.resolved().train);
  CHECK(rep.train_loss.back() < rep.initial_train_loss);
  CHECK(rep.best_epoch >= 0);

  RunConfig off = tiny_run_config();
  off.model.use_collab_prompt = false;
  MicroWorld o = make_world(off);
  std::vector<Eigen::MatrixXd> before;
  for (auto* p : o.model->composer_parameters()) before.push_back(p->value);
  const auto otr = prepare_examples(*o.model, o.templates, o.corpus, nullptr, o.examples.train);
  train(*o.model, otr, otr, off.resolved().train);
  std::size_t k = 0;
  for (auto* p : o.model->composer_parameters()) {
    CHECK(p->value == before[k++]);
    CHECK(p->grad.isZero(0));
  }
}

TEST_CASE("training is bit-reproducible") {
  auto run = [] {
    MicroWorld w = make_world(tiny_run_config());
    const auto tr = prepare_examples(*w.model, w.templates, w.corpus, w.nbr(), w.examples.train);
    train(*w.model, tr, tr, tiny_run_config().resolved().train);
    return w.model->output_bias().value;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round trip and schema checks") {
  MicroWorld w = make_world(tiny_run_config());
  auto& m = *w.model;
  const auto in = prepare_input(m, w.templates, w.corpus, w.nbr(), w.examples.test[0].front());
  const auto dir = scratch_dir("model");
  const auto path = (dir / "m.bin").string();
  m.save(path);
  Seq2SeqModel back = Seq2SeqModel::load(path);
  CHECK(back.forward(in, {kBos, 4}) == m.forward(in, {kBos, 4}));
  CHECK(back.config() == m.config());

  ModelConfig other = m.config();
  other.d_model = 16;
  other.composer.model_dim = 16;
  CHECK_THROWS_AS(Seq2SeqModel::load(path, other), DataError);

  std::string bytes;
  {
    std::ifstream in_file(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in_file), {});
  }
  bytes[8] = 99;  // schema version field
  std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
  CHECK_THROWS_AS(Seq2SeqModel::load(path), DataError);
  std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes.substr(0, 40);
  CHECK_THROWS_AS(Seq2SeqModel::load(path), DataError);
}

TEST_CASE("model config validation") {
  ModelConfig c;
  c.composer.model_dim = c.d_model;
  CHECK_NOTHROW(c.validate());
  c.heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.composer.model_dim = 32;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(ModelConfig::from_json(ModelConfig{}.to_json()) == ModelConfig{});
}
