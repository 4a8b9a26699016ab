#include "cuprec/seq2seq.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "cuprec/binary_io.hpp"

namespace cuprec {

ModelConfig ModelConfig::reference_profile() {
  ModelConfig c;
  c.d_model = 512;
  c.layers = 6;
  c.heads = 8;
  c.ffn = 2048;
  c.composer.model_dim = 512;
  c.composer.user_dim = 512;
  return c;
}

void ModelConfig::validate() const {
  if (d_model < 1 || layers < 1 || heads < 1 || ffn < 1) throw ConfigError("model sizes must be >= 1");
  if (d_model % heads != 0) throw ConfigError("model heads must divide d_model");
  if (task_prompt_len < 1) throw ConfigError("task_prompt_len must be >= 1");
  if (composer.model_dim != d_model) throw ConfigError("composer width must equal d_model");
  composer.validate();
  if (max_len <= prompt_rows()) throw ConfigError("max_len leaves no room for tokens");
  if (!(init_std > 0)) throw ConfigError("init_std must be > 0");
}

int ModelConfig::prompt_rows() const {
  return (use_collab_prompt ? composer.prompt_len : 0) + (use_task_prompt ? task_prompt_len : 0);
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_model", d_model},
          {"layers", layers},
          {"heads", heads},
          {"ffn", ffn},
          {"max_len", max_len},
          {"task_prompt_len", task_prompt_len},
          {"composer",
           {{"variant", variant_name(composer.variant)},
            {"user_dim", composer.user_dim},
            {"prompt_len", composer.prompt_len},
            {"heads", composer.heads},
            {"literal_scale", composer.literal_scale}}},
          {"use_task_prompt", use_task_prompt},
          {"use_collab_prompt", use_collab_prompt},
          {"collab_first", collab_first},
          {"tune_user_embeddings", tune_user_embeddings},
          {"init_std", init_std},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.d_model = j.at("d_model").get<int>();
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn = j.at("ffn").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.task_prompt_len = j.at("task_prompt_len").get<int>();
    const auto& cj = j.at("composer");
    c.composer.variant = parse_variant(cj.at("variant").get<std::string>());
    c.composer.user_dim = cj.at("user_dim").get<int>();
    c.composer.prompt_len = cj.at("prompt_len").get<int>();
    c.composer.heads = cj.at("heads").get<int>();
    c.composer.literal_scale = cj.at("literal_scale").get<bool>();
    c.composer.model_dim = c.d_model;
    c.use_task_prompt = j.at("use_task_prompt").get<bool>();
    c.use_collab_prompt = j.at("use_collab_prompt").get<bool>();
    c.collab_first = j.at("collab_first").get<bool>();
    c.tune_user_embeddings = j.at("tune_user_embeddings").get<bool>();
    c.init_std = j.at("init_std").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  return c;
}

namespace {

ad::Mat gaussian(Eigen::Index rows, Eigen::Index cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, std);
  ad::Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = g(rng);
  return m;
}

struct Init {
  std::mt19937_64 rng;
  double std;

  ad::Param weight(const std::string& name, Eigen::Index r, Eigen::Index c) {
    return ad::Param(name, gaussian(r, c, std, rng));
  }
  static ad::Param zeros(const std::string& name, Eigen::Index r, Eigen::Index c) {
    return ad::Param(name, ad::Mat::Zero(r, c));
  }
  NormParams norm(const std::string& name, Eigen::Index d) {
    return {ad::Param(name + ".gain", ad::Mat::Ones(1, d)), zeros(name + ".bias", 1, d)};
  }
  AttentionParams attention(const std::string& name, Eigen::Index d) {
    return {weight(name + ".wq", d, d), zeros(name + ".bq", 1, d), weight(name + ".wk", d, d),
            zeros(name + ".bk", 1, d),  weight(name + ".wv", d, d), zeros(name + ".bv", 1, d),
            weight(name + ".wo", d, d), zeros(name + ".bo", 1, d)};
  }
  FeedForwardParams feed_forward(const std::string& name, Eigen::Index d, Eigen::Index f) {
    return {weight(name + ".w1", d, f), zeros(name + ".b1", 1, f), weight(name + ".w2", f, d),
            zeros(name + ".b2", 1, d)};
  }
};

void collect(std::vector<ad::Param*>& out, NormParams& n) {
  out.push_back(&n.gain);
  out.push_back(&n.bias);
}
void collect(std::vector<ad::Param*>& out, AttentionParams& a) {
  for (auto* p : {&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo}) out.push_back(p);
}
void collect(std::vector<ad::Param*>& out, FeedForwardParams& f) {
  for (auto* p : {&f.w1, &f.b1, &f.w2, &f.b2}) out.push_back(p);
}

}  // namespace

void Seq2SeqModel::allocate(std::size_t num_users) {
  const auto d = config_.d_model;
  const auto v = static_cast<Eigen::Index>(vocab_.size());
  Init init{std::mt19937_64(derive_seed(config_.seed, "model-init")), config_.init_std};
  token_emb_ = init.weight("token_emb", v, d);
  pos_emb_ = init.weight("pos_emb", config_.max_len, d);
  word_emb_ = init.weight("word_emb", config_.max_len + 1, d);
  task_prompt_ = init.weight("task_prompt", static_cast<Eigen::Index>(kNumTasks) * config_.task_prompt_len, d);
  user_emb_ = Init::zeros("user_emb", static_cast<Eigen::Index>(num_users), config_.composer.user_dim);
  out_bias_ = Init::zeros("out_bias", 1, v);
  encoder_.clear();
  decoder_.clear();
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "enc" + std::to_string(l);
    encoder_.push_back({init.norm(p + ".norm1", d), init.attention(p + ".attn", d), init.norm(p + ".norm2", d),
                        init.feed_forward(p + ".ff", d, config_.ffn)});
  }
  encoder_norm_ = init.norm("enc.norm", d);
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "dec" + std::to_string(l);
    decoder_.push_back({init.norm(p + ".norm1", d), init.attention(p + ".self", d), init.norm(p + ".norm2", d),
                        init.attention(p + ".cross", d), init.norm(p + ".norm3", d),
                        init.feed_forward(p + ".ff", d, config_.ffn)});
  }
  decoder_norm_ = init.norm("dec.norm", d);
  composer_ = ComposerParams::init(config_.composer, derive_seed(config_.seed, "composer"), config_.init_std);
}

Seq2SeqModel Seq2SeqModel::create(const ModelConfig& config, Vocabulary vocab,
                                  const Eigen::MatrixXd& user_factors) {
  config.validate();
  if (user_factors.cols() != config.composer.user_dim)
    throw ConfigError("user factor width does not match composer.user_dim");
  if (user_factors.rows() < 2) throw ConfigError("need at least two users");
  Seq2SeqModel m;
  m.config_ = config;
  m.vocab_ = std::move(vocab);
  m.allocate(static_cast<std::size_t>(user_factors.rows()));
  m.user_emb_.value = user_factors;
  return m;
}

std::vector<ad::Param*> Seq2SeqModel::parameters() {
  std::vector<ad::Param*> out{&token_emb_, &pos_emb_, &word_emb_, &task_prompt_, &user_emb_, &out_bias_};
  for (auto& l : encoder_) {
    collect(out, l.norm1);
    collect(out, l.attn);
    collect(out, l.norm2);
    collect(out, l.ff);
  }
  collect(out, encoder_norm_);
  for (auto& l : decoder_) {
    collect(out, l.norm1);
    collect(out, l.self_attn);
    collect(out, l.norm2);
    collect(out, l.cross_attn);
    collect(out, l.norm3);
    collect(out, l.ff);
  }
  collect(out, decoder_norm_);
  for (auto* p : composer_.parameters()) out.push_back(p);
  return out;
}

std::vector<const ad::Param*> Seq2SeqModel::parameters() const {
  auto list = const_cast<Seq2SeqModel*>(this)->parameters();
  return {list.begin(), list.end()};
}

std::vector<ad::Param*> Seq2SeqModel::composer_parameters() { return composer_.parameters(); }

std::size_t Seq2SeqModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += static_cast<std::size_t>(p->size());
  return n;
}

void Seq2SeqModel::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

ad::Var Seq2SeqModel::norm(ad::Tape& t, NormParams& p, ad::Var x) {
  return t.layer_norm(x, t.param(p.gain), t.param(p.bias));
}

ad::Var Seq2SeqModel::attention_block(ad::Tape& t, AttentionParams& p, ad::Var x, ad::Var memory,
                                      bool causal) {
  ad::Var q = t.affine(x, t.param(p.wq), t.param(p.bq));
  ad::Var k = t.affine(memory, t.param(p.wk), t.param(p.bk));
  ad::Var v = t.affine(memory, t.param(p.wv), t.param(p.bv));
  const double scale = 1.0 / std::sqrt(static_cast<double>(config_.d_model / config_.heads));
  ad::Var heads = t.attention(q, k, v, config_.heads, scale, causal);
  return t.affine(heads, t.param(p.wo), t.param(p.bo));
}

ad::Var Seq2SeqModel::feed_forward(ad::Tape& t, FeedForwardParams& p, ad::Var x) {
  ad::Var h = t.relu(t.affine(x, t.param(p.w1), t.param(p.b1)));
  return t.affine(h, t.param(p.w2), t.param(p.b2));
}

ad::Var Seq2SeqModel::collaborative_prompt(ad::Tape& t, const EncoderInput& input) {
  if (input.neighbors.empty()) throw std::invalid_argument("collaborative prompt needs neighbours");
  const int user[] = {input.user};
  ad::Var u, s;
  if (config_.tune_user_embeddings) {
    u = t.gather_rows(user_emb_, user);
    s = t.gather_rows(user_emb_, input.neighbors);
  } else {
    ad::Mat um = user_emb_.value.row(input.user);
    ad::Mat sm(static_cast<Eigen::Index>(input.neighbors.size()), user_emb_.value.cols());
    for (std::size_t k = 0; k < input.neighbors.size(); ++k)
      sm.row(static_cast<Eigen::Index>(k)) = user_emb_.value.row(input.neighbors[k]);
    u = t.constant(std::move(um));
    s = t.constant(std::move(sm));
  }
  return compose_on_tape(t, composer_, u, s);
}

ad::Var Seq2SeqModel::embed_input(ad::Tape& t, const EncoderInput& input) {
  if (input.tokens.size() != input.whole_word.size())
    throw std::invalid_argument("whole-word map does not align with tokens");
  const int prompt_rows = config_.prompt_rows();
  const auto rows = static_cast<std::size_t>(prompt_rows) + input.tokens.size();
  if (rows > static_cast<std::size_t>(config_.max_len))
    throw std::invalid_argument("encoder input exceeds max_len");

  std::vector<ad::Var> prompt_parts;
  ad::Var collab, task;
  if (config_.use_collab_prompt) collab = collaborative_prompt(t, input);
  if (config_.use_task_prompt) {
    std::vector<int> ids;
    const int base = static_cast<int>(input.task) * config_.task_prompt_len;
    for (int k = 0; k < config_.task_prompt_len; ++k) ids.push_back(base + k);
    task = t.gather_rows(task_prompt_, ids);
  }
  if (config_.collab_first) {
    if (collab.valid()) prompt_parts.push_back(collab);
    if (task.valid()) prompt_parts.push_back(task);
  } else {
    if (task.valid()) prompt_parts.push_back(task);
    if (collab.valid()) prompt_parts.push_back(collab);
  }

  std::vector<int> slots(static_cast<std::size_t>(prompt_rows), 0);
  slots.insert(slots.end(), input.whole_word.begin(), input.whole_word.end());
  for (int s : slots)
    if (s < 0 || s > config_.max_len) throw std::invalid_argument("whole-word slot out of range");
  std::vector<int> positions(rows);
  for (std::size_t k = 0; k < rows; ++k) positions[k] = static_cast<int>(k);

  ad::Var body = t.gather_rows(token_emb_, input.tokens);
  if (!prompt_parts.empty()) {
    prompt_parts.push_back(body);
    body = t.concat_rows(prompt_parts);
  }
  // Prompt rows carry no token embedding; token rows carry it via `body`.
  ad::Var x = t.add(body, t.gather_rows(pos_emb_, positions));
  return t.add(x, t.gather_rows(word_emb_, slots));
}

ad::Var Seq2SeqModel::encode(ad::Tape& t, ad::Var x) {
  for (auto& l : encoder_) {
    ad::Var h = norm(t, l.norm1, x);
    x = t.add(x, attention_block(t, l.attn, h, h, false));
    h = norm(t, l.norm2, x);
    x = t.add(x, feed_forward(t, l.ff, h));
  }
  return norm(t, encoder_norm_, x);
}

ad::Var Seq2SeqModel::decode(ad::Tape& t, ad::Var memory, const std::vector<int>& decoder_tokens) {
  if (decoder_tokens.empty()) throw std::invalid_argument("decoder needs at least one token");
  if (decoder_tokens.size() > static_cast<std::size_t>(config_.max_len))
    throw std::invalid_argument("decoder input exceeds max_len");
  std::vector<int> positions(decoder_tokens.size());
  for (std::size_t k = 0; k < positions.size(); ++k) positions[k] = static_cast<int>(k);
  ad::Var x = t.add(t.gather_rows(token_emb_, decoder_tokens), t.gather_rows(pos_emb_, positions));
  for (auto& l : decoder_) {
    ad::Var h = norm(t, l.norm1, x);
    x = t.add(x, attention_block(t, l.self_attn, h, h, true));
    h = norm(t, l.norm2, x);
    x = t.add(x, attention_block(t, l.cross_attn, h, memory, false));
    h = norm(t, l.norm3, x);
    x = t.add(x, feed_forward(t, l.ff, h));
  }
  ad::Var h = norm(t, decoder_norm_, x);
  return t.add_row(t.matmul_bt(h, t.param(token_emb_)), t.param(out_bias_));
}

Eigen::MatrixXd Seq2SeqModel::embed_input_matrix(const EncoderInput& input) {
  ad::Tape t;
  return t.value(embed_input(t, input));
}

Eigen::MatrixXd Seq2SeqModel::encode_matrix(const EncoderInput& input) {
  ad::Tape t;
  return t.value(encode(t, embed_input(t, input)));
}

Eigen::MatrixXd Seq2SeqModel::decode_matrix(const Eigen::MatrixXd& memory,
                                            const std::vector<int>& decoder_tokens) {
  ad::Tape t;
  return t.value(decode(t, t.constant(memory), decoder_tokens));
}

Eigen::MatrixXd Seq2SeqModel::forward(const EncoderInput& input, const std::vector<int>& decoder_tokens) {
  ad::Tape t;
  ad::Var memory = encode(t, embed_input(t, input));
  return t.value(decode(t, memory, decoder_tokens));
}

namespace {

constexpr std::array<char, 8> kModelMagic = {'C', 'U', 'P', 'R', 'M', 'D', 'L', '\0'};

}  // namespace

void Seq2SeqModel::save(const std::string& path) const {
  std::ostringstream buf(std::ios::binary);
  binio::write_magic(buf, kModelMagic, kModelSchemaVersion);
  binio::write_string(buf, config_.to_json().dump());
  binio::write<std::uint64_t>(buf, user_emb_.value.rows());
  binio::write<std::uint64_t>(buf, vocab_.size());
  for (const auto& tok : vocab_.tokens()) binio::write_string(buf, tok);
  const auto params = parameters();
  binio::write<std::uint64_t>(buf, params.size());
  for (const auto* p : params) {
    binio::write_string(buf, p->name);
    binio::write<std::uint64_t>(buf, static_cast<std::uint64_t>(p->value.rows()));
    binio::write<std::uint64_t>(buf, static_cast<std::uint64_t>(p->value.cols()));
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) binio::write<double>(buf, p->value(r, c));
  }
  binio::write_string(buf, "end");
  // Written in one shot so a failed save never leaves a half-written model behind the path.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    const std::string bytes = buf.str();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot move checkpoint into " + path);
}

Seq2SeqModel Seq2SeqModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  binio::expect_magic(in, kModelMagic, kModelSchemaVersion, "model checkpoint");
  nlohmann::json cfg_json;
  try {
    cfg_json = nlohmann::json::parse(binio::read_string(in));
  } catch (const nlohmann::json::parse_error&) {
    throw DataError("corrupt model checkpoint config");
  }
  Seq2SeqModel m;
  m.config_ = ModelConfig::from_json(cfg_json);
  m.config_.validate();
  const auto users = binio::read<std::uint64_t>(in);
  const auto vocab_n = binio::read<std::uint64_t>(in);
  if (users < 2 || users > (1u << 26) || vocab_n < 4 || vocab_n > (1u << 24))
    throw DataError("corrupt model checkpoint header");
  std::vector<std::string> tokens;
  tokens.reserve(vocab_n);
  for (std::uint64_t k = 0; k < vocab_n; ++k) tokens.push_back(binio::read_string(in, 1 << 16));
  try {
    m.vocab_ = Vocabulary(tokens);
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("corrupt checkpoint vocabulary: ") + e.what());
  }
  m.allocate(users);
  auto params = m.parameters();
  if (binio::read<std::uint64_t>(in) != params.size()) throw DataError("checkpoint parameter count mismatch");
  for (auto* p : params) {
    const std::string name = binio::read_string(in, 1 << 12);
    const auto rows = binio::read<std::uint64_t>(in);
    const auto cols = binio::read<std::uint64_t>(in);
    if (name != p->name || rows != static_cast<std::uint64_t>(p->value.rows()) ||
        cols != static_cast<std::uint64_t>(p->value.cols()))
      throw DataError("checkpoint tensor '" + name + "' does not match the expected shape of '" +
                      p->name + "'");
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) p->value(r, c) = binio::read<double>(in);
    p->zero_grad();
  }
  if (binio::read_string(in, 16) != "end") throw DataError("corrupt model checkpoint trailer");
  return m;
}

Seq2SeqModel Seq2SeqModel::load(const std::string& path, const ModelConfig& expected) {
  Seq2SeqModel m = load(path);
  if (!(m.config() == expected))
    throw DataError("checkpoint configuration mismatch (saved d_model=" +
                    std::to_string(m.config().d_model) + ", expected " +
                    std::to_string(expected.d_model) + ")");
  return m;
}

EncoderInput prepare_input(const Seq2SeqModel& model, const PromptTemplates& templates,
                           const Corpus& corpus, const NeighborIndex* neighbors,
                           const TaskExample& example) {
  const auto& cfg = model.config();
  EncoderInput in;
  in.task = example.task;
  in.user = example.user;
  if (cfg.use_collab_prompt) {
    if (!neighbors) throw ConfigError("collaborative prompt enabled but no neighbour index given");
    in.neighbors = neighbors->at(example.user).indices();
  }
  const auto budget = static_cast<std::size_t>(cfg.max_len - cfg.prompt_rows());
  std::size_t skip = 0;
  for (;;) {
    auto tok = model.vocab().tokenize(render_input(templates, corpus, example, skip));
    if (tok.ids.size() <= budget) {
      in.tokens = std::move(tok.ids);
      in.whole_word = std::move(tok.whole_word);
      in.dropped_history = skip;
      return in;
    }
    if (example.task != Task::Sequential || skip >= example.history.size())
      throw ConfigError("example for user " + corpus.users.at(example.user) +
                        " does not fit max_len even after truncation");
    ++skip;
  }
}

std::vector<int> target_tokens(const Seq2SeqModel& model, const Corpus& corpus, const TaskExample& example) {
  auto ids = model.vocab().tokenize(render_target(corpus, example)).ids;
  ids.push_back(kEos);
  return ids;
}

std::vector<int> shift_right(const std::vector<int>& targets) {
  std::vector<int> in{kBos};
  if (!targets.empty()) in.insert(in.end(), targets.begin(), targets.end() - 1);
  return in;
}

double nll_loss(const Eigen::MatrixXd& logits, const std::vector<int>& targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows())
    throw std::invalid_argument("nll_loss: length mismatch");
  double total = 0.0;
  int count = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int y = targets[static_cast<std::size_t>(r)];
    if (y == kPad) continue;
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    total += lse - logits(r, y);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("nll_loss: no non-PAD targets");
  return total / count;
}

}  // namespace cuprec
