#pragma once

// Toy pre-norm encoder-decoder conditioned on soft prompts.
//
// Encoder rows are laid out as
//   [d_p collaborative prompt rows][task prompt rows][discrete prompt tokens]
// (collaborative-first by default). Token rows get token + whole-word +
// positional embeddings; prompt rows get positional embeddings and the
// reserved whole-word slot 0. The output projection is tied to the token
// table plus a free bias.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cuprec/autodiff.hpp"
#include "cuprec/interactions.hpp"
#include "cuprec/neighbor_index.hpp"
#include "cuprec/prompt_composer.hpp"
#include "cuprec/tokenizer.hpp"

namespace cuprec {

struct ModelConfig {
  int d_model = 64;
  int layers = 2;
  int heads = 4;
  int ffn = 256;
  int max_len = 512;
  int task_prompt_len = 3;
  ComposerShape composer;  // composer.model_dim always equals d_model
  bool use_task_prompt = true;
  bool use_collab_prompt = true;
  bool collab_first = true;
  bool tune_user_embeddings = true;
  double init_std = 0.02;
  std::uint64_t seed = 1;

  /// Full-size reference network; documentation only, not trainable at desk scale.
  static ModelConfig reference_profile();
  void validate() const;
  int prompt_rows() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

struct NormParams {
  ad::Param gain, bias;
};
struct AttentionParams {
  ad::Param wq, bq, wk, bk, wv, bv, wo, bo;
};
struct FeedForwardParams {
  ad::Param w1, b1, w2, b2;
};
struct EncoderLayerParams {
  NormParams norm1;
  AttentionParams attn;
  NormParams norm2;
  FeedForwardParams ff;
};
struct DecoderLayerParams {
  NormParams norm1;
  AttentionParams self_attn;
  NormParams norm2;
  AttentionParams cross_attn;
  NormParams norm3;
  FeedForwardParams ff;
};

/// Encoder-side inputs for one example after templating and truncation.
struct EncoderInput {
  Task task = Task::Sequential;
  int user = 0;
  std::vector<int> neighbors;  // empty when the collaborative prompt is disabled
  std::vector<int> tokens;
  std::vector<int> whole_word;
  std::size_t dropped_history = 0;
};

class Seq2SeqModel {
 public:
  /// `user_factors` (|U| x d_u) seeds the user embedding table.
  static Seq2SeqModel create(const ModelConfig& config, Vocabulary vocab,
                             const Eigen::MatrixXd& user_factors);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  std::size_t vocab_size() const { return vocab_.size(); }
  std::size_t num_users() const { return static_cast<std::size_t>(user_emb_.value.rows()); }

  std::vector<ad::Param*> parameters();
  std::vector<const ad::Param*> parameters() const;
  std::vector<ad::Param*> composer_parameters();
  std::size_t parameter_count() const;
  void zero_grad();

  ComposerParams& composer() { return composer_; }
  const ComposerParams& composer() const { return composer_; }
  ad::Param& task_prompts() { return task_prompt_; }
  ad::Param& user_embeddings() { return user_emb_; }
  ad::Param& output_bias() { return out_bias_; }

  /// Collaborative prompt rows for `input` (d_p x d_m) on the tape.
  ad::Var collaborative_prompt(ad::Tape& tape, const EncoderInput& input);
  /// Encoder input matrix (rows x d_m) on the tape.
  ad::Var embed_input(ad::Tape& tape, const EncoderInput& input);
  ad::Var encode(ad::Tape& tape, ad::Var embedded);
  /// Logits (decoder_tokens.size() x |V|) under causal masking.
  ad::Var decode(ad::Tape& tape, ad::Var memory, const std::vector<int>& decoder_tokens);

  Eigen::MatrixXd embed_input_matrix(const EncoderInput& input);
  Eigen::MatrixXd encode_matrix(const EncoderInput& input);
  Eigen::MatrixXd decode_matrix(const Eigen::MatrixXd& memory, const std::vector<int>& decoder_tokens);
  /// Full forward: logits for every decoder position.
  Eigen::MatrixXd forward(const EncoderInput& input, const std::vector<int>& decoder_tokens);

  void save(const std::string& path) const;
  static Seq2SeqModel load(const std::string& path);
  /// As load, but rejects a checkpoint whose configuration differs.
  static Seq2SeqModel load(const std::string& path, const ModelConfig& expected);

 private:
  Seq2SeqModel() = default;
  void allocate(std::size_t num_users);
  ad::Var attention_block(ad::Tape& t, AttentionParams& p, ad::Var x, ad::Var memory, bool causal);
  ad::Var feed_forward(ad::Tape& t, FeedForwardParams& p, ad::Var x);
  ad::Var norm(ad::Tape& t, NormParams& p, ad::Var x);

  ModelConfig config_;
  Vocabulary vocab_;
  ad::Param token_emb_, pos_emb_, word_emb_, task_prompt_, user_emb_, out_bias_;
  std::vector<EncoderLayerParams> encoder_;
  NormParams encoder_norm_;
  std::vector<DecoderLayerParams> decoder_;
  NormParams decoder_norm_;
  ComposerParams composer_;
};

/// Renders, tokenises and truncates one example. Oldest history items are
/// dropped until the encoder rows fit `max_len`; prompts are never cut.
EncoderInput prepare_input(const Seq2SeqModel& model, const PromptTemplates& templates,
                           const Corpus& corpus, const NeighborIndex* neighbors,
                           const TaskExample& example);

/// Target token ids (rendered target + EOS).
std::vector<int> target_tokens(const Seq2SeqModel& model, const Corpus& corpus,
                               const TaskExample& example);
/// Decoder inputs for teacher forcing: BOS followed by all but the last target.
std::vector<int> shift_right(const std::vector<int>& targets);

/// Mean over non-PAD positions of -log softmax(logits)[target].
double nll_loss(const Eigen::MatrixXd& logits, const std::vector<int>& targets);

inline constexpr std::uint32_t kModelSchemaVersion = 1;

}  // namespace cuprec
