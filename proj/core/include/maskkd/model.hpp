#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskkd/autodiff.hpp"
#include "maskkd/layout.hpp"

namespace maskkd {

struct ModelConfig {
  int vocab_size = 64;
  int d_model = 32;
  int n_heads = 2;
  int n_layers = 2;
  int max_seq_len = 128;
  std::uint64_t seed = 1;

  // Throws ConfigError naming the violated constraint.
  void validate() const;

  static ModelConfig teacher_default();
  static ModelConfig student_default();
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Closed-form parameter count of the pre-norm decoder built by Model.
std::size_t expected_parameter_count(const ModelConfig& cfg);

// Causal pre-norm decoder: token + learned positional embeddings, n_layers
// blocks of (LN -> multi-head attention -> residual, LN -> 4x GELU MLP ->
// residual), final LN and an untied output projection.
class Model {
 public:
  explicit Model(const ModelConfig& cfg);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const noexcept { return cfg_; }
  std::vector<Var>& parameters() noexcept { return params_; }
  const std::vector<Var>& parameters() const noexcept { return params_; }
  const std::vector<std::string>& parameter_names() const noexcept { return names_; }
  std::size_t parameter_count() const noexcept;

  const Var& param(const std::string& name) const;
  Var& param(const std::string& name);

  // Deep copy with independent parameter storage.
  Model clone() const;
  // Copies parameter values from another model of the same config.
  void load_values_from(const Model& other);
  bool values_equal(const Model& other) const;

  struct Block {
    Var ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  const std::vector<Block>& blocks() const noexcept { return blocks_; }
  const Var& tok_emb() const noexcept { return tok_emb_; }
  const Var& pos_emb() const noexcept { return pos_emb_; }
  const Var& lnf_g() const noexcept { return lnf_g_; }
  const Var& lnf_b() const noexcept { return lnf_b_; }
  const Var& head_w() const noexcept { return head_w_; }
  const Var& head_b() const noexcept { return head_b_; }

 private:
  // Shallow copies would alias parameter storage; use clone().
  Model(const Model&) = default;
  Model& operator=(const Model&) = default;

  Var& add_param(const std::string& name, Tensor init);
  void bind();

  ModelConfig cfg_;
  std::vector<Var> params_;
  std::vector<std::string> names_;
  Var tok_emb_, pos_emb_, lnf_g_, lnf_b_, head_w_, head_b_;
  std::vector<Block> blocks_;
};

struct ForwardOptions {
  bool capture_attention = false;
  // Non-null records the pass for backward; null runs without a tape.
  Tape* tape = nullptr;
};

struct ForwardOutput {
  Var logits;                           // [T x vocab]
  std::optional<Tensor> attention_avg;  // [T x T], mean over layers and heads
};

ForwardOutput forward(const Model& model, std::span<const int> tokens, const Tensor& mask,
                      const ForwardOptions& opts = {});
ForwardOutput forward(const Model& model, std::span<const int> tokens,
                      const AttentionMaskMatrix& mask, const ForwardOptions& opts = {});

// Submatrix of the averaged attention on response rows x response columns.
Tensor extract_response_attention(const std::optional<Tensor>& attention_avg,
                                  const SegmentLayout& layout);

// Greedy decoding under the causal mask. Stops after emitting stop_token
// (included in the output) or after max_new tokens. A draft continuation,
// when given, is verified in one pass; the result is identical to plain
// greedy decoding either way.
std::vector<int> generate(const Model& model, std::span<const int> prompt, std::size_t max_new,
                          int stop_token, std::span<const int> draft = {});

std::size_t argmax(std::span<const double> row) noexcept;

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace maskkd
