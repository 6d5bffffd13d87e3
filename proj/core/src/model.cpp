#include "maskkd/model.hpp"

#include <algorithm>
#include <cmath>

#include "maskkd/error.hpp"
#include "maskkd/rng.hpp"

namespace maskkd {

void ModelConfig::validate() const {
  if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4 (reserved specials)");
  if (d_model <= 0) throw ConfigError("d_model must be positive");
  if (n_heads <= 0) throw ConfigError("n_heads must be positive");
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (n_layers <= 0) throw ConfigError("n_layers must be positive");
  if (max_seq_len <= 0) throw ConfigError("max_seq_len must be positive");
}

ModelConfig ModelConfig::teacher_default() {
  return ModelConfig{.vocab_size = 64, .d_model = 64, .n_heads = 4, .n_layers = 4,
                     .max_seq_len = 128, .seed = 1};
}

ModelConfig ModelConfig::student_default() {
  return ModelConfig{.vocab_size = 64, .d_model = 32, .n_heads = 2, .n_layers = 2,
                     .max_seq_len = 128, .seed = 1};
}

std::size_t expected_parameter_count(const ModelConfig& cfg) {
  const std::size_t v = static_cast<std::size_t>(cfg.vocab_size);
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t l = static_cast<std::size_t>(cfg.max_seq_len);
  const std::size_t per_layer = 12 * d * d + 13 * d;
  return v * d + l * d + static_cast<std::size_t>(cfg.n_layers) * per_layer + 2 * d + d * v + v;
}

namespace {

Tensor normal_init(Rng& rng, Shape shape, double scale) {
  Tensor t(std::move(shape));
  for (double& x : t.storage()) x = scale * rng.normal();
  return t;
}

}  // namespace

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  constexpr double kInitScale = 0.02;
  Rng rng(cfg.seed, 0x6d6f64656cULL);
  const std::size_t v = static_cast<std::size_t>(cfg.vocab_size);
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t l = static_cast<std::size_t>(cfg.max_seq_len);
  add_param("tok_emb", normal_init(rng, {v, d}, kInitScale));
  add_param("pos_emb", normal_init(rng, {l, d}, kInitScale));
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    add_param(p + "ln1.gamma", Tensor({d}, 1.0));
    add_param(p + "ln1.beta", Tensor({d}, 0.0));
    add_param(p + "attn.qkv.w", normal_init(rng, {d, 3 * d}, kInitScale));
    add_param(p + "attn.qkv.b", Tensor({3 * d}, 0.0));
    add_param(p + "attn.out.w", normal_init(rng, {d, d}, kInitScale));
    add_param(p + "attn.out.b", Tensor({d}, 0.0));
    add_param(p + "ln2.gamma", Tensor({d}, 1.0));
    add_param(p + "ln2.beta", Tensor({d}, 0.0));
    add_param(p + "mlp.fc1.w", normal_init(rng, {d, 4 * d}, kInitScale));
    add_param(p + "mlp.fc1.b", Tensor({4 * d}, 0.0));
    add_param(p + "mlp.fc2.w", normal_init(rng, {4 * d, d}, kInitScale));
    add_param(p + "mlp.fc2.b", Tensor({d}, 0.0));
  }
  add_param("ln_f.gamma", Tensor({d}, 1.0));
  add_param("ln_f.beta", Tensor({d}, 0.0));
  add_param("head.w", normal_init(rng, {d, v}, kInitScale));
  add_param("head.b", Tensor({v}, 0.0));
  bind();
}

Var& Model::add_param(const std::string& name, Tensor init) {
  names_.push_back(name);
  params_.emplace_back(std::move(init), true);
  return params_.back();
}

void Model::bind() {
  std::size_t i = 0;
  tok_emb_ = params_[i++];
  pos_emb_ = params_[i++];
  blocks_.clear();
  for (int l = 0; l < cfg_.n_layers; ++l) {
    Block b;
    for (Var* slot : {&b.ln1_g, &b.ln1_b, &b.qkv_w, &b.qkv_b, &b.out_w, &b.out_b, &b.ln2_g,
                      &b.ln2_b, &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b})
      *slot = params_[i++];
    blocks_.push_back(std::move(b));
  }
  lnf_g_ = params_[i++];
  lnf_b_ = params_[i++];
  head_w_ = params_[i++];
  head_b_ = params_[i++];
}

std::size_t Model::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value().size();
  return n;
}

const Var& Model::param(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw PreconditionError("unknown parameter '" + name + "'");
  return params_[static_cast<std::size_t>(it - names_.begin())];
}

Var& Model::param(const std::string& name) {
  return const_cast<Var&>(static_cast<const Model&>(*this).param(name));
}

Model Model::clone() const {
  Model copy(*this);
  for (std::size_t i = 0; i < copy.params_.size(); ++i)
    copy.params_[i] = Var(params_[i].value(), params_[i].requires_grad());
  copy.bind();
  return copy;
}

void Model::load_values_from(const Model& other) {
  if (!(other.cfg_.vocab_size == cfg_.vocab_size && other.cfg_.d_model == cfg_.d_model &&
        other.cfg_.n_heads == cfg_.n_heads && other.cfg_.n_layers == cfg_.n_layers &&
        other.cfg_.max_seq_len == cfg_.max_seq_len)) {
    throw ConfigError("cannot copy parameters between different architectures");
  }
  for (std::size_t i = 0; i < params_.size(); ++i)
    params_[i].mutable_value() = other.params_[i].value();
}

bool Model::values_equal(const Model& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (!(params_[i].value() == other.params_[i].value())) return false;
  return true;
}

ForwardOutput forward(const Model& model, std::span<const int> tokens, const Tensor& mask,
                      const ForwardOptions& opts) {
  const auto& cfg = model.config();
  const std::size_t t = tokens.size();
  if (t == 0) throw PreconditionError("forward on an empty sequence");
  if (t > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw CapacityError("sequence length " + std::to_string(t) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  }
  if (mask.rank() != 2 || mask.shape()[0] != t || mask.shape()[1] != t) {
    throw DimensionError("mask shape " + shape_str(mask.shape()) + " does not match sequence of " +
                         std::to_string(t));
  }
  Tape* tape = opts.tape;
  std::optional<Tensor> attn;
  if (opts.capture_attention) attn.emplace(Shape{t, t}, 0.0);
  Tensor* attn_ptr = attn ? &*attn : nullptr;

  Var x = ops::embed(tape, model.tok_emb(), model.pos_emb(), tokens);
  const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
  for (const auto& b : model.blocks()) {
    Var h = ops::layer_norm(tape, x, b.ln1_g, b.ln1_b);
    Var qkv = ops::linear(tape, h, b.qkv_w, b.qkv_b);
    Var a = ops::masked_self_attention(tape, qkv, mask, heads, attn_ptr);
    x = ops::add(tape, x, ops::linear(tape, a, b.out_w, b.out_b));
    Var h2 = ops::layer_norm(tape, x, b.ln2_g, b.ln2_b);
    Var f = ops::gelu(tape, ops::linear(tape, h2, b.fc1_w, b.fc1_b));
    x = ops::add(tape, x, ops::linear(tape, f, b.fc2_w, b.fc2_b));
  }
  Var hf = ops::layer_norm(tape, x, model.lnf_g(), model.lnf_b());
  ForwardOutput out;
  out.logits = ops::linear(tape, hf, model.head_w(), model.head_b());
  if (attn) {
    const double inv_l = 1.0 / static_cast<double>(cfg.n_layers);
    for (double& v : attn->storage()) v *= inv_l;
    out.attention_avg = std::move(attn);
  }
  return out;
}

ForwardOutput forward(const Model& model, std::span<const int> tokens,
                      const AttentionMaskMatrix& mask, const ForwardOptions& opts) {
  return forward(model, tokens, mask.entries, opts);
}

Tensor extract_response_attention(const std::optional<Tensor>& attention_avg,
                                  const SegmentLayout& layout) {
  if (!attention_avg) {
    throw PreconditionError("response attention requested from a pass without attention capture");
  }
  layout.validate();
  const Tensor& a = *attention_avg;
  if (a.rank() != 2 || a.shape()[0] != layout.total() || a.shape()[1] != layout.total()) {
    throw DimensionError("attention map " + shape_str(a.shape()) + " does not match layout of " +
                         std::to_string(layout.total()));
  }
  const std::size_t n = layout.response.size(), s = layout.response.start;
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = a(s + i, s + j);
  return out;
}

std::size_t argmax(std::span<const double> row) noexcept {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

std::vector<int> generate(const Model& model, std::span<const int> prompt, std::size_t max_new,
                          int stop_token, std::span<const int> draft) {
  if (prompt.empty()) throw PreconditionError("generate needs a nonempty prompt");
  const std::size_t cap = static_cast<std::size_t>(model.config().max_seq_len);
  if (prompt.size() + max_new > cap) {
    throw CapacityError("prompt of " + std::to_string(prompt.size()) + " plus " +
                        std::to_string(max_new) + " new tokens exceeds max_seq_len " +
                        std::to_string(cap));
  }
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;

  if (!draft.empty() && max_new > 0) {
    const std::size_t k = std::min(draft.size(), max_new);
    seq.insert(seq.end(), draft.begin(), draft.begin() + static_cast<std::ptrdiff_t>(k));
    const auto fo = forward(model, seq, causal_mask(seq.size()));
    seq.resize(prompt.size());
    const Tensor& logits = fo.logits.value();
    for (std::size_t i = 0; i < k; ++i) {
      // Row prompt.size() - 1 + i only sees prompt + draft[0..i), which equals
      // the greedy prefix while every earlier draft token was accepted.
      const int tok = static_cast<int>(argmax(logits.row(prompt.size() - 1 + i)));
      out.push_back(tok);
      seq.push_back(tok);
      if (tok == stop_token) return out;
      if (tok != draft[i]) break;
    }
  }
  while (out.size() < max_new) {
    const auto fo = forward(model, seq, causal_mask(seq.size()));
    const int tok = static_cast<int>(argmax(fo.logits.value().row(seq.size() - 1)));
    out.push_back(tok);
    seq.push_back(tok);
    if (tok == stop_token) break;
  }
  return out;
}

}  // namespace maskkd
