#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "maskkd/tensor.hpp"

namespace maskkd {

struct Node {
  Tensor value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  bool has_grad() const noexcept { return !grad.empty(); }
  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

// Shared handle to a graph node. Parameters are long-lived Vars; intermediate
// Vars live as long as the tape (or caller) holds them.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false)
      : node_(std::make_shared<Node>(Node{std::move(value), {}, requires_grad})) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool has_grad() const noexcept { return node_ && node_->has_grad(); }
  // Gradient as a tensor (zeros when never accumulated).
  Tensor grad() const;
  // Handles share their node, so a const handle still exposes the grad slot.
  std::vector<double>& grad_storage() const { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }
  Node* node() const noexcept { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

// Records backward closures for one forward pass. Confined to one thread.
class Tape {
 public:
  void record(const Var& output, std::function<void()> backward_fn);
  // Seeds d(loss)/d(loss) = seed and replays recorded closures in reverse.
  // A seed other than 1 scales every accumulated gradient, e.g. 1/B when
  // averaging over a batch of separately taped sequences.
  void backward(const Var& loss, double seed = 1.0);
  std::size_t size() const noexcept { return ops_.size(); }
  void clear();

 private:
  std::vector<std::function<void()>> ops_;
  std::unordered_set<const Node*> outputs_;
};

// Differentiable ops. Passing tape == nullptr evaluates without recording.
namespace ops {

Var matmul(Tape* tape, const Var& a, const Var& b);
// x[T x in] * w[in x out] + bias[out]
Var linear(Tape* tape, const Var& x, const Var& w, const Var& bias);
Var add(Tape* tape, const Var& a, const Var& b);
Var mul(Tape* tape, const Var& a, const Var& b);
Var sum(Tape* tape, const Var& x);
Var gelu(Tape* tape, const Var& x);
Var tanh(Tape* tape, const Var& x);
Var layer_norm(Tape* tape, const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// tok[ids[t]] + pos[t] for t in [0, ids.size())
Var embed(Tape* tape, const Var& tok, const Var& pos, std::span<const int> ids);

// Multi-head scaled dot-product attention over a fused [T x 3d] projection
// (queries, keys, values). The same additive mask applies to every head.
// When attn_sum is non-null the post-softmax head average is added to it.
Var masked_self_attention(Tape* tape, const Var& qkv, const Tensor& mask, std::size_t n_heads,
                          Tensor* attn_sum);

// Mean over `rows` of -log softmax(logits[row])[target].
Var cross_entropy(Tape* tape, const Var& logits, std::span<const std::size_t> rows,
                  std::span<const int> targets);

enum class KlKind { reverse, forward, mixed };

// Mean over `rows` of the temperature-scaled KL between the student
// distribution softmax(logits/tau) and the fixed target softmax(target/tau):
// reverse = KL(s||t), forward = KL(t||s), mixed = 0.5 (reverse + forward).
// `target_logits` rows align with `rows` (one target row per listed row).
// When per_row is non-null it receives the per-row values.
Var kd_divergence(Tape* tape, const Var& logits, std::span<const std::size_t> rows,
                  const Tensor& target_logits, double tau, KlKind kind,
                  std::vector<double>* per_row = nullptr);

}  // namespace ops

}  // namespace maskkd
