#include "maskkd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "maskkd/error.hpp"

namespace maskkd {

Tensor Var::grad() const {
  if (!node_->has_grad()) return Tensor(node_->value.shape(), 0.0);
  return Tensor(node_->value.shape(), node_->grad);
}

void Tape::record(const Var& output, std::function<void()> backward_fn) {
  outputs_.insert(output.node());
  ops_.push_back(std::move(backward_fn));
}

void Tape::backward(const Var& loss, double seed) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw RankError("backward requires a scalar loss, got shape " +
                    (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!outputs_.contains(loss.node())) {
    throw PreconditionError("backward: loss was not produced on this tape");
  }
  loss.node()->ensure_grad()[0] += seed;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void Tape::clear() {
  ops_.clear();
  outputs_.clear();
}

namespace ops {
namespace {

bool recording(Tape* tape, std::initializer_list<const Var*> inputs) {
  if (!tape) return false;
  for (const Var* v : inputs)
    if (v->requires_grad()) return true;
  return false;
}

void require_rank2(const Var& v, const char* what) {
  if (v.value().rank() != 2) {
    throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(v.shape()));
  }
}

}  // namespace

Var matmul(Tape* tape, const Var& a, const Var& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const bool rec = recording(tape, {&a, &b});
  Var out(maskkd::matmul(a.value(), b.value()), rec);
  if (rec) {
    tape->record(out, [a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.node()->grad.data();
      if (a.requires_grad())
        kernels::gemm_a_bt_acc(g, b.value().data(), a.grad_storage().data(), m, k, n);
      if (b.requires_grad())
        kernels::gemm_at_b_acc(a.value().data(), g, b.grad_storage().data(), m, k, n);
    });
  }
  return out;
}

Var linear(Tape* tape, const Var& x, const Var& w, const Var& bias) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  const std::size_t m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
  if (w.shape()[0] != k || bias.value().size() != n) {
    throw DimensionError("linear shape mismatch: " + shape_str(x.shape()) + " x " +
                         shape_str(w.shape()) + " + " + shape_str(bias.shape()));
  }
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(bias.value().data(), n, y.data() + i * n);
  kernels::gemm_acc(x.value().data(), w.value().data(), y.data(), m, k, n);
  const bool rec = recording(tape, {&x, &w, &bias});
  Var out(std::move(y), rec);
  if (rec) {
    tape->record(out, [x, w, bias, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const double* g = out.node()->grad.data();
      if (x.requires_grad())
        kernels::gemm_a_bt_acc(g, w.value().data(), x.grad_storage().data(), m, k, n);
      if (w.requires_grad())
        kernels::gemm_at_b_acc(x.value().data(), g, w.grad_storage().data(), m, k, n);
      if (bias.requires_grad()) {
        auto& gb = bias.grad_storage();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    });
  }
  return out;
}

Var add(Tape* tape, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  const bool rec = recording(tape, {&a, &b});
  Var out(std::move(y), rec);
  if (rec) {
    tape->record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.node()->grad;
      for (const Var* v : {&a, &b}) {
        if (!v->requires_grad()) continue;
        auto& dst = v->grad_storage();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      }
    });
  }
  return out;
}

Var mul(Tape* tape, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  const bool rec = recording(tape, {&a, &b});
  Var out(std::move(y), rec);
  if (rec) {
    tape->record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.node()->grad;
      if (a.requires_grad()) {
        auto& dst = a.grad_storage();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * b.value()[i];
      }
      if (b.requires_grad()) {
        auto& dst = b.grad_storage();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * a.value()[i];
      }
    });
  }
  return out;
}

Var sum(Tape* tape, const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const bool rec = recording(tape, {&x});
  Var out(Tensor::scalar(s), rec);
  if (rec) {
    tape->record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.node()->grad[0];
      auto& dst = x.grad_storage();
      for (double& d : dst) d += g;
    });
  }
  return out;
}

Var gelu(Tape* tape, const Var& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double k = 0.044715;
  Tensor y = x.value();
  for (double& v : y.storage()) {
    const double u = c * (v + k * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  const bool rec = recording(tape, {&x});
  Var out(std::move(y), rec);
  if (rec) {
    tape->record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.node()->grad;
      auto& dst = x.grad_storage();
      const auto& xv = x.value();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xv[i];
        const double t = std::tanh(c * (v + k * v * v * v));
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
        dst[i] += g[i] * d;
      }
    });
  }
  return out;
}

Var tanh(Tape* tape, const Var& x) {
  Tensor y = x.value();
  for (double& v : y.storage()) v = std::tanh(v);
  const bool rec = recording(tape, {&x});
  Var out(std::move(y), rec);
  if (rec) {
    tape->record(out, [x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.node()->grad;
      const auto& yv = out.value();
      auto& dst = x.grad_storage();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * (1.0 - yv[i] * yv[i]);
    });
  }
  return out;
}

Var layer_norm(Tape* tape, const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank2(x, "layer_norm");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw DimensionError("layer_norm parameter width does not match " + shape_str(x.shape()));
  }
  Tensor xhat({m, n});
  std::vector<double> rstd(m);
  Tensor y({m, n});
  const double* g = gamma.value().data();
  const double* b = beta.value().data();
  for (std::size_t i = 0; i < m; ++i) {
    auto xr = x.value().row(i);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mean) * rstd[i];
      xhat(i, j) = h;
      y(i, j) = h * g[j] + b[j];
    }
  }
  const bool rec = recording(tape, {&x, &gamma, &beta});
  Var out(std::move(y), rec);
  if (rec) {
    tape->record(out, [x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), m,
                       n]() mutable {
      if (!out.has_grad()) return;
      const auto& gy = out.node()->grad;
      const double* gv = gamma.value().data();
      if (gamma.requires_grad()) {
        auto& dg = gamma.grad_storage();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) dg[j] += gy[i * n + j] * xhat(i, j);
      }
      if (beta.requires_grad()) {
        auto& db = beta.grad_storage();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) db[j] += gy[i * n + j];
      }
      if (x.requires_grad()) {
        auto& dx = x.grad_storage();
        std::vector<double> dxhat(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dxhat[j] = gy[i * n + j] * gv[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat(i, j);
          }
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j)
            dx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
        }
      }
    });
  }
  return out;
}

Var embed(Tape* tape, const Var& tok, const Var& pos, std::span<const int> ids) {
  require_rank2(tok, "embed");
  require_rank2(pos, "embed");
  const std::size_t t = ids.size(), d = tok.shape()[1];
  if (pos.shape()[1] != d) throw DimensionError("embedding widths differ");
  if (t > pos.shape()[0]) {
    throw CapacityError("sequence of length " + std::to_string(t) +
                        " exceeds positional table of " + std::to_string(pos.shape()[0]));
  }
  const std::size_t vocab = tok.shape()[0];
  Tensor y({t, d});
  for (std::size_t i = 0; i < t; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                           std::to_string(vocab));
    }
    auto tr = tok.value().row(static_cast<std::size_t>(ids[i]));
    auto pr = pos.value().row(i);
    for (std::size_t j = 0; j < d; ++j) y(i, j) = tr[j] + pr[j];
  }
  const bool rec = recording(tape, {&tok, &pos});
  Var out(std::move(y), rec);
  if (rec) {
    std::vector<int> id_copy(ids.begin(), ids.end());
    tape->record(out, [tok, pos, out, id_copy = std::move(id_copy), d]() mutable {
      if (!out.has_grad()) return;
      const auto& g = out.node()->grad;
      if (tok.requires_grad()) {
        auto& dt = tok.grad_storage();
        for (std::size_t i = 0; i < id_copy.size(); ++i)
          for (std::size_t j = 0; j < d; ++j)
            dt[static_cast<std::size_t>(id_copy[i]) * d + j] += g[i * d + j];
      }
      if (pos.requires_grad()) {
        auto& dp = pos.grad_storage();
        for (std::size_t i = 0; i < g.size(); ++i) dp[i] += g[i];
      }
    });
  }
  return out;
}

Var masked_self_attention(Tape* tape, const Var& qkv, const Tensor& mask, std::size_t n_heads,
                          Tensor* attn_sum) {
  require_rank2(qkv, "attention");
  const std::size_t t = qkv.shape()[0];
  const std::size_t width = qkv.shape()[1];
  if (width % 3 != 0 || (width / 3) % n_heads != 0) {
    throw DimensionError("attention projection width " + std::to_string(width) +
                         " incompatible with " + std::to_string(n_heads) + " heads");
  }
  if (mask.rank() != 2 || mask.shape()[0] != t || mask.shape()[1] != t) {
    throw DimensionError("attention mask shape " + shape_str(mask.shape()) +
                         " does not match sequence length " + std::to_string(t));
  }
  if (attn_sum && (attn_sum->rank() != 2 || attn_sum->shape()[0] != t ||
                   attn_sum->shape()[1] != t)) {
    throw DimensionError("attention capture buffer has shape " + shape_str(attn_sum->shape()));
  }
  const std::size_t d = width / 3, dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* x = qkv.value().data();

  // probs[h] is the [t x t] post-softmax attention of head h.
  std::vector<Tensor> probs(n_heads, Tensor({t, t}));
  Tensor y({t, d});
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor& p = probs[h];
    const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
    for (std::size_t i = 0; i < t; ++i) {
      const double* q = x + i * width + qo;
      auto prow = p.row(i);
      auto mrow = mask.row(i);
      for (std::size_t j = 0; j < t; ++j) {
        if (mrow[j] == kNegInf) {
          prow[j] = kNegInf;
          continue;
        }
        const double* k = x + j * width + ko;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q[c] * k[c];
        prow[j] = s * scale + mrow[j];
      }
      kernels::softmax_row_inplace(prow);
      double* yr = y.data() + i * d + h * dh;
      for (std::size_t j = 0; j < t; ++j) {
        const double pij = prow[j];
        if (pij == 0.0) continue;
        const double* v = x + j * width + vo;
        for (std::size_t c = 0; c < dh; ++c) yr[c] += pij * v[c];
      }
    }
  }
  if (attn_sum) {
    const double inv_h = 1.0 / static_cast<double>(n_heads);
    for (std::size_t i = 0; i < t * t; ++i) {
      double acc = 0.0;
      for (std::size_t h = 0; h < n_heads; ++h) acc += probs[h][i];
      (*attn_sum)[i] += acc * inv_h;
    }
  }

  const bool rec = recording(tape, {&qkv});
  Var out(std::move(y), rec);
  if (rec) {
    tape->record(out, [qkv, out, probs = std::move(probs), t, width, d, dh, n_heads,
                       scale]() mutable {
      if (!out.has_grad()) return;
      const auto& gy = out.node()->grad;
      const double* x = qkv.value().data();
      auto& gx = qkv.grad_storage();
      std::vector<double> dp(t);
      for (std::size_t h = 0; h < n_heads; ++h) {
        const Tensor& p = probs[h];
        const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
        for (std::size_t i = 0; i < t; ++i) {
          const double* go = gy.data() + i * d + h * dh;
          auto prow = p.row(i);
          double dot = 0.0;
          for (std::size_t j = 0; j < t; ++j) {
            const double pij = prow[j];
            if (pij == 0.0) {
              dp[j] = 0.0;
              continue;
            }
            const double* v = x + j * width + vo;
            double* gv = gx.data() + j * width + vo;
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) {
              s += go[c] * v[c];
              gv[c] += pij * go[c];
            }
            dp[j] = s;
            dot += pij * s;
          }
          const double* q = x + i * width + qo;
          double* gq = gx.data() + i * width + qo;
          for (std::size_t j = 0; j < t; ++j) {
            const double pij = prow[j];
            if (pij == 0.0) continue;
            const double ds = pij * (dp[j] - dot) * scale;
            const double* k = x + j * width + ko;
            double* gk = gx.data() + j * width + ko;
            for (std::size_t c = 0; c < dh; ++c) {
              gq[c] += ds * k[c];
              gk[c] += ds * q[c];
            }
          }
        }
      }
    });
  }
  return out;
}

Var cross_entropy(Tape* tape, const Var& logits, std::span<const std::size_t> rows,
                  std::span<const int> targets) {
  require_rank2(logits, "cross_entropy");
  if (rows.size() != targets.size() || rows.empty()) {
    throw DimensionError("cross_entropy needs one target per row and at least one row");
  }
  const std::size_t v = logits.shape()[1];
  Tensor probs({rows.size(), v});
  double loss = 0.0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= logits.shape()[0]) throw DimensionError("cross_entropy row out of range");
    auto src = logits.value().row(rows[r]);
    auto dst = probs.row(r);
    std::copy(src.begin(), src.end(), dst.begin());
    kernels::softmax_row_inplace(dst);
    loss -= std::log(std::max(dst[static_cast<std::size_t>(targets[r])], kProbFloor));
  }
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  const bool rec = recording(tape, {&logits});
  Var out(Tensor::scalar(loss * inv_n), rec);
  if (rec) {
    std::vector<std::size_t> row_copy(rows.begin(), rows.end());
    std::vector<int> tgt(targets.begin(), targets.end());
    tape->record(out, [logits, out, probs = std::move(probs), row_copy = std::move(row_copy),
                       tgt = std::move(tgt), v, inv_n]() mutable {
      if (!out.has_grad()) return;
      const double g = out.node()->grad[0] * inv_n;
      auto& dz = logits.grad_storage();
      for (std::size_t r = 0; r < row_copy.size(); ++r) {
        auto pr = probs.row(r);
        double* d = dz.data() + row_copy[r] * v;
        for (std::size_t y = 0; y < v; ++y) d[y] += g * pr[y];
        d[static_cast<std::size_t>(tgt[r])] -= g;
      }
    });
  }
  return out;
}

Var kd_divergence(Tape* tape, const Var& logits, std::span<const std::size_t> rows,
                  const Tensor& target_logits, double tau, KlKind kind,
                  std::vector<double>* per_row) {
  require_rank2(logits, "kd_divergence");
  const std::size_t v = logits.shape()[1];
  if (target_logits.rank() != 2 || target_logits.shape()[0] != rows.size() ||
      target_logits.shape()[1] != v) {
    throw DimensionError("kd target logits " + shape_str(target_logits.shape()) +
                         " do not align with " + std::to_string(rows.size()) + " rows of " +
                         shape_str(logits.shape()));
  }
  if (rows.empty()) throw DimensionError("kd_divergence needs at least one row");
  const std::size_t n = rows.size();
  const double inv_tau = 1.0 / tau;
  Tensor ps({n, v}), pt({n, v}), lps({n, v}), lpt({n, v});
  std::vector<double> rev(n, 0.0), fwd(n, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (rows[r] >= logits.shape()[0]) throw DimensionError("kd_divergence row out of range");
    auto zs = logits.value().row(rows[r]);
    auto zt = target_logits.row(r);
    auto psr = ps.row(r), ptr = pt.row(r), lsr = lps.row(r), ltr = lpt.row(r);
    for (std::size_t y = 0; y < v; ++y) {
      psr[y] = zs[y] * inv_tau;
      ptr[y] = zt[y] * inv_tau;
    }
    kernels::softmax_row_inplace(psr);
    kernels::softmax_row_inplace(ptr);
    for (std::size_t y = 0; y < v; ++y) {
      lsr[y] = std::log(std::max(psr[y], kProbFloor));
      ltr[y] = std::log(std::max(ptr[y], kProbFloor));
    }
    double kr = 0.0, kf = 0.0;
    for (std::size_t y = 0; y < v; ++y) {
      kr += psr[y] * (lsr[y] - ltr[y]);
      kf += ptr[y] * (ltr[y] - lsr[y]);
    }
    rev[r] = kr;
    fwd[r] = kf;
    double row_value = 0.0;
    switch (kind) {
      case KlKind::reverse: row_value = kr; break;
      case KlKind::forward: row_value = kf; break;
      case KlKind::mixed: row_value = 0.5 * kr + 0.5 * kf; break;
    }
    total += row_value;
    if (per_row) per_row->push_back(row_value);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const bool rec = recording(tape, {&logits});
  Var out(Tensor::scalar(total * inv_n), rec);
  if (rec) {
    std::vector<std::size_t> row_copy(rows.begin(), rows.end());
    tape->record(out, [logits, out, ps = std::move(ps), pt = std::move(pt), lps = std::move(lps),
                       lpt = std::move(lpt), rev = std::move(rev), row_copy = std::move(row_copy),
                       v, inv_n, inv_tau, kind]() mutable {
      if (!out.has_grad()) return;
      const double g = out.node()->grad[0] * inv_n * inv_tau;
      const double wr = kind == KlKind::reverse ? 1.0 : (kind == KlKind::mixed ? 0.5 : 0.0);
      const double wf = kind == KlKind::forward ? 1.0 : (kind == KlKind::mixed ? 0.5 : 0.0);
      auto& dz = logits.grad_storage();
      for (std::size_t r = 0; r < row_copy.size(); ++r) {
        auto psr = ps.row(r), ptr = pt.row(r), lsr = lps.row(r), ltr = lpt.row(r);
        double* d = dz.data() + row_copy[r] * v;
        for (std::size_t y = 0; y < v; ++y) {
          // d KL(s||t)/dz = p_s (log p_s - log p_t - KL(s||t)) / tau
          // d KL(t||s)/dz = (p_s - p_t) / tau
          const double grad_rev = psr[y] * (lsr[y] - ltr[y] - rev[r]);
          const double grad_fwd = psr[y] - ptr[y];
          d[y] += g * (wr * grad_rev + wf * grad_fwd);
        }
      }
    });
  }
  return out;
}

}  // namespace ops
}  // namespace maskkd
