#include "maskkd/optim.hpp"

#include <cmath>
#include <string>

#include "maskkd/error.hpp"

namespace maskkd {

void Adam::step(std::vector<Var>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw UnreadyParameterError("parameter " + std::to_string(i) + " " +
                                  shape_str(params[i].shape()) + " has no gradient");
    }
  }
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].value().size(), 0.0);
      v_[i].assign(params[i].value().size(), 0.0);
    }
  } else if (m_.size() != params.size()) {
    throw PreconditionError("Adam::step called with a different parameter list");
  }
  ++t_;
  const double b1 = opts_.beta1, b2 = opts_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].mutable_value().storage();
    auto& g = params[i].grad_storage();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
    }
    params[i].zero_grad();
  }
}

void zero_grads(std::vector<Var>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace maskkd
