#include "glsm/optim.hpp"

#include <cmath>

namespace glsm {

Adam::Adam(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  state_.lr = config.lr;
  for (const auto& p : params_) {
    state_.first_moment.emplace_back(p.numel(), 0.0);
    state_.second_moment.emplace_back(p.numel(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++state_.step;
  double clip = 1.0;
  if (config_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : params_)
      if (p.has_grad())
        for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) clip = config_.clip_norm / norm;
  }
  const double t = static_cast<double>(state_.step);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.has_grad()) continue;
    auto w = p.values_mut();
    auto g = p.grad();
    auto& m = state_.first_moment[k];
    auto& v = state_.second_moment[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      w[i] -= config_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
    }
  }
}

}  // namespace glsm
