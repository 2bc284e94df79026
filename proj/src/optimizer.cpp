#include "prima/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "prima/errors.hpp"

namespace prima {

WarmupCosine::WarmupCosine(double base_lr, std::size_t total_steps, double warmup_fraction)
    : base_(base_lr), total_(total_steps) {
  if (!(base_lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (total_steps == 0) throw ConfigError("schedule needs at least one step");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) {
    throw ConfigError("warm-up fraction must be in [0, 1)");
  }
  warmup_ = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
}

double WarmupCosine::operator()(std::size_t step) const {
  if (step < warmup_) return base_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
  if (total_ <= warmup_) return base_;
  const double progress =
      static_cast<double>(step - warmup_) / static_cast<double>(total_ - warmup_);
  return 0.5 * base_ * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

AdamW::AdamW(std::vector<nn::Parameter*> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (const auto* p : params_) {
    m_.push_back(Matrix::Zero(p->value().rows(), p->value().cols()));
    v_.push_back(Matrix::Zero(p->value().rows(), p->value().cols()));
  }
}

double AdamW::step(double lr) {
  ++t_;
  double sq = 0.0;
  for (const auto* p : params_) {
    const Matrix& g = p->var.node()->grad;
    if (g.size()) sq += g.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw TrainingAborted("non-finite gradient norm");
  const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Matrix& w = params_[i]->value();
    const Matrix& raw = params_[i]->var.node()->grad;
    if (cfg_.weight_decay > 0.0) w *= 1.0 - lr * cfg_.weight_decay;
    if (raw.size() == 0) continue;
    const Matrix g = clip * raw;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    w.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
  }
  return norm;
}

}  // namespace prima
