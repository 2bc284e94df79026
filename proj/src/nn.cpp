#include "prima/nn.hpp"

#include <algorithm>
#include <cmath>

#include "prima/errors.hpp"

namespace prima::nn {

ag::Var ParameterStore::add(const std::string& name, const std::string& component, Matrix init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->component = component;
  p->var = ag::Var(std::move(init), false);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return params_.back()->var;
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

std::vector<Parameter*> ParameterStore::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<Parameter*> ParameterStore::trainable() {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (p->trainable()) out.push_back(p.get());
  }
  return out;
}

void ParameterStore::set_trainable(const std::vector<std::string>& components, bool on) {
  for (auto& p : params_) {
    if (std::find(components.begin(), components.end(), p->component) != components.end()) {
      p->set_trainable(on);
    }
  }
}

void ParameterStore::freeze_all() {
  for (auto& p : params_) p->set_trainable(false);
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->var.node()->grad.resize(0, 0);
}

void LoraAdapter::validate(Eigen::Index d_in, Eigen::Index d_out) const {
  if (rank <= 0) throw ConfigError("LoRA rank must be positive");
  if (rank > std::min(d_in, d_out)) {
    throw ConfigError("LoRA rank " + std::to_string(rank) + " exceeds min(d_in, d_out) = " +
                      std::to_string(std::min(d_in, d_out)));
  }
  if (down.rows() != d_in || down.cols() != rank || up.rows() != rank || up.cols() != d_out) {
    throw ShapeError("LoRA factor shapes do not match the base layer");
  }
}

Matrix lora_forward(const Matrix& x, const Matrix& weight, const Vector& bias,
                    const LoraAdapter& adapter) {
  if (x.cols() != weight.rows() || bias.size() != weight.cols()) {
    throw ShapeError("lora_forward: input, weight and bias shapes disagree");
  }
  adapter.validate(weight.rows(), weight.cols());
  Matrix out = x * weight;
  out.rowwise() += bias.transpose();
  out += adapter.scaling() * ((x * adapter.down) * adapter.up);
  return out;
}

Linear::Linear(ParameterStore& store, const std::string& name, const std::string& component,
               Eigen::Index d_in, Eigen::Index d_out, Rng& rng, bool bias)
    : name_(name), d_in_(d_in), d_out_(d_out) {
  const double std = 1.0 / std::sqrt(static_cast<double>(d_in));
  weight_ = store.add(name + ".weight", component, rng.normal_matrix(d_in, d_out, std));
  if (bias) bias_ = store.add(name + ".bias", component, Matrix::Zero(1, d_out));
}

void Linear::attach_lora(ParameterStore& store, const std::string& component,
                         const LoraConfig& cfg, Rng& rng) {
  if (cfg.rank <= 0) throw ConfigError("LoRA rank must be positive");
  if (cfg.rank > std::min(d_in_, d_out_)) {
    throw ConfigError("LoRA rank " + std::to_string(cfg.rank) + " exceeds min(d_in, d_out) = " +
                      std::to_string(std::min(d_in_, d_out_)) + " for " + name_);
  }
  lora_rank_ = cfg.rank;
  lora_scaling_ = cfg.scaling();
  const double std = 1.0 / std::sqrt(static_cast<double>(d_in_));
  lora_down_ = store.add(name_ + ".lora_down", component, rng.normal_matrix(d_in_, cfg.rank, std));
  lora_up_ = store.add(name_ + ".lora_up", component, Matrix::Zero(cfg.rank, d_out_));
}

ag::Var Linear::operator()(const ag::Var& x) const {
  ag::Var y = ag::matmul(x, weight_);
  if (bias_.defined()) y = ag::add_row(y, bias_);
  if (lora_down_.defined()) {
    y = ag::add(y, ag::scale(ag::matmul(ag::matmul(x, lora_down_), lora_up_), lora_scaling_));
  }
  return y;
}

Mlp::Mlp(ParameterStore& store, const std::string& name, const std::string& component,
         Eigen::Index d_in, Eigen::Index hidden, Eigen::Index d_out, Rng& rng)
    : fc1_(store, name + ".fc1", component, d_in, hidden, rng),
      fc2_(store, name + ".fc2", component, hidden, d_out, rng) {}

ag::Var Mlp::operator()(const ag::Var& x) const { return fc2_(ag::gelu(fc1_(x))); }

MixingBlock::MixingBlock(ParameterStore& store, const std::string& name,
                         const std::string& component, Eigen::Index width,
                         Eigen::Index mlp_hidden, Rng& rng)
    : q_(store, name + ".attn.q", component, width, width, rng),
      k_(store, name + ".attn.k", component, width, width, rng),
      v_(store, name + ".attn.v", component, width, width, rng),
      o_(store, name + ".attn.o", component, width, width, rng),
      mlp_(store, name + ".mlp", component, width, mlp_hidden, width, rng) {}

Linear& MixingBlock::target(const std::string& which) {
  if (which == "q") return q_;
  if (which == "k") return k_;
  if (which == "v") return v_;
  if (which == "o") return o_;
  if (which == "fc1") return mlp_.fc1();
  if (which == "fc2") return mlp_.fc2();
  throw ConfigError("unknown LoRA target '" + which + "' (valid: q, k, v, o, fc1, fc2)");
}

void MixingBlock::attach_lora(ParameterStore& store, const std::string& component,
                              const std::vector<std::string>& targets, const LoraConfig& cfg,
                              Rng& rng) {
  for (const auto& t : targets) target(t).attach_lora(store, component, cfg, rng);
}

ag::Var MixingBlock::operator()(const ag::Var& x, Eigen::Index seq_len,
                                const std::vector<bool>& key_valid, bool causal) const {
  const ag::Var h = ag::layer_norm_rows(x);
  const ag::Var a = ag::block_attention(q_(h), k_(h), v_(h), seq_len, key_valid, causal);
  const ag::Var x1 = ag::add(x, o_(a));
  return ag::add(x1, mlp_(ag::layer_norm_rows(x1)));
}

std::vector<const Linear*> MixingBlock::linears() const {
  auto& m = const_cast<Mlp&>(mlp_);
  return {&q_, &k_, &v_, &o_, &m.fc1(), &m.fc2()};
}

ag::Var cross_entropy(const ag::Var& logits, const std::vector<int>& targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw ShapeError("cross_entropy: one target per logit row required");
  }
  Matrix weights = Matrix::Zero(logits.rows(), logits.cols());
  std::size_t counted = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] < 0) continue;
    if (targets[r] >= logits.cols()) throw ShapeError("cross_entropy: target out of range");
    weights(static_cast<Eigen::Index>(r), targets[r]) = 1.0;
    ++counted;
  }
  if (counted == 0) throw DomainError("cross_entropy: no positions to score");
  weights /= -static_cast<double>(counted);
  return ag::weighted_sum(ag::log_softmax_rows(logits), weights);
}

}  // namespace prima::nn
