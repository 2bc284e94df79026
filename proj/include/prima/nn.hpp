#pragma once

// Parameter storage and the small set of layers the toy models are built
// from: affine layers with optional low-rank adapters, two-layer MLPs and
// pre-norm transformer-style mixing blocks.

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "prima/autograd.hpp"
#include "prima/numerics.hpp"

namespace prima::nn {

/// A named leaf of the graph. `component` groups parameters for freezing and
/// reporting ("vision.backbone", "vision.lora", "decoder.special", ...).
struct Parameter {
  std::string name;
  std::string component;
  ag::Var var;

  Matrix& value() { return var.node()->value; }
  const Matrix& value() const { return var.node()->value; }
  bool trainable() const { return var.node()->requires_grad; }
  void set_trainable(bool on) { var.node()->requires_grad = on; }
  Eigen::Index size() const { return value().size(); }
};

class ParameterStore {
 public:
  /// Registers a parameter; names must be unique. New parameters are frozen.
  ag::Var add(const std::string& name, const std::string& component, Matrix init);

  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::vector<Parameter*> trainable();

  /// Sets the trainable flag on every parameter whose component equals one of
  /// `components` (exact match).
  void set_trainable(const std::vector<std::string>& components, bool on);
  void freeze_all();
  void zero_grad();

  std::size_t count() const { return params_.size(); }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Low-rank adapter factors: down is d_in x r, up is r x d_out.
struct LoraAdapter {
  int rank = 0;
  double alpha = 0.0;
  Matrix down;
  Matrix up;

  double scaling() const { return alpha / static_cast<double>(rank); }
  void validate(Eigen::Index d_in, Eigen::Index d_out) const;
};

/// base(x) + (alpha/r) * (x down) up, with base(x) = x W + b.
Matrix lora_forward(const Matrix& x, const Matrix& weight, const Vector& bias,
                    const LoraAdapter& adapter);

struct LoraConfig {
  int rank = 0;         // 0 disables the adapter
  double alpha = 0.0;   // 0 means alpha = rank
  double scaling() const { return (alpha > 0.0 ? alpha : rank) / static_cast<double>(rank); }
};

/// Affine layer y = x W + b (W is d_in x d_out) with an optional adapter.
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, const std::string& component,
         Eigen::Index d_in, Eigen::Index d_out, Rng& rng, bool bias = true);

  /// Attaches a LoRA adapter registered under `component`. The down factor is
  /// Gaussian with std 1/sqrt(d_in); the up factor starts at zero.
  void attach_lora(ParameterStore& store, const std::string& component, const LoraConfig& cfg,
                   Rng& rng);

  ag::Var operator()(const ag::Var& x) const;

  Eigen::Index in_dim() const { return d_in_; }
  Eigen::Index out_dim() const { return d_out_; }
  bool has_lora() const { return lora_down_.defined(); }
  int lora_rank() const { return lora_rank_; }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  Eigen::Index d_in_ = 0, d_out_ = 0;
  ag::Var weight_, bias_;
  ag::Var lora_down_, lora_up_;
  int lora_rank_ = 0;
  double lora_scaling_ = 1.0;
};

/// Linear -> GELU -> Linear.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& name, const std::string& component,
      Eigen::Index d_in, Eigen::Index hidden, Eigen::Index d_out, Rng& rng);

  ag::Var operator()(const ag::Var& x) const;
  Linear& fc1() { return fc1_; }
  Linear& fc2() { return fc2_; }

 private:
  Linear fc1_, fc2_;
};

/// Pre-norm block: x + o(attn(LN x)), then x + mlp(LN x). Sequences are
/// stacked row-wise in blocks of `seq_len` rows.
class MixingBlock {
 public:
  MixingBlock() = default;
  MixingBlock(ParameterStore& store, const std::string& name, const std::string& component,
              Eigen::Index width, Eigen::Index mlp_hidden, Rng& rng);

  /// Adds adapters to the named projections ("q", "k", "v", "o", "fc1", "fc2").
  void attach_lora(ParameterStore& store, const std::string& component,
                   const std::vector<std::string>& targets, const LoraConfig& cfg, Rng& rng);

  ag::Var operator()(const ag::Var& x, Eigen::Index seq_len, const std::vector<bool>& key_valid,
                     bool causal) const;

  std::vector<const Linear*> linears() const;

 private:
  Linear& target(const std::string& which);
  Linear q_, k_, v_, o_;
  Mlp mlp_;
};

/// Mean token-level cross-entropy of `logits` rows against `targets`
/// (entries < 0 are ignored). Throws DomainError when nothing is counted.
ag::Var cross_entropy(const ag::Var& logits, const std::vector<int>& targets);

}  // namespace prima::nn
