#include "prima/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "prima/alignment_losses.hpp"
#include "prima/errors.hpp"

namespace prima {

GradientComparison compare_gradients(const GraphFunction& f, const std::vector<Matrix>& inputs,
                                     double step, double floor) {
  std::vector<ag::Var> leaves;
  for (const auto& m : inputs) leaves.emplace_back(m, true);
  ag::Var out = f(leaves);
  ag::backward(out);

  auto evaluate = [&](const std::vector<Matrix>& values) {
    std::vector<ag::Var> consts;
    for (const auto& m : values) consts.push_back(ag::constant(m));
    return f(consts).scalar();
  };

  GradientComparison cmp;
  std::vector<Matrix> probe = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const Matrix analytic = leaves[t].grad();
    Matrix numeric(analytic.rows(), analytic.cols());
    for (Eigen::Index e = 0; e < inputs[t].size(); ++e) {
      const double original = probe[t].data()[e];
      probe[t].data()[e] = original + step;
      const double up = evaluate(probe);
      probe[t].data()[e] = original - step;
      const double down = evaluate(probe);
      probe[t].data()[e] = original;
      numeric.data()[e] = (up - down) / (2.0 * step);
    }
    if (analytic.size() == 0) continue;
    const double abs_err = (analytic - numeric).cwiseAbs().maxCoeff();
    const double scale = std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), floor});
    cmp.max_abs_error = std::max(cmp.max_abs_error, abs_err);
    cmp.max_rel_error = std::max(cmp.max_rel_error, abs_err / scale);
    cmp.entries += static_cast<std::size_t>(analytic.size());
  }
  return cmp;
}

namespace {

// Layout of the flattened inputs for one batch: view1 cls, view2 cls, text
// cls (each N x d), then per patient view1 seq, view2 seq, text seq.
graph::BatchTokens unpack(const std::vector<ag::Var>& v, std::size_t n) {
  graph::BatchTokens b;
  b.view1_cls = v[0];
  b.view2_cls = v[1];
  b.text_cls = v[2];
  for (std::size_t i = 0; i < n; ++i) {
    b.view1_seq.push_back(v[3 + 3 * i]);
    b.view2_seq.push_back(v[4 + 3 * i]);
    b.text_seq.push_back(v[5 + 3 * i]);
    b.text_valid.emplace_back();
  }
  return b;
}

}  // namespace

std::vector<LossGradCheck> run_loss_gradcheck(const GradCheckOptions& options) {
  const auto& s = options.sizes;
  if (s.n < 1 || s.l < 1 || s.k < 1 || s.d < 2) throw ConfigError("gradcheck sizes must be positive (d >= 2)");
  const SimilarityConfig cfg{options.tau};

  struct Named {
    std::string name;
    std::function<ag::Var(const graph::BatchTokens&, const Matrix&)> loss;
  };
  const std::vector<Named> losses = {
      {"L_img", [&](const auto& b, const auto&) { return graph::image_consistency_loss(b, cfg); }},
      {"L_glo", [&](const auto& b, const auto&) { return graph::global_semantic_loss(b, cfg); }},
      {"L_loc", [&](const auto& b, const auto&) { return graph::local_semantic_loss(b, cfg); }},
      {"L_soft", [&](const auto& b, const auto& soft) { return graph::soft_semantic_loss(b, soft, cfg); }},
      {"L_loc_dir", [&](const auto& b, const auto&) { return graph::local_semantic_loss_direct(b, cfg); }},
  };

  std::vector<LossGradCheck> results;
  for (std::size_t li = 0; li < losses.size(); ++li) {
    LossGradCheck r{losses[li].name, 0.0, 0, false};
    Rng rng(Rng::derive(options.seed, {li}));
    for (int inst = 0; inst < options.instances; ++inst) {
      const int n_lo = s.n >= 2 ? 2 : 1;
      const auto n = static_cast<Eigen::Index>(
          n_lo + rng.index(static_cast<std::size_t>(s.n - n_lo + 1)));
      const auto l = static_cast<Eigen::Index>(1 + rng.index(static_cast<std::size_t>(s.l)));
      const auto k = static_cast<Eigen::Index>(1 + rng.index(static_cast<std::size_t>(s.k)));
      const auto d = static_cast<Eigen::Index>(2 + rng.index(static_cast<std::size_t>(s.d - 1)));
      std::vector<Matrix> inputs;
      for (int c = 0; c < 3; ++c) inputs.push_back(rng.normal_matrix(n, d, 1.0));
      for (Eigen::Index i = 0; i < n; ++i) {
        inputs.push_back(rng.normal_matrix(k, d, 1.0));
        inputs.push_back(rng.normal_matrix(k, d, 1.0));
        inputs.push_back(rng.normal_matrix(l, d, 1.0));
      }
      Matrix soft(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) soft(i, j) = rng.uniform(0.05, 1.0);
        soft.row(i) /= soft.row(i).sum();
      }
      const auto& loss = losses[li].loss;
      const bool corrupt = options.corrupt_loss == losses[li].name;
      GraphFunction f = [&, n](const std::vector<ag::Var>& v) {
        ag::Var value = loss(unpack(v, static_cast<std::size_t>(n)), soft);
        if (corrupt && v[0].requires_grad()) {
          // Adds a term whose value is zero but whose gradient is not, so
          // only the analytic path sees it.
          ag::Var bump = ag::sum(v[0]);
          value = ag::add(value, ag::sub(bump, ag::constant(bump.value())));
        }
        return value;
      };
      const auto cmp = compare_gradients(f, inputs, options.step);
      r.max_rel_error = std::max(r.max_rel_error, cmp.max_rel_error);
      ++r.instances;
    }
    r.passed = r.max_rel_error < options.tolerance;
    results.push_back(r);
  }
  return results;
}

}  // namespace prima
