#include <doctest.h>

#include <cmath>

#include "prima/errors.hpp"
#include "prima/fusion_classifier.hpp"
#include "prima/gradcheck.hpp"
#include "prima/log.hpp"

using namespace prima;

namespace {

Vocabulary test_vocab() {
  std::vector<std::string> words = {"bcc", "scc", "ack", "sek", "mel", "nev", "filler"};
  for (const auto& w : FusionSpec{}.required_words()) words.push_back(w);
  return Vocabulary(words);
}

struct Fixture {
  Vocabulary vocab = test_vocab();
  nn::ParameterStore store;
  DecoderSpec dspec = [this] {
    DecoderSpec s;
    s.vocab_size = vocab.size();
    return s;
  }();
  ToyDecoder decoder{store, dspec};
  FusionHead head{store, FusionSpec{}, decoder, vocab};
};

FusionInput random_input(Rng& rng, std::size_t scans, Eigen::Index K, Eigen::Index L) {
  FusionInput in;
  for (std::size_t s = 0; s < scans; ++s) {
    in.image_globals.push_back(ag::constant(rng.normal_matrix(1, 32, 1.0)));
    in.image_locals.push_back(ag::constant(rng.normal_matrix(K, 32, 1.0)));
  }
  in.text_global = ag::constant(rng.normal_matrix(1, 32, 1.0));
  in.text_locals = ag::constant(rng.normal_matrix(L, 32, 1.0));
  return in;
}

}  // namespace

TEST_CASE("restricted probabilities") {
  ClassVocabulary two{{"a", "b"}, {4, 5}};
  Vector logits = Vector::Zero(8);
  const Vector p = restricted_class_probabilities(logits, two);
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(p[1] == doctest::Approx(0.5));

  ClassVocabulary three{{"a", "b", "c"}, {1, 3, 5}};
  Vector z = Vector::Zero(7);
  z[1] = 2;
  z[3] = 1;
  z[5] = 0;
  z[6] = 10;  // outside C
  const Vector q = restricted_class_probabilities(z, three);
  const double den = std::exp(2.0) + std::exp(1.0) + 1.0;
  CHECK(std::abs(q[0] - std::exp(2.0) / den) < 1e-12);
  CHECK(std::abs(q[1] - std::exp(1.0) / den) < 1e-12);
  CHECK(std::abs(q[2] - 1.0 / den) < 1e-12);
  CHECK(q[0] == doctest::Approx(0.665).epsilon(0.001));
  CHECK(q[1] == doctest::Approx(0.245).epsilon(0.002));
  CHECK(q[2] == doctest::Approx(0.090).epsilon(0.005));

  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    Vector r = rng.normal_matrix(7, 1, 3.0);
    const Vector pr = restricted_class_probabilities(r, three);
    CHECK(std::abs(pr.sum() - 1.0) < 1e-9);
    Eigen::Index arg_p, arg_z;
    pr.maxCoeff(&arg_p);
    Vector restricted(3);
    restricted << r[1], r[3], r[5];
    restricted.maxCoeff(&arg_z);
    CHECK(arg_p == arg_z);
    // Out-of-C mass never changes the result.
    r[0] += 10;
    r[6] += 10;
    CHECK((restricted_class_probabilities(r, three) - pr).cwiseAbs().maxCoeff() == 0.0);
  }

  CHECK_THROWS_AS(restricted_class_probabilities(z, ClassVocabulary{{"a"}, {1}}), ConfigError);
  CHECK_THROWS_AS(restricted_class_probabilities(z, ClassVocabulary{{"a", "b"}, {1, 1}}), ConfigError);
}

TEST_CASE("classification loss") {
  CHECK(fusion_classification_loss((Vector(2) << 1.0, 0.0).finished(), 0) == 0.0);
  ClassVocabulary six{{"a", "b", "c", "d", "e", "f"}, {0, 1, 2, 3, 4, 5}};
  const Vector p = restricted_class_probabilities(Vector::Constant(9, 0.7), six);
  CHECK(std::abs(fusion_classification_loss(p, 2) - std::log(6.0)) < 1e-9);
  CHECK(std::log(6.0) == doctest::Approx(1.791759).epsilon(1e-6));

  // Gradient with respect to the restricted logits is softmax - onehot.
  Rng rng(2);
  const Matrix z = rng.normal_matrix(1, 9, 1.0);
  ag::Var zv(z, true);
  const ag::Var loss = ag::scale(ag::rows(ag::transpose(restricted_log_probabilities(zv, six)), 3, 1), -1.0);
  ag::backward(loss);
  const Vector probs = restricted_class_probabilities(z.row(0).transpose(), six);
  for (int k = 0; k < 6; ++k) {
    CHECK(std::abs(zv.grad()(0, k) - (probs[k] - (k == 3 ? 1.0 : 0.0))) < 1e-12);
  }
  for (int k = 6; k < 9; ++k) CHECK(zv.grad()(0, k) == 0.0);
  auto f = [&](const std::vector<ag::Var>& in) {
    return ag::scale(ag::rows(ag::transpose(restricted_log_probabilities(in[0], six)), 3, 1), -1.0);
  };
  CHECK(compare_gradients(f, {z}).max_rel_error < 1e-4);
}

TEST_CASE("projectors") {
  Fixture fx;
  const ag::Var zero = ag::constant(Matrix::Zero(1, 32));
  const Matrix out = fx.head.project_global(zero).value();
  CHECK(out.cols() == 64);
  CHECK((out - fx.store.get("fusion.global.fc2.bias").value()).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(fx.head.project_global(ag::constant(Matrix::Zero(1, 31))), ShapeError);

  Rng rng(3);
  CHECK(fx.head.project_local(ag::constant(rng.normal_matrix(16, 32, 1.0))).rows() == 8);
  CHECK(fx.head.project_local(ag::constant(rng.normal_matrix(7, 32, 1.0))).rows() == 4);
  Matrix constant_seq(16, 32);
  constant_seq.rowwise() = rng.normal_matrix(1, 32, 1.0).row(0);
  const Matrix c = fx.head.project_local(ag::constant(constant_seq)).value();
  for (Eigen::Index r = 1; r < c.rows(); ++r) CHECK((c.row(r) - c.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  log::set_level(log::Level::Quiet);
  CHECK(fx.head.project_local(ag::constant(rng.normal_matrix(1, 32, 1.0))).rows() == 1);
  log::set_level(log::Level::Warn);

  // Stride 1 preserves the length.
  nn::ParameterStore store;
  ToyDecoder dec(store, fx.dspec);
  FusionSpec s1;
  s1.stride = 1;
  FusionHead h1(store, s1, dec, fx.vocab);
  CHECK(h1.project_local(ag::constant(rng.normal_matrix(16, 32, 1.0))).rows() == 16);

  // Projector gradients.
  const Matrix x = rng.normal_matrix(5, 32, 1.0);
  const Matrix probe = rng.normal_matrix(3, 64, 1.0);
  auto f = [&](const std::vector<ag::Var>& in) {
    return ag::weighted_sum(fx.head.project_local(in[0]), probe);
  };
  CHECK(compare_gradients(f, {x}).max_rel_error < 1e-4);
  const Matrix probe_g = rng.normal_matrix(2, 64, 1.0);
  auto g = [&](const std::vector<ag::Var>& in) {
    return ag::weighted_sum(fx.head.project_global(in[0]), probe_g);
  };
  CHECK(compare_gradients(g, {rng.normal_matrix(2, 32, 1.0)}).max_rel_error < 1e-4);
}

TEST_CASE("sequence layout") {
  Fixture fx;
  Rng rng(4);
  const FusionInput two = random_input(rng, 2, 16, 4);
  const ag::Var seq = fx.head.assemble(two);
  // 5 framing/answer rows + per scan (1 + 16/2) + text (1 + 4/2).
  CHECK(seq.rows() == 5 + 2 * (1 + 8) + 1 + 2);
  CHECK(seq.rows() == FusionHead::layout_length(2, 16, 4, 2));
  CHECK((seq.value().row(0) - fx.head.special("img_start").value()).cwiseAbs().maxCoeff() == 0.0);

  FusionInput dup = two;
  dup.image_globals[1] = dup.image_globals[0];
  dup.image_locals[1] = dup.image_locals[0];
  CHECK(fx.head.assemble(dup).rows() == seq.rows());

  FusionInput swapped = two;
  std::swap(swapped.image_globals[0], swapped.image_globals[1]);
  std::swap(swapped.image_locals[0], swapped.image_locals[1]);
  const Matrix a = seq.value(), b = fx.head.assemble(swapped).value();
  CHECK((a.middleRows(1, 9) - b.middleRows(10, 9)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a.middleRows(10, 9) - b.middleRows(1, 9)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a.bottomRows(a.rows() - 19) - b.bottomRows(b.rows() - 19)).cwiseAbs().maxCoeff() < 1e-12);

  FusionInput none = two;
  none.image_globals.clear();
  none.image_locals.clear();
  CHECK_THROWS_AS(fx.head.assemble(none), PreconditionError);
}

TEST_CASE("special tokens start from seed word embeddings") {
  Fixture fx;
  const Matrix emb = fx.store.get("decoder.embedding").value();
  const Matrix expect =
      (emb.row(fx.vocab.id("image")) + emb.row(fx.vocab.id("begin"))) / 2.0;
  CHECK((fx.head.special("img_start").value() - expect).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("batched classification matches per-sample evaluation") {
  Fixture fx;
  Rng rng(5);
  const auto classes = ClassVocabulary::from({"bcc", "scc", "ack"}, fx.vocab);
  std::vector<FusionInput> batch = {random_input(rng, 2, 16, 4), random_input(rng, 2, 16, 6),
                                    random_input(rng, 2, 16, 4)};
  const Matrix all = fx.head.class_log_probabilities(batch, classes).value();
  CHECK(all.rows() == 3);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Matrix one = fx.head.class_log_probabilities({batch[i]}, classes).value();
    CHECK((one.row(0) - all.row(static_cast<Eigen::Index>(i))).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(one.array().exp().sum() - 1.0) < 1e-9);
  }
}
