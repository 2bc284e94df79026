#include <doctest.h>

#include <cmath>
#include <numbers>

#include "prima/errors.hpp"
#include "prima/optimizer.hpp"

using namespace prima;

TEST_CASE("warm-up then cosine matches the closed form") {
  const double base = 3e-4;
  for (std::size_t total : {1u, 7u, 10u, 100u, 333u}) {
    WarmupCosine sched(base, total, 0.1);
    const std::size_t w = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(total)));
    CHECK(sched.warmup_steps() == w);
    for (std::size_t s = 0; s < total; ++s) {
      double expected;
      if (s < w) {
        expected = base * static_cast<double>(s + 1) / static_cast<double>(w);
      } else {
        expected = 0.5 * base *
                   (1.0 + std::cos(std::numbers::pi * static_cast<double>(s - w) /
                                       static_cast<double>(total - w)));
      }
      CHECK(std::abs(sched(s) - expected) <= 1e-9 * base);
    }
  }
  WarmupCosine sched(1.0, 100, 0.1);
  CHECK(sched(9) == doctest::Approx(1.0));
  CHECK(sched(10) == doctest::Approx(1.0));
  for (std::size_t s = 10; s + 1 < 100; ++s) CHECK(sched(s + 1) <= sched(s));
}

TEST_CASE("schedule validation") {
  CHECK_THROWS_AS(WarmupCosine(0.0, 10, 0.1), ConfigError);
  CHECK_THROWS_AS(WarmupCosine(1.0, 0, 0.1), ConfigError);
  CHECK_THROWS_AS(WarmupCosine(1.0, 10, 1.0), ConfigError);
}

TEST_CASE("AdamW first step moves each coordinate by about lr against the gradient") {
  nn::ParameterStore store;
  Matrix init(1, 3);
  init << 1.0, -2.0, 0.5;
  store.add("w", "c", init);
  store.add("frozen", "d", Matrix::Constant(1, 2, 3.0));
  store.set_trainable({"c"}, true);
  auto w = store.get("w").var;
  auto f = store.get("frozen").var;
  const ag::Var loss = ag::sum(ag::mul(ag::mul(w, w), ag::constant(Matrix::Constant(1, 3, 1.0))));
  store.zero_grad();
  ag::backward(loss);
  AdamW opt(store.trainable(), AdamWConfig{});
  const double norm = opt.step(0.01);
  CHECK(norm == doctest::Approx(2.0 * init.norm()));
  for (int j = 0; j < 3; ++j) {
    const double sign = init(0, j) > 0 ? 1.0 : -1.0;
    CHECK(w.value()(0, j) == doctest::Approx(init(0, j) - 0.01 * sign).epsilon(1e-6));
  }
  CHECK(f.value()(0, 0) == 3.0);
}

TEST_CASE("AdamW decoupled weight decay shrinks weights without gradients") {
  nn::ParameterStore store;
  store.add("w", "c", Matrix::Constant(2, 2, 4.0));
  store.set_trainable({"c"}, true);
  store.zero_grad();
  AdamWConfig cfg;
  cfg.weight_decay = 0.5;
  AdamW opt(store.trainable(), cfg);
  opt.step(0.1);
  CHECK(store.get("w").value()(1, 1) == doctest::Approx(4.0 * (1.0 - 0.05)));
}

TEST_CASE("AdamW clipping and non-finite gradients") {
  nn::ParameterStore store;
  store.add("w", "c", Matrix::Constant(1, 2, 1.0));
  store.set_trainable({"c"}, true);
  auto w = store.get("w").var;
  w.node()->grad = Matrix::Constant(1, 2, 100.0);
  AdamWConfig cfg;
  cfg.clip_norm = 1.0;
  AdamW opt(store.trainable(), cfg);
  CHECK(opt.step(0.01) == doctest::Approx(100.0 * std::sqrt(2.0)));
  w.node()->grad = Matrix::Constant(1, 2, std::nan(""));
  CHECK_THROWS_AS(opt.step(0.01), TrainingAborted);
}
