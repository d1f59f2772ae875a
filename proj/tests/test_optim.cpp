#include <doctest.h>

#include <cmath>

#include "blobdiff/optim.hpp"
#include "blobdiff/params.hpp"
#include "blobdiff/serialize.hpp"

using namespace blobdiff;

namespace {

// Accumulates a fixed gradient g on every element of the named parameter.
void seed_grad(ParamStore& ps, const std::string& name, double g) {
  ag::Var p = ps.get(name);
  Tensor w(p.val().shape);
  for (auto& v : w.data) v = g;
  ag::Var loss = ag::sum_all(ag::mul(p, ag::constant(w)));
  ag::backward(loss);
}

}  // namespace

TEST_CASE("adamw: first step matches the closed form") {
  ParamStore ps;
  Rng rng(1);
  ps.create_zeros("x", {1});
  ps.get("x").val().data[0] = 2.0;

  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  AdamW opt(cfg);
  seed_grad(ps, "x", 0.5);
  opt.step(ps);

  // m-hat = g, v-hat = g^2 after one step, so the Adam part is g/(|g|+eps).
  const double expected =
      2.0 - 0.1 * (0.5 / (std::sqrt(0.25) + 1e-8) + 0.01 * 2.0);
  CHECK(ps.get("x").val().data[0] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(opt.step_count() == 1);

  // Gradients are consumed by the step.
  const Tensor& g = ps.get("x").grad();
  REQUIRE(g.shape == ps.get("x").val().shape);
  CHECK(g.data[0] == 0.0);
}

TEST_CASE("adamw: leaves without a gradient this step are untouched") {
  ParamStore ps;
  Rng rng(2);
  ps.create("a", {3}, 1.0, rng);
  ps.create("b", {2, 2}, 1.0, rng);
  Tensor b_before = ps.get("b").val();

  AdamW opt;
  seed_grad(ps, "a", 1.0);
  opt.step(ps);
  CHECK(ps.get("b").val().bit_equal(b_before));
  CHECK_FALSE(ps.get("a").val().bit_equal(Tensor::zeros({3})));
}

TEST_CASE("adamw: state round-trip resumes bit-exactly") {
  auto make_store = [](ParamStore& ps) {
    Rng rng(3);
    ps.create("w1", {4}, 1.0, rng);
    ps.create("w2", {2, 3}, 1.0, rng);
  };
  auto train_step = [](ParamStore& ps, AdamW& opt, int step) {
    seed_grad(ps, "w1", 0.3 + 0.1 * step);
    seed_grad(ps, "w2", -0.2 + 0.05 * step);
    opt.step(ps);
  };

  ParamStore ps;
  make_store(ps);
  AdamW opt(AdamWConfig{.lr = 1e-2});
  for (int s = 0; s < 3; ++s) train_step(ps, opt, s);
  TensorMap saved_params = ps.snapshot();
  TensorMap saved_state = opt.state();
  for (int s = 3; s < 5; ++s) train_step(ps, opt, s);
  const uint64_t hash_a = ps.values_hash();

  ParamStore ps2;
  make_store(ps2);
  ps2.load_values(saved_params, /*strict=*/true);
  AdamW opt2(AdamWConfig{.lr = 1e-2});
  opt2.load_state(saved_state);
  CHECK(opt2.step_count() == 3);
  for (int s = 3; s < 5; ++s) train_step(ps2, opt2, s);
  CHECK(ps2.values_hash() == hash_a);
  CHECK(tensor_map_hash(opt2.state()) == tensor_map_hash(opt.state()));

  CHECK_THROWS(opt2.load_state(TensorMap{}));  // missing step count
}

TEST_CASE("adamw: weight decay is decoupled from the gradient") {
  // With a zero gradient (explicitly accumulated), the update is pure decay.
  ParamStore ps;
  ps.create_zeros("x", {1});
  ps.get("x").val().data[0] = 5.0;
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  AdamW opt(cfg);
  seed_grad(ps, "x", 0.0);
  opt.step(ps);
  CHECK(ps.get("x").val().data[0] == doctest::Approx(5.0 - 0.1 * 0.5 * 5.0).epsilon(1e-12));
}
