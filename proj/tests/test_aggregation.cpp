#include <cmath>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"
#include "varan/aggregation.hpp"

using namespace varan;

namespace {

PosteriorPredictorParams random_posterior(Tape& tape, Rng& rng, std::size_t d, std::size_t heads) {
  PosteriorPredictorParams p;
  const std::size_t dh = d / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    p.query.push_back(tape.constant(test::random_tensor(rng, {d, dh})));
    p.key.push_back(tape.constant(test::random_tensor(rng, {d, dh})));
    p.value.push_back(tape.constant(test::random_tensor(rng, {d, dh})));
  }
  p.out_weight = tape.constant(test::random_tensor(rng, {d, d}));
  p.out_bias = tape.constant(test::random_tensor(rng, {d}));
  p.score = tape.constant(test::random_tensor(rng, {d, 1}));
  return p;
}

ProbingHead random_head(Tape& tape, Rng& rng, std::size_t d, std::size_t hidden, std::size_t classes) {
  ProbingHead h;
  h.hidden_weight = tape.constant(test::random_tensor(rng, {d, hidden}));
  h.hidden_bias = tape.constant(test::random_tensor(rng, {hidden}));
  h.out_weight = tape.constant(test::random_tensor(rng, {hidden, classes}));
  h.out_bias = tape.constant(test::random_tensor(rng, {classes}));
  return h;
}

}  // namespace

TEST_CASE("pooling over the sequence") {
  Rng rng(31);
  const Tensor one = test::random_tensor(rng, {2, 3, 1, 4});
  CHECK(pool_layers(LayerStack(one)) == one.reshaped({2, 3, 4}));

  Tensor flat(Shape{1, 2, 3, 2});
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t t = 0; t < 3; ++t) {
      flat.at({0, l, t, 0}) = 0.7 + l;
      flat.at({0, l, t, 1}) = -1.25;
    }
  const Tensor pf = pool_layers(LayerStack(flat));
  CHECK(pf.at({0, 0, 0}) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(pf.at({0, 1, 1}) == -1.25);

  const Tensor x = test::random_tensor(rng, {2, 3, 5, 4});
  const Tensor p = pool_layers(LayerStack(x));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t j = 0; j < 4; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < 5; ++t) s += x.at({b, l, t, j});
        CHECK(std::abs(p.at({b, l, j}) - s / 5) <= 1e-15);
      }
  CHECK_THROWS_AS(LayerStack(Tensor(Shape{2, 3})), ShapeError);
}

TEST_CASE("posterior with one layer is always [1]") {
  Rng rng(32);
  Tape tape;
  const auto params = random_posterior(tape, rng, 4, 2);
  const Var w = posterior_forward(tape.constant(test::random_tensor(rng, {5, 1, 4}, -3, 3)), params);
  for (double v : w.value().data()) CHECK(v == 1.0);
}

TEST_CASE("posterior rows are categoricals and depend only on their own sample") {
  Rng rng(33);
  Tape tape;
  const auto params = random_posterior(tape, rng, 8, 4);
  Tensor pooled = test::random_tensor(rng, {4, 6, 8});
  for (std::size_t l = 0; l < 6; ++l)
    for (std::size_t j = 0; j < 8; ++j) pooled.at({3, l, j}) = pooled.at({1, l, j});
  const Tensor w = posterior_forward(tape.constant(pooled), params).value();
  for (std::size_t b = 0; b < 4; ++b) {
    double s = 0.0;
    for (std::size_t l = 0; l < 6; ++l) {
      CHECK(w.at({b, l}) >= 0.0);
      s += w.at({b, l});
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
  for (std::size_t l = 0; l < 6; ++l) CHECK(w.at({1, l}) == w.at({3, l}));
}

TEST_CASE("posterior is exactly equivariant to layer permutations") {
  Rng rng(34);
  const std::vector<std::size_t> perm{4, 2, 5, 0, 3, 1};
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape;
    const auto params = random_posterior(tape, rng, 8, 2);
    const Tensor pooled = test::random_tensor(rng, {3, 6, 8}, -2, 2);
    Tensor permuted(pooled.shape());
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t l = 0; l < 6; ++l)
        for (std::size_t j = 0; j < 8; ++j) permuted.at({b, l, j}) = pooled.at({b, perm[l], j});
    const Tensor w = posterior_forward(tape.constant(pooled), params).value();
    const Tensor wp = posterior_forward(tape.constant(permuted), params).value();
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t l = 0; l < 6; ++l) CHECK(wp.at({b, l}) == w.at({b, perm[l]}));
  }
}

TEST_CASE("zero output layers give uniform class log-probs") {
  Rng rng(35);
  Tape tape;
  ProbingHeadParams heads;
  for (int i = 0; i < 3; ++i) {
    ProbingHead h = random_head(tape, rng, 4, 5, 3);
    h.out_weight = tape.constant(Tensor(Shape{5, 3}, 0.0));
    h.out_bias = tape.constant(Tensor(Shape{3}, 0.0));
    heads.heads.push_back(h);
  }
  const Var logits = heads_forward(tape.constant(test::random_tensor(rng, {2, 3, 2, 4})), heads);
  const Tensor lp = log_softmax_axis(logits.value(), 2);
  for (double v : lp.data()) CHECK(v == doctest::Approx(-std::log(3.0)).epsilon(1e-15));
}

TEST_CASE("head matches an explicit two-matrix forward") {
  Rng rng(36);
  Tape tape;
  const ProbingHead h = random_head(tape, rng, 3, 4, 2);
  const Tensor x = test::random_tensor(rng, {2, 3});
  const Tensor out = head_forward(tape.constant(x), h).value();
  const Tensor& w1 = h.hidden_weight->value();
  const Tensor& b1 = h.hidden_bias->value();
  const Tensor& w2 = h.out_weight.value();
  const Tensor& b2 = h.out_bias.value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 2; ++c) {
      double o = b2[c];
      for (std::size_t u = 0; u < 4; ++u) {
        double z = b1[u];
        for (std::size_t i = 0; i < 3; ++i) z += x.at({b, i}) * w1.at({i, u});
        o += std::tanh(z) * w2.at({u, c});
      }
      CHECK(std::abs(out.at({b, c}) - o) <= 1e-12);
    }

  ProbingHead linear;
  linear.out_weight = tape.constant(Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}));
  linear.out_bias = tape.constant(Tensor::vector({0.5, -0.5}));
  const Tensor lo = head_forward(tape.constant(Tensor::matrix({{1, 0, 1}})), linear).value();
  CHECK(lo == Tensor::matrix({{6.5, 7.5}}));
}

TEST_CASE("heads are isolated per layer") {
  Rng rng(37);
  Tape tape;
  ProbingHeadParams heads;
  for (int i = 0; i < 4; ++i) heads.heads.push_back(random_head(tape, rng, 3, 5, 2));
  Tensor x = test::random_tensor(rng, {2, 4, 3, 3});
  const Tensor before = heads_forward(tape.constant(x), heads).value();
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < 3; ++j) x.at({1, 2, t, j}) += 0.5;
  const Tensor after = heads_forward(tape.constant(x), heads).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t c = 0; c < 2; ++c) {
        if (l == 2 && b == 1) {
          CHECK(after.at({b, l, c}) != before.at({b, l, c}));
        } else {
          CHECK(after.at({b, l, c}) == before.at({b, l, c}));
        }
      }
}

TEST_CASE("layer weighted sum") {
  Rng rng(38);
  Tape tape;
  const Tensor x = test::random_tensor(rng, {2, 3, 2, 4});
  const Var stack = tape.constant(x);
  const Tensor sel = layer_weighted_sum(stack, tape.constant(Tensor::vector({0, 1, 0}))).value();
  const Tensor mid = ad::select(stack, 1, 1).value();
  CHECK(sel == mid);

  const Var two = tape.constant(Tensor(Shape{1, 2, 1, 1}, std::vector<double>{2, 4}));
  CHECK(layer_weighted_sum(two, tape.constant(Tensor::vector({0.5, 0.5}))).value().item() == 3.0);

  const Tensor w = test::random_tensor(rng, {2, 3}, 0, 1);
  const Tensor out = layer_weighted_sum(stack, tape.constant(w)).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t j = 0; j < 4; ++j) {
        double s = 0.0;
        for (std::size_t l = 0; l < 3; ++l) s += w.at({b, l}) * x.at({b, l, t, j});
        CHECK(std::abs(out.at({b, t, j}) - s) <= 1e-15);
      }
  CHECK_THROWS_AS(layer_weighted_sum(stack, tape.constant(Tensor::vector({1, 0}))), ShapeError);
}

TEST_CASE("last layer selection") {
  Rng rng(39);
  Tape tape;
  const Tensor single = test::random_tensor(rng, {2, 1, 3, 4});
  CHECK(last_layer_select(tape.constant(single)).value() == single.reshaped({2, 3, 4}));
  const Tensor x = test::random_tensor(rng, {2, 5, 3, 4});
  const Tensor top = last_layer_select(tape.constant(x)).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t j = 0; j < 4; ++j) CHECK(top.at({b, t, j}) == x.at({b, 4, t, j}));
}

TEST_CASE("one-hot weighted sum equals the last layer") {
  Rng rng(40);
  Tape tape;
  const Var stack = tape.constant(test::random_tensor(rng, {3, 4, 2, 5}));
  const Var logits = tape.constant(Tensor::vector({-1000, -1000, -1000, 0}));
  CHECK(weighted_sum_aggregate(stack, logits).value() == last_layer_select(stack).value());
}

TEST_CASE("lora linear") {
  Rng rng(41);
  Tape tape;
  const Var x = tape.constant(test::random_tensor(rng, {2, 3, 4}));
  const Var w = tape.constant(test::random_tensor(rng, {4, 5}));
  const Var a0 = tape.constant(Tensor(Shape{4, 2}, 0.0));
  const Var b = tape.constant(test::random_tensor(rng, {2, 5}));
  CHECK(lora_linear(x, w, a0, b, 1.0).value() == ad::matmul(x, w).value());

  const Var eye = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  const Var a = tape.constant(Tensor::matrix({{1}, {0}}));
  const Var bb = tape.constant(Tensor::matrix({{0, 1}}));
  CHECK(lora_linear(eye, eye, a, bb, 1.0).value() == Tensor::matrix({{1, 1}, {0, 1}}));

  CHECK_THROWS_AS(lora_linear(x, w, tape.constant(Tensor(Shape{4, 5}, 0.0)), tape.constant(Tensor(Shape{5, 5}, 0.0)), 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(lora_linear(x, w, tape.constant(Tensor(Shape{3, 2}, 0.0)), b, 1.0), ShapeError);
}

TEST_CASE("long weight export") {
  std::ostringstream os;
  const std::vector<std::size_t> ids{7, 9};
  write_weights_long(os, Tensor::matrix({{0.25, 0.75}, {1, 0}}), ids);
  CHECK(os.str() == "sample_id,layer_index,weight\n7,1,0.25\n7,2,0.75\n9,1,1\n9,2,0\n");
}
