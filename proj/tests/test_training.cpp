#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"
#include "varan/container.hpp"
#include "varan/training.hpp"

using namespace varan;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
  RunConfig c;
  c.synth.n_train = 400;
  c.synth.n_val = 100;
  c.synth.n_test = 200;
  c.model.head_hidden = 16;
  c.optim.epochs = 2;
  c.optim.lr = 1e-3;
  return c;
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("varan_test_" + name); }

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::vector<std::size_t> first_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = i;
  return r;
}

}  // namespace

TEST_CASE("adam leaves parameters alone with zero gradient and no decay") {
  std::map<std::string, Tensor> params{{"w", Tensor::vector({1.0, -2.0})}};
  AdamState st;
  st.lr = 0.1;
  st.weight_decay = 0.0;
  for (int i = 0; i < 3; ++i) adam_step(params, {{"w", Tensor::vector({0.0, 0.0})}}, st);
  CHECK(params.at("w") == Tensor::vector({1.0, -2.0}));
}

TEST_CASE("first adam step moves by lr against the gradient sign") {
  std::map<std::string, Tensor> params{{"w", Tensor::vector({0.5, 0.5, 0.5})}};
  AdamState st;
  st.lr = 0.01;
  adam_step(params, {{"w", Tensor::vector({3.0, -0.2, 40.0})}}, st);
  CHECK(params.at("w")[0] == doctest::Approx(0.49).epsilon(1e-9));
  CHECK(params.at("w")[1] == doctest::Approx(0.51).epsilon(1e-9));
  CHECK(params.at("w")[2] == doctest::Approx(0.49).epsilon(1e-9));
}

TEST_CASE("adam on a scalar quadratic matches a hand-stepped recursion") {
  // f(x) = (x - 3)^2, g = 2 (x - 3).
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.1;
  double x = 1.0, m = 0.0, v = 0.0;
  std::map<std::string, Tensor> params{{"x", Tensor::scalar(1.0)}};
  AdamState st;
  st.lr = lr;
  st.weight_decay = wd;
  for (int t = 1; t <= 3; ++t) {
    const double g = 2.0 * (x - 3.0);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    x = x - lr * wd * x;
    x = x - lr * mh / (std::sqrt(vh) + eps);

    adam_step(params, {{"x", Tensor::scalar(2.0 * (params.at("x").item() - 3.0))}}, st);
    CHECK(std::abs(params.at("x").item() - x) <= 1e-12);
  }
  CHECK(st.step == 3);
}

TEST_CASE("non-finite gradient aborts the step and names the parameter") {
  std::map<std::string, Tensor> params{{"a", Tensor::scalar(1.0)}, {"b", Tensor::scalar(2.0)}};
  AdamState st;
  try {
    adam_step(params, {{"a", Tensor::scalar(1.0)}, {"b", Tensor::scalar(INFINITY)}}, st);
    FAIL("expected an exception");
  } catch (const NonFiniteGradientError& e) {
    CHECK(std::string(e.what()).find("'b'") != std::string::npos);
  }
  CHECK(params.at("a").item() == 1.0);
  CHECK(st.step == 0);
  CHECK(st.m.empty());
}

TEST_CASE("zero epochs return the initialization") {
  RunConfig c = small_config();
  c.optim.epochs = 0;
  const auto ds = generate_dataset(c.synth_spec());
  const auto r = train(c, ds, ModelKind::varan);
  const ModelState init = init_model(c.model, {6, 32, 4}, derive_seed(c.seed, kInitStream));
  CHECK(r.checkpoint.step == 0);
  CHECK(r.checkpoint.state.params == init.params);
}

TEST_CASE("training is deterministic") {
  const RunConfig c = small_config();
  const auto ds = generate_dataset(c.synth_spec());
  std::ostringstream a, b;
  const auto ra = train(c, ds, ModelKind::varan, &a);
  const auto rb = train(c, ds, ModelKind::varan, &b);
  CHECK(a.str() == b.str());
  CHECK(ra.checkpoint.state.params == rb.checkpoint.state.params);
  // step 0 val, then train and val per epoch, then test
  CHECK(ra.metrics.size() == 1 + 2 * c.optim.epochs + 1);
  CHECK(ra.metrics.back()["split"] == "test");
}

TEST_CASE("every varan parameter gets a gradient at initialization") {
  RunConfig c = small_config();
  c.model.head_hidden = 256;
  const auto ds = generate_dataset(c.synth_spec());
  const auto rows = first_rows(16);
  const ModelState st = init_model(c.model, {6, 32, 4}, derive_seed(c.seed, kInitStream));
  const auto zero = zero_gradient_params(c, st, ds.train.batch(rows), ds.train.batch_labels(rows));
  CHECK_MESSAGE(zero.empty(), (zero.empty() ? std::string() : zero.front()));

  // With A = 0 the gradient of B is exactly zero until A has moved once.
  c.model.lora.enabled = true;
  ModelState lora = init_model(c.model, {6, 32, 4}, derive_seed(c.seed, kInitStream));
  for (const auto& name : zero_gradient_params(c, lora, ds.train.batch(rows), ds.train.batch_labels(rows))) {
    CHECK(name.find("lora.") == 0);
    CHECK(name.substr(name.size() - 2) == ".b");
  }
  for (auto& [name, t] : lora.params)
    if (name.find("lora.") == 0 && name.substr(name.size() - 2) == ".a") t[0] = 0.01;
  CHECK(zero_gradient_params(c, lora, ds.train.batch(rows), ds.train.batch_labels(rows)).empty());
}

TEST_CASE("LoRA training never moves the frozen base") {
  RunConfig c = small_config();
  c.model.lora.enabled = true;
  c.model.lora.rank = 4;
  const auto ds = generate_dataset(c.synth_spec());
  const ModelState init = init_model(c.model, {6, 32, 4}, derive_seed(c.seed, kInitStream));
  const auto r = train(c, ds, ModelKind::varan);
  CHECK(r.checkpoint.step > 0);
  CHECK(r.checkpoint.state.frozen == init.frozen);
  CHECK_FALSE(r.checkpoint.state.params.at("lora.0.a") == init.params.at("lora.0.a"));
}

TEST_CASE("checkpoint round trip and errors") {
  const RunConfig c = small_config();
  Checkpoint ck;
  ck.state = init_model(c.model, {6, 32, 4}, 3);
  ck.config = to_json(c);
  ck.step = 17;
  ck.best_val_metric = 0.625;
  const auto p1 = temp_file("ck1.bin"), p2 = temp_file("ck2.bin");
  save_checkpoint(p1, ck);
  const Checkpoint back = load_checkpoint(p1, ModelKind::varan);
  CHECK(back.state.params == ck.state.params);
  CHECK(back.step == 17);
  CHECK(back.best_val_metric == 0.625);
  save_checkpoint(p2, back);
  CHECK(slurp(p1) == slurp(p2));

  CHECK_THROWS_AS(load_checkpoint(p1, ModelKind::weighted_sum), KindMismatchError);

  const std::string bytes = slurp(p1);
  {
    std::ofstream f(p2, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
  }
  CHECK_THROWS_AS(load_checkpoint(p2), CorruptFileError);

  Container bad;
  bad.meta["format"] = "varan-checkpoint";
  bad.meta["format_version"] = kCheckpointFormatVersion + 1;
  write_container(p2, bad);
  CHECK_THROWS_AS(load_checkpoint(p2), FormatVersionError);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("untrained posterior gives near-uniform weight rows") {
  RunConfig c = small_config();
  c.optim.epochs = 0;
  const auto ds = generate_dataset(c.synth_spec());
  const auto r = train(c, ds, ModelKind::varan);
  const auto p = temp_file("weights.csv");
  export_weight_analysis(c, r.checkpoint, ds.test, p);
  std::ifstream f(p);
  std::string line;
  std::getline(f, line);
  CHECK(line == "sample_id,true_regime,argmax_layer,w_1,w_2,w_3,w_4,w_5,w_6");
  std::size_t rows = 0;
  while (std::getline(f, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    REQUIRE(v.size() == 9);
    double lo = 1.0, hi = 0.0, sum = 0.0;
    for (std::size_t i = 3; i < 9; ++i) {
      lo = std::min(lo, v[i]);
      hi = std::max(hi, v[i]);
      sum += v[i];
    }
    CHECK(hi - lo < 0.1);
    CHECK(std::abs(sum - 1.0) <= 1e-9);
    ++rows;
  }
  CHECK(rows == ds.test.size());
  fs::remove(p);

  Checkpoint ws;
  ws.state = init_model(ModelConfig{ModelKind::weighted_sum}, {6, 32, 4}, 1);
  CHECK_THROWS_AS(export_weight_analysis(c, ws, ds.test, p), KindMismatchError);
}

TEST_CASE("no-signal data trains to chance accuracy") {
  RunConfig c;
  c.synth.signal_strength = 0.0;
  c.model.head_hidden = 32;
  c.optim.epochs = 3;
  c.optim.lr = 1e-3;
  const auto ds = generate_dataset(c.synth_spec());
  const auto r = train(c, ds, ModelKind::varan);
  CHECK(std::abs(r.test.accuracy - 0.25) <= 0.05);
}

TEST_CASE("a single regime leaves nothing for per-sample weighting to gain") {
  RunConfig c;
  c.synth.n_regimes = 1;
  // At the default lr the static softmax logits are still moving after 30
  // epochs; a tenfold step lets both models converge.
  c.optim.lr = 1e-3;
  const auto ds = generate_dataset(c.synth_spec());
  const double varan_acc = train(c, ds, ModelKind::varan).test.accuracy;
  const double ws_acc = train(c, ds, ModelKind::weighted_sum).test.accuracy;
  MESSAGE("R=1: varan " << varan_acc << ", weighted sum " << ws_acc);
  CHECK(std::abs(varan_acc - ws_acc) < 0.02);
}

TEST_CASE("divergence is reported") {
  RunConfig c = small_config();
  c.optim.lr = 1e200;
  c.optim.weight_decay = 0.0;
  const auto ds = generate_dataset(c.synth_spec());
  CHECK_THROWS_AS(train(c, ds, ModelKind::varan), std::runtime_error);
}
