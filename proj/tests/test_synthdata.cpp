#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "test_util.hpp"
#include "varan/backbone.hpp"
#include "varan/container.hpp"
#include "varan/synthdata.hpp"

using namespace varan;
namespace fs = std::filesystem;

namespace {

// Straight transcription of the published xoshiro256** and splitmix64.
struct RefXoshiro {
  std::uint64_t s[4];
  explicit RefXoshiro(std::uint64_t seed) {
    for (auto& w : s) {
      std::uint64_t z = (seed += 0x9e3779b97f4a7c15ULL);
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      w = z ^ (z >> 31);
    }
  }
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t next() {
    const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }
};

SynthSpec small_spec() {
  SynthSpec s;
  s.n_train = 300;
  s.n_val = 50;
  s.n_test = 200;
  return s;
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("varan_test_" + name); }

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("generator matches the reference algorithm") {
  std::uint64_t state = 0;
  CHECK(splitmix64(state) == 0xe220a8397b1dcdafULL);
  Rng rng(42);
  RefXoshiro ref(42);
  for (int i = 0; i < 1000; ++i) CHECK(rng.next() == ref.next());
}

TEST_CASE("uniform and normal draws are well formed") {
  Rng rng(7);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    CHECK((u > 0.0 && u <= 1.0));
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sq / n - 1.0) < 0.01);
  for (int i = 0; i < 1000; ++i) CHECK(rng.below(6) < 6);
}

TEST_CASE("spec validation") {
  SynthSpec s;
  CHECK_NOTHROW(s.validate());
  CHECK(s.informative_layer(0) == 1);
  CHECK(s.informative_layer(1) == 3);
  CHECK(s.informative_layer(2) == 5);
  s.n_regimes = 7;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = SynthSpec{};
  s.n_classes = 1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = SynthSpec{};
  s.noise_sigma = -1.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  CHECK(synth_spec_from_json(to_json(SynthSpec{})).informative_layer(2) == 5);
}

TEST_CASE("same spec gives bit-identical datasets") {
  const auto a = generate_dataset(small_spec());
  const auto b = generate_dataset(small_spec());
  CHECK(a.train.stacks == b.train.stacks);
  CHECK(a.test.labels == b.test.labels);
  SynthSpec other = small_spec();
  other.seed = 43;
  CHECK_FALSE(generate_dataset(other).train.stacks == a.train.stacks);
}

TEST_CASE("shapes, label ranges and disjoint splits") {
  const SynthSpec spec = small_spec();
  const auto ds = generate_dataset(spec);
  CHECK(ds.train.stacks.shape() == Shape{300, 6, 8, 32});
  CHECK(ds.val.size() == 50);
  std::set<std::size_t> seen;
  for (const SplitData* s : {&ds.train, &ds.val, &ds.test}) {
    for (std::size_t i = 0; i < s->size(); ++i) {
      CHECK(seen.insert(s->ids[i]).second);
      CHECK((s->labels[i] >= 0 && s->labels[i] < 4));
      CHECK((s->regimes[i] >= 0 && s->regimes[i] < 3));
    }
  }
  CHECK(seen.size() == 550);
}

TEST_CASE("regime-revealed probe ceiling on the default spec") {
  const auto ds = generate_dataset(SynthSpec{});
  CHECK(oracle_probe_accuracy(ds.train, ds.test, ds.spec) >= 0.9);
}

TEST_CASE("zeroing the informative layer removes the label signal") {
  const auto ds = generate_dataset(SynthSpec{});
  const auto train = ablate_informative_layer(ds.train, ds.spec);
  const auto test = ablate_informative_layer(ds.test, ds.spec);
  CHECK(std::abs(oracle_probe_accuracy(train, test, ds.spec) - 0.25) <= 0.05);
}

TEST_CASE("no signal means chance-level probe") {
  SynthSpec spec;
  spec.signal_strength = 0.0;
  const auto ds = generate_dataset(spec);
  CHECK(std::abs(oracle_probe_accuracy(ds.train, ds.test, spec) - 0.25) <= 0.05);
}

TEST_CASE("dataset file round trip") {
  const auto ds = generate_dataset(small_spec());
  const auto p1 = temp_file("ds1.bin"), p2 = temp_file("ds2.bin");
  save_dataset(p1, ds);
  const auto back = load_dataset(p1);
  CHECK(back.train.stacks == ds.train.stacks);
  CHECK(back.val.labels == ds.val.labels);
  CHECK(back.test.regimes == ds.test.regimes);
  CHECK(back.test.ids == ds.test.ids);
  CHECK(back.spec.seed == ds.spec.seed);
  save_dataset(p2, back);
  CHECK(slurp(p1) == slurp(p2));

  const std::string bytes = slurp(p1);
  {
    std::ofstream f(p2, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_dataset(p2), CorruptFileError);
  {
    std::ofstream f(p2, std::ios::binary);
    f << "not a dataset";
  }
  CHECK_THROWS_AS(load_dataset(p2), CorruptFileError);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("dataset format version is checked") {
  Container c;
  c.meta["format"] = "varan-dataset";
  c.meta["format_version"] = kDatasetFormatVersion + 1;
  const auto p = temp_file("ds_version.bin");
  write_container(p, c);
  CHECK_THROWS_AS(load_dataset(p), FormatVersionError);
  fs::remove(p);
}

TEST_CASE("toy backbone") {
  Rng rng(61);
  const auto w = make_backbone(2, 3, 3, 5);
  const auto w2 = make_backbone(2, 3, 3, 5);
  CHECK(w.input_proj == w2.input_proj);
  CHECK(w.ffn[1] == w2.ffn[1]);

  const Tensor raw = test::random_tensor(rng, {1, 2, 3});
  Tape tape;
  const BackboneVars bv = bind_frozen(tape, w);
  const Tensor stack = toy_backbone_forward(tape.constant(raw), bv, nullptr).value();
  CHECK(stack.shape() == Shape{1, 2, 2, 3});

  // h0 = raw P, h_i = h_{i-1} + tanh(h_{i-1} W_i), written out by hand.
  for (std::size_t t = 0; t < 2; ++t) {
    double h[3];
    for (std::size_t j = 0; j < 3; ++j) {
      h[j] = 0.0;
      for (std::size_t i = 0; i < 3; ++i) h[j] += raw.at({0, t, i}) * w.input_proj.at({i, j});
    }
    for (std::size_t l = 0; l < 2; ++l) {
      double next[3];
      for (std::size_t j = 0; j < 3; ++j) {
        double z = 0.0;
        for (std::size_t i = 0; i < 3; ++i) z += h[i] * w.ffn[l].at({i, j});
        next[j] = h[j] + std::tanh(z);
      }
      for (std::size_t j = 0; j < 3; ++j) {
        h[j] = next[j];
        CHECK(std::abs(stack.at({0, l, t, j}) - h[j]) <= 1e-12);
      }
    }
  }

  const Tensor with0 = toy_backbone_forward(tape.constant(raw), bv, nullptr, true).value();
  CHECK(with0.shape() == Shape{1, 3, 2, 3});

  LoraAdapters lora;
  lora.scale = 2.0;
  for (int l = 0; l < 2; ++l) {
    lora.a.push_back(tape.constant(Tensor(Shape{3, 1}, 0.0)));
    lora.b.push_back(tape.constant(test::random_tensor(rng, {1, 3})));
  }
  CHECK(toy_backbone_forward(tape.constant(raw), bv, &lora).value() == stack);
}
