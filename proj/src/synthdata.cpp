#include "varan/synthdata.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "varan/container.hpp"
#include "varan/rng.hpp"

namespace varan {

void SynthSpec::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("synthetic spec: ") + what);
  };
  need(n_layers >= 2, "n_layers must be >= 2");
  need(dim >= 1 && seq_len >= 1, "dim and seq_len must be >= 1");
  need(n_classes >= 2, "n_classes must be >= 2");
  need(n_regimes >= 1 && n_regimes <= n_layers, "n_regimes must lie in [1, n_layers]");
  need(std::isfinite(signal_strength) && signal_strength >= 0.0, "signal_strength must be finite and >= 0");
  need(std::isfinite(noise_sigma) && noise_sigma > 0.0, "noise_sigma must be > 0");
  need(n_train >= 1 && n_val >= 1 && n_test >= 1, "every split needs at least one sample");
}

std::size_t SynthSpec::informative_layer(std::size_t regime) const {
  if (regime >= n_regimes) throw std::out_of_range("regime out of range");
  return (regime + 1) * n_layers / n_regimes - 1;
}

nlohmann::ordered_json to_json(const SynthSpec& s) {
  return {{"n_layers", s.n_layers},   {"dim", s.dim},
          {"seq_len", s.seq_len},     {"n_classes", s.n_classes},
          {"n_regimes", s.n_regimes}, {"signal_strength", s.signal_strength},
          {"noise_sigma", s.noise_sigma}, {"n_train", s.n_train},
          {"n_val", s.n_val},         {"n_test", s.n_test},
          {"seed", s.seed}};
}

SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.n_layers = j.at("n_layers").get<std::size_t>();
  s.dim = j.at("dim").get<std::size_t>();
  s.seq_len = j.at("seq_len").get<std::size_t>();
  s.n_classes = j.at("n_classes").get<std::size_t>();
  s.n_regimes = j.at("n_regimes").get<std::size_t>();
  s.signal_strength = j.at("signal_strength").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.n_train = j.at("n_train").get<std::size_t>();
  s.n_val = j.at("n_val").get<std::size_t>();
  s.n_test = j.at("n_test").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

Tensor SplitData::batch(std::span<const std::size_t> rows) const {
  Shape shape = stacks.shape();
  const std::size_t per = stacks.numel() / shape[0];
  shape[0] = rows.size();
  std::vector<double> data(rows.size() * per);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = stacks.data().subspan(rows[i] * per, per);
    std::copy(src.begin(), src.end(), data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor(std::move(shape), std::move(data));
}

std::vector<Label> SplitData::batch_labels(std::span<const std::size_t> rows) const {
  std::vector<Label> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(labels[r]);
  return out;
}

const SplitData& SynthDataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw std::invalid_argument("unknown split '" + name + "' (expected train, val or test)");
}

namespace {

std::vector<double> random_direction(Rng& rng, std::size_t d, double norm) {
  std::vector<double> v(d);
  double sq = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    sq += x * x;
  }
  const double scale = norm / std::sqrt(sq);
  for (auto& x : v) x *= scale;
  return v;
}

SplitData generate_split(Rng& rng, const SynthSpec& spec, std::size_t count, std::size_t first_id,
                         const std::vector<std::vector<std::vector<double>>>& means,
                         const std::vector<std::vector<double>>& markers) {
  const std::size_t n = spec.n_layers, s = spec.seq_len, d = spec.dim;
  SplitData out;
  out.stacks = Tensor(Shape{count, n, s, d});
  out.labels.resize(count);
  out.regimes.resize(count);
  out.ids.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto r = static_cast<std::size_t>(rng.below(spec.n_regimes));
    const auto y = static_cast<std::size_t>(rng.below(spec.n_classes));
    out.regimes[i] = static_cast<std::int32_t>(r);
    out.labels[i] = static_cast<Label>(y);
    out.ids[i] = first_id + i;
    const std::size_t hot = spec.informative_layer(r);
    for (std::size_t l = 0; l < n; ++l) {
      const std::vector<double>& offset = l == hot ? means[r][y] : markers[r];
      const double gain = l == hot ? spec.signal_strength : 1.0;
      for (std::size_t t = 0; t < s; ++t) {
        double* row = &out.stacks[((i * n + l) * s + t) * d];
        for (std::size_t j = 0; j < d; ++j) row[j] = gain * offset[j] + spec.noise_sigma * rng.normal();
      }
    }
  }
  return out;
}

Container to_container(const SynthDataset& ds) {
  Container c;
  c.meta["format"] = "varan-dataset";
  c.meta["format_version"] = kDatasetFormatVersion;
  c.meta["spec"] = to_json(ds.spec);
  c.meta["split_sizes"] = {{"train", ds.train.size()}, {"val", ds.val.size()}, {"test", ds.test.size()}};
  for (const char* name : {"train", "val", "test"}) {
    const SplitData& sp = ds.split(name);
    c.f64.emplace_back(std::string(name) + ".stacks", sp.stacks);
  }
  for (const char* name : {"train", "val", "test"}) {
    const SplitData& sp = ds.split(name);
    c.i32.emplace_back(std::string(name) + ".labels", std::vector<std::int32_t>(sp.labels.begin(), sp.labels.end()));
    c.i32.emplace_back(std::string(name) + ".regimes", sp.regimes);
  }
  return c;
}

}  // namespace

SynthDataset generate_dataset(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<std::vector<std::vector<double>>> means(spec.n_regimes);
  for (auto& per_regime : means) {
    per_regime.resize(spec.n_classes);
    for (auto& mu : per_regime) mu = random_direction(rng, spec.dim, kClassMeanNorm);
  }
  std::vector<std::vector<double>> markers(spec.n_regimes);
  for (auto& m : markers) m = random_direction(rng, spec.dim, kMarkerNorm);

  SynthDataset ds;
  ds.spec = spec;
  ds.train = generate_split(rng, spec, spec.n_train, 0, means, markers);
  ds.val = generate_split(rng, spec, spec.n_val, spec.n_train, means, markers);
  ds.test = generate_split(rng, spec, spec.n_test, spec.n_train + spec.n_val, means, markers);
  return ds;
}

void save_dataset(const std::filesystem::path& path, const SynthDataset& ds) { write_container(path, to_container(ds)); }

SynthDataset load_dataset(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.meta.value("format", std::string()) != "varan-dataset") {
    throw CorruptFileError(path.string() + ": not a dataset file");
  }
  const int version = c.meta.value("format_version", -1);
  if (version != kDatasetFormatVersion) {
    throw FormatVersionError(path.string() + ": dataset format version " + std::to_string(version) + ", expected " +
                             std::to_string(kDatasetFormatVersion));
  }
  SynthDataset ds;
  try {
    ds.spec = synth_spec_from_json(c.meta.at("spec"));
    ds.spec.validate();
  } catch (const std::exception& e) {
    throw CorruptFileError(path.string() + ": bad spec in manifest (" + e.what() + ")");
  }
  const Shape expect_tail{ds.spec.n_layers, ds.spec.seq_len, ds.spec.dim};
  std::size_t first_id = 0;
  for (const char* name : {"train", "val", "test"}) {
    SplitData sp;
    sp.stacks = c.tensor(std::string(name) + ".stacks");
    const auto& labels = c.ints(std::string(name) + ".labels");
    sp.regimes = c.ints(std::string(name) + ".regimes");
    const std::size_t declared = c.meta.at("split_sizes").at(name).get<std::size_t>();
    const Shape& shape = sp.stacks.shape();
    if (shape.size() != 4 || Shape(shape.begin() + 1, shape.end()) != expect_tail || shape[0] != declared ||
        labels.size() != declared || sp.regimes.size() != declared) {
      throw CorruptFileError(path.string() + ": split '" + name + "' disagrees with its manifest");
    }
    sp.labels.assign(labels.begin(), labels.end());
    sp.ids.resize(declared);
    for (std::size_t i = 0; i < declared; ++i) sp.ids[i] = first_id + i;
    first_id += declared;
    SplitData& dst = std::string(name) == "train" ? ds.train : std::string(name) == "val" ? ds.val : ds.test;
    dst = std::move(sp);
  }
  return ds;
}

SplitData ablate_informative_layer(const SplitData& split, const SynthSpec& spec) {
  SplitData out = split;
  const std::size_t n = spec.n_layers, row = spec.seq_len * spec.dim;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t hot = spec.informative_layer(static_cast<std::size_t>(out.regimes[i]));
    std::fill_n(&out.stacks[(i * n + hot) * row], row, 0.0);
  }
  return out;
}

namespace {

// (N, n*d) sequence-pooled features.
std::vector<double> pooled_features(const SplitData& split, const SynthSpec& spec) {
  const std::size_t n = spec.n_layers, s = spec.seq_len, d = spec.dim;
  std::vector<double> f(split.size() * n * d, 0.0);
  for (std::size_t i = 0; i < split.size(); ++i)
    for (std::size_t l = 0; l < n; ++l)
      for (std::size_t t = 0; t < s; ++t)
        for (std::size_t j = 0; j < d; ++j) f[(i * n + l) * d + j] += split.stacks[((i * n + l) * s + t) * d + j];
  for (auto& v : f) v /= static_cast<double>(s);
  return f;
}

}  // namespace

double oracle_probe_accuracy(const SplitData& train, const SplitData& eval, const SynthSpec& spec) {
  const std::size_t width = spec.n_layers * spec.dim;
  const std::size_t R = spec.n_regimes, C = spec.n_classes;
  const auto ftrain = pooled_features(train, spec);
  const auto feval = pooled_features(eval, spec);

  std::vector<double> centroids(R * C * width, 0.0);
  std::vector<std::size_t> counts(R * C, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const std::size_t cell = static_cast<std::size_t>(train.regimes[i]) * C + static_cast<std::size_t>(train.labels[i]);
    counts[cell] += 1;
    for (std::size_t j = 0; j < width; ++j) centroids[cell * width + j] += ftrain[i * width + j];
  }
  for (std::size_t cell = 0; cell < R * C; ++cell)
    for (std::size_t j = 0; j < width; ++j) centroids[cell * width + j] /= static_cast<double>(std::max<std::size_t>(counts[cell], 1));

  std::size_t hits = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const auto r = static_cast<std::size_t>(eval.regimes[i]);
    std::size_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < C; ++y) {
      if (counts[r * C + y] == 0) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < width; ++j) {
        const double diff = feval[i * width + j] - centroids[(r * C + y) * width + j];
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = y;
      }
    }
    hits += static_cast<Label>(best) == eval.labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(eval.size());
}

}  // namespace varan
