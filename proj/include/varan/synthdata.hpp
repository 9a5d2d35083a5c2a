#pragma once

// Regime-switching benchmark. Each sample draws a hidden regime r and a
// label y. Layer map(r) carries the class mean signal_strength * mu[r][y]
// plus Gaussian noise; every other layer carries noise plus a marker vector
// for r that says nothing about y. The marker lets a per-sample weighting
// find the informative layer; any fixed weighting mixes in the noise of the
// other regimes' informative layers.
//
// Generation order from Rng(seed): class means mu[r][y] for r < R, y < C
// (d normals each, rescaled to norm kClassMeanNorm), then markers m[r]
// (d normals each, rescaled to norm kMarkerNorm), then the samples of train,
// val and test in that order. Per sample: r = below(R), y = below(C), then
// layer-major, frame-major, dim-minor noise normals scaled by noise_sigma.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "varan/objective.hpp"
#include "varan/tensor.hpp"

namespace varan {

inline constexpr double kClassMeanNorm = 0.5;
inline constexpr double kMarkerNorm = 2.0;
inline constexpr int kDatasetFormatVersion = 1;

struct SynthSpec {
  std::size_t n_layers = 6;
  std::size_t dim = 32;
  std::size_t seq_len = 8;
  std::size_t n_classes = 4;
  std::size_t n_regimes = 3;
  double signal_strength = 2.0;
  double noise_sigma = 1.0;
  std::size_t n_train = 4000;
  std::size_t n_val = 500;
  std::size_t n_test = 1000;
  std::uint64_t seed = 42;

  /// Throws std::invalid_argument when a field is out of range.
  void validate() const;
  /// 0-based layer carrying the label signal in regime r: the regimes are
  /// spread evenly with the last regime on the top layer.
  std::size_t informative_layer(std::size_t regime) const;
};

nlohmann::ordered_json to_json(const SynthSpec& s);
SynthSpec synth_spec_from_json(const nlohmann::json& j);

struct SplitData {
  Tensor stacks;                     // (N, n, s, d)
  std::vector<Label> labels;         // N
  std::vector<std::int32_t> regimes; // N; analysis only, never a model input
  std::vector<std::size_t> ids;      // global sample ids, unique across splits

  std::size_t size() const { return labels.size(); }
  /// Gathers the given rows into a (b, n, s, d) batch.
  Tensor batch(std::span<const std::size_t> rows) const;
  std::vector<Label> batch_labels(std::span<const std::size_t> rows) const;
};

struct SynthDataset {
  SynthSpec spec;
  SplitData train, val, test;

  const SplitData& split(const std::string& name) const;
};

SynthDataset generate_dataset(const SynthSpec& spec);

void save_dataset(const std::filesystem::path& path, const SynthDataset& ds);
SynthDataset load_dataset(const std::filesystem::path& path);

/// Copy of `split` with each sample's informative layer zeroed.
SplitData ablate_informative_layer(const SplitData& split, const SynthSpec& spec);

/// Ceiling reference: a nearest-class-mean (identity-covariance linear)
/// probe fit on `train` separately for each true regime, over the
/// sequence-pooled layers concatenated, scored on `eval`.
double oracle_probe_accuracy(const SplitData& train, const SplitData& eval, const SynthSpec& spec);

}  // namespace varan
